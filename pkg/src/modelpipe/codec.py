"""Weight-delta extraction, decimal scalar quantization, and delta packets.

The quantizer maps a weight to an integer through a base-10 grid:

    q = round_half_away_from_zero(w * 10**(s_bits - q_bits) + f)

and back through w_hat = q * 10**(q_bits - s_bits). Both directions are
evaluated in double precision exactly in that form; f is an offset folded
into rounding and is deliberately not removed on the way back, so the
reconstruction carries a bias of about f * 10**(q_bits - s_bits) whenever
values are large against the grid. Integers serialize with a byte-oriented
grammar: a 0x00 byte opens a zero run (followed by an LEB128 run length)
and any other token is the LEB128 varint of the zig-zag mapped value.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import floor, prod
from typing import Sequence

import numpy as np

from .core import (
    ModelArtifact,
    ModelPipeError,
    ModelVersionId,
    Reader,
    TruncatedPayload,
    WeightTensor,
    architecture_digest,
    pack_text,
    weight_checksum,
)

PACKET_MAGIC = b"DRP1"
PACKET_FORMAT_VERSION = 1
ROUND_HALF_AWAY = 1

# Correctly rounded powers of ten; literal parsing keeps the negative
# exponents reproducible across libm builds.
_POW10 = {k: float(f"1e{k}") for k in range(-15, 16)}

_OVERFLOW_LIMIT = float(2**62)


class CodecError(ModelPipeError):
    pass


class ArchitectureMismatch(CodecError):
    pass


class MalformedVarint(CodecError):
    pass


class LengthMismatch(CodecError):
    pass


class BadHeader(CodecError):
    pass


class QuantizationOverflow(CodecError, OverflowError):
    """Scaled weight left the int64 guard; wraparound is never silent."""


@dataclass(frozen=True)
class QuantizationParams:
    """Grid definition: s_bits decimal digits of scale, q_bits kept digits.

    s_bits - q_bits is the compression-bits knob: larger means a finer
    grid and bigger integers. |f| < 0.5 keeps quantize/dequantize
    idempotent on integers.
    """

    s_bits: int = 12
    q_bits: int = 7
    f: float = 0.3
    rounding: int = ROUND_HALF_AWAY

    def __post_init__(self):
        if not (0 <= self.q_bits <= self.s_bits <= 15):
            raise ValueError(
                f"need 0 <= q_bits <= s_bits <= 15, got s={self.s_bits} q={self.q_bits}"
            )
        if not abs(self.f) < 0.5:
            raise ValueError(f"|f| must be < 0.5, got {self.f}")
        if self.rounding != ROUND_HALF_AWAY:
            raise ValueError(f"unknown rounding mode {self.rounding}")

    @property
    def compression_bits(self) -> int:
        return self.s_bits - self.q_bits

    @property
    def scale(self) -> float:
        return _POW10[self.s_bits - self.q_bits]

    @property
    def step(self) -> float:
        """Grid pitch of the reconstruction, 10**(q_bits - s_bits)."""
        return _POW10[self.q_bits - self.s_bits]

    @property
    def error_bound(self) -> float:
        """Per-weight |w_hat - w| bound before float32 narrowing."""
        return (0.5 + abs(self.f)) * self.step


def round_half_away_from_zero(x: float) -> float:
    return float(np.copysign(floor(abs(x) + 0.5), x))


def quantize_weight(w: float, params: QuantizationParams) -> int:
    """Quantize one weight; raises QuantizationOverflow outside the int64 guard."""
    if abs(w) * params.scale + abs(params.f) >= _OVERFLOW_LIMIT:
        raise QuantizationOverflow(
            f"|{w}| * 1e{params.compression_bits} exceeds the 2**62 guard"
        )
    return int(round_half_away_from_zero(w * params.scale + params.f))


def dequantize_weight(q: int, params: QuantizationParams) -> float:
    return q * params.step


def _quantize_array(values: np.ndarray, params: QuantizationParams, name: str) -> np.ndarray:
    absmax = float(np.abs(values).max()) if values.size else 0.0
    if absmax * params.scale + abs(params.f) >= _OVERFLOW_LIMIT:
        raise QuantizationOverflow(
            f"{name}: |{absmax}| * 1e{params.compression_bits} exceeds the 2**62 guard"
        )
    shifted = values * params.scale + params.f
    return np.copysign(np.floor(np.abs(shifted) + 0.5), shifted).astype(np.int64)


def _frozen(arr: np.ndarray, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True, order="C").reshape(-1)
    out.setflags(write=False)
    return out


class _ArrayLayer:
    """Mixin giving layer dataclasses bitwise value equality."""

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class DeltaLayer(_ArrayLayer):
    name: str
    shape: tuple[int, ...]
    values: np.ndarray  # float64, flat

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        values = _frozen(self.values, np.float64)
        if values.size != prod(self.shape):
            raise ValueError(f"{self.name}: {self.shape} vs {values.size} values")
        if not np.isfinite(values).all():
            raise ValueError(f"{self.name}: non-finite delta values")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class QuantLayer(_ArrayLayer):
    name: str
    shape: tuple[int, ...]
    values: np.ndarray  # int64, flat

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        values = _frozen(self.values, np.int64)
        if values.size != prod(self.shape):
            raise ValueError(f"{self.name}: {self.shape} vs {values.size} values")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class DeltaModel:
    """Per-layer double-precision weight differences, target minus base."""

    base: ModelVersionId
    target: ModelVersionId
    layers: tuple[DeltaLayer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def weight_count(self) -> int:
        return sum(l.values.size for l in self.layers)


@dataclass(frozen=True)
class QuantizedDelta:
    params: QuantizationParams
    base: ModelVersionId
    target: ModelVersionId
    layers: tuple[QuantLayer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def weight_count(self) -> int:
        return sum(l.values.size for l in self.layers)


def compute_delta(target: ModelArtifact, base: ModelArtifact) -> DeltaModel:
    """target - base per layer, exact in float64."""
    if target.architecture_digest != base.architecture_digest:
        raise ArchitectureMismatch(
            f"target {target.architecture_digest:#x} != base {base.architecture_digest:#x}"
        )
    layers = tuple(
        DeltaLayer(t.name, t.shape, t.data.astype(np.float64) - b.data.astype(np.float64))
        for t, b in zip(target.layers, base.layers)
    )
    return DeltaModel(base.id, target.id, layers)


def quantize_delta(delta: DeltaModel, params: QuantizationParams) -> QuantizedDelta:
    layers = tuple(
        QuantLayer(l.name, l.shape, _quantize_array(l.values, params, l.name))
        for l in delta.layers
    )
    return QuantizedDelta(params, delta.base, delta.target, layers)


def dequantize_delta(qd: QuantizedDelta) -> DeltaModel:
    step = qd.params.step
    layers = tuple(
        DeltaLayer(l.name, l.shape, l.values.astype(np.float64) * step) for l in qd.layers
    )
    return DeltaModel(qd.base, qd.target, layers)


def quantize_model(model: ModelArtifact, params: QuantizationParams) -> QuantizedDelta:
    """Whole-model fallback: quantize weights against an implicit zero base.

    The base version is the -1 sentinel; reconstruct() accepts base=None
    for the matching decode path.
    """
    layers = tuple(
        QuantLayer(t.name, t.shape, _quantize_array(t.data.astype(np.float64), params, t.name))
        for t in model.layers
    )
    return QuantizedDelta(params, ModelVersionId(model.model_id, -1), model.id, layers)


def apply_delta(delta: DeltaModel, base: ModelArtifact) -> ModelArtifact:
    """base + delta in float64, narrowed to float32.

    Version metadata comes from the delta: the result is the delta's
    target, parented on the base version it was computed against.
    """
    delta_arch = architecture_digest((l.name, l.shape) for l in delta.layers)
    if delta_arch != base.architecture_digest:
        raise ArchitectureMismatch("delta layer list does not match the base architecture")
    layers = tuple(
        WeightTensor(b.name, b.shape, (b.data.astype(np.float64) + l.values).astype(np.float32))
        for b, l in zip(base.layers, delta.layers)
    )
    parent = delta.base.version
    if parent < 0 or parent >= delta.target.version:
        parent = None  # whole-model sentinel, or a degenerate self-delta
    return ModelArtifact(delta.target.model_id, delta.target.version, parent, layers)


def reconstruct(qd: QuantizedDelta, base: ModelArtifact | None) -> ModelArtifact:
    """Dequantize and compensate; base=None handles the whole-model sentinel."""
    if base is None:
        if qd.base.version != -1:
            raise ArchitectureMismatch(f"packet wants base version {qd.base.version}")
        step = qd.params.step
        layers = tuple(
            WeightTensor(l.name, l.shape, (l.values.astype(np.float64) * step).astype(np.float32))
            for l in qd.layers
        )
        return ModelArtifact(qd.target.model_id, qd.target.version, None, layers)
    return apply_delta(dequantize_delta(qd), base)


# --- integer payload grammar ---------------------------------------------

_U64 = np.uint64


def _varint_bytes(vals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """LEB128-encode a uint64 array; returns (bytes, per-value lengths)."""
    if vals.size == 0:
        return np.zeros(0, np.uint8), np.zeros(0, np.int64)
    lengths = np.ones(vals.size, np.int64)
    for k in range(1, 10):
        lengths += vals >= _U64(1 << (7 * k))
    offsets = np.zeros(vals.size + 1, np.int64)
    np.cumsum(lengths, out=offsets[1:])
    out = np.zeros(int(offsets[-1]), np.uint8)
    for j in range(10):
        live = lengths > j
        if not live.any():
            break
        chunk = (vals[live] >> _U64(7 * j)) & _U64(0x7F)
        cont = (lengths[live] > j + 1).astype(np.uint8) << 7
        out[offsets[:-1][live] + j] = chunk.astype(np.uint8) | cont
    return out, lengths


def encode_values(values: np.ndarray) -> bytes:
    """Serialize int64 values: zig-zag varints with 0x00-prefixed zero runs."""
    values = np.ascontiguousarray(values, dtype=np.int64)
    n = values.size
    if n == 0:
        return b""
    zero = values == 0
    prev = np.empty(n, dtype=bool)
    prev[0] = False
    prev[1:] = zero[:-1]
    run_starts = np.flatnonzero(zero & ~prev)
    nxt = np.empty(n, dtype=bool)
    nxt[-1] = False
    nxt[:-1] = zero[1:]
    run_ends = np.flatnonzero(zero & ~nxt)
    run_lengths = run_ends - run_starts + 1

    nonzero_pos = np.flatnonzero(~zero)
    nz = values[nonzero_pos]
    zz = ((nz << 1) ^ (nz >> 63)).view(np.uint64)
    nz_bytes, nz_lens = _varint_bytes(zz)
    rl_bytes, rl_lens = _varint_bytes(run_lengths.astype(np.uint64))

    # interleave tokens back into positional order
    tok_pos = np.concatenate((nonzero_pos, run_starts))
    order = np.argsort(tok_pos, kind="stable")
    kinds = np.concatenate(
        (np.zeros(nonzero_pos.size, np.int8), np.ones(run_starts.size, np.int8))
    )[order]
    sizes = np.concatenate((nz_lens, rl_lens + 1))[order]
    offsets = np.zeros(sizes.size + 1, np.int64)
    np.cumsum(sizes, out=offsets[1:])
    out = np.zeros(int(offsets[-1]), np.uint8)

    def scatter(dst_starts: np.ndarray, lens: np.ndarray, payload: np.ndarray) -> None:
        if dst_starts.size == 0:
            return
        ends = np.zeros(lens.size + 1, np.int64)
        np.cumsum(lens, out=ends[1:])
        idx = np.repeat(dst_starts, lens) + (np.arange(int(ends[-1])) - np.repeat(ends[:-1], lens))
        out[idx] = payload

    scatter(offsets[:-1][kinds == 0], nz_lens, nz_bytes)
    run_dst = offsets[:-1][kinds == 1]
    out[run_dst] = 0
    scatter(run_dst + 1, rl_lens, rl_bytes)
    return out.tobytes()


def decode_values(payload: bytes, expected_count: int) -> np.ndarray:
    """Inverse of encode_values; validates the grammar and the value count."""
    b = np.frombuffer(payload, dtype=np.uint8)
    if b.size == 0:
        if expected_count != 0:
            raise LengthMismatch(f"empty payload, wanted {expected_count} values")
        return np.zeros(0, np.int64)
    cont = (b & 0x80) != 0
    if cont[-1]:
        raise MalformedVarint("payload ends mid-varint")
    ends = np.flatnonzero(~cont)
    starts = np.concatenate(([0], ends[:-1] + 1))
    lengths = ends - starts + 1
    if (lengths > 10).any():
        raise MalformedVarint("varint longer than 10 bytes")
    within = np.arange(b.size) - np.repeat(starts, lengths)
    contrib = (b & _U64(0x7F)).astype(np.uint64) << (_U64(7) * within.astype(np.uint64))
    vals = np.add.reduceat(contrib, starts) if starts.size else np.zeros(0, np.uint64)

    markers = np.flatnonzero(vals == 0)
    if markers.size:
        if markers[-1] == vals.size - 1:
            raise MalformedVarint("zero-run marker with no run length")
        run_lengths = vals[markers + 1]
        if (run_lengths == 0).any():
            raise MalformedVarint("zero-length zero run")
        if (run_lengths > _U64(expected_count)).any():
            raise LengthMismatch("zero run exceeds the declared value count")
        run_lengths = run_lengths.astype(np.int64)
    else:
        run_lengths = np.zeros(0, np.int64)
    operand = np.zeros(vals.size, dtype=bool)
    operand[markers + 1] = True

    single_pos = np.flatnonzero(~operand & (vals != 0))
    sval = vals[single_pos]
    decoded = (sval >> _U64(1)).astype(np.int64) ^ -(sval & _U64(1)).astype(np.int64)

    tok_pos = np.concatenate((single_pos, markers))
    order = np.argsort(tok_pos, kind="stable")
    emits = np.concatenate((np.ones(single_pos.size, np.int64), run_lengths))[order]
    total = int(emits.sum())
    if total != expected_count:
        raise LengthMismatch(f"payload decodes to {total} values, wanted {expected_count}")
    offsets = np.zeros(tok_pos.size + 1, np.int64)
    np.cumsum(emits, out=offsets[1:])
    out = np.zeros(total, np.int64)
    kinds = np.concatenate((np.zeros(single_pos.size, np.int8), np.ones(markers.size, np.int8)))
    out[offsets[:-1][kinds[order] == 0]] = decoded
    return out


# --- packet format ---------------------------------------------------------

@dataclass(frozen=True)
class PacketLayer:
    name: str
    shape: tuple[int, ...]
    payload: bytes

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))


@dataclass(frozen=True)
class DeltaPacket:
    """Encoded delta plus the checksum of its reconstruction.

    checksum is FNV-1a-64 over the reconstructed model's weight bytes in
    container order, so a receiver can prove it rebuilt exactly what the
    sender intended.
    """

    base: ModelVersionId
    target: ModelVersionId
    params: QuantizationParams
    layers: tuple[PacketLayer, ...]
    checksum: int
    format_version: int = PACKET_FORMAT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def weight_count(self) -> int:
        return sum(prod(l.shape) for l in self.layers)

    @property
    def payload_bytes(self) -> int:
        return sum(len(l.payload) for l in self.layers)


def encode_packet(qd: QuantizedDelta, base: ModelArtifact | None) -> DeltaPacket:
    """Encode payloads and stamp the reconstruction checksum.

    base must be the artifact the delta was computed against (None for the
    whole-model sentinel); it feeds the checksum, not the payload bytes.
    """
    recon = reconstruct(qd, base)
    layers = tuple(PacketLayer(l.name, l.shape, encode_values(l.values)) for l in qd.layers)
    return DeltaPacket(qd.base, qd.target, qd.params, layers, weight_checksum(recon))


def decode_packet(pkt: DeltaPacket) -> QuantizedDelta:
    layers = tuple(
        QuantLayer(l.name, l.shape, decode_values(l.payload, prod(l.shape))) for l in pkt.layers
    )
    return QuantizedDelta(pkt.params, pkt.base, pkt.target, layers)


def packet_to_bytes(pkt: DeltaPacket) -> bytes:
    parts = [
        PACKET_MAGIC,
        struct.pack("<B", pkt.format_version),
        pack_text(pkt.base.model_id),
        struct.pack("<q", pkt.base.version),
        pack_text(pkt.target.model_id),
        struct.pack("<q", pkt.target.version),
        struct.pack("<BBdB", pkt.params.s_bits, pkt.params.q_bits, pkt.params.f, pkt.params.rounding),
        struct.pack("<I", len(pkt.layers)),
    ]
    for l in pkt.layers:
        parts.append(pack_text(l.name))
        parts.append(struct.pack("<B", len(l.shape)))
        parts.append(struct.pack(f"<{len(l.shape)}Q", *l.shape))
        parts.append(struct.pack("<Q", len(l.payload)))
    parts.extend(l.payload for l in pkt.layers)
    parts.append(struct.pack("<Q", pkt.checksum))
    return b"".join(parts)


def packet_from_bytes(blob: bytes) -> DeltaPacket:
    if blob[:4] != PACKET_MAGIC:
        raise BadHeader(f"packet must begin with {PACKET_MAGIC!r}")
    r = Reader(blob, 4)
    try:
        fmt = r.u8()
        if fmt != PACKET_FORMAT_VERSION:
            raise BadHeader(f"unsupported packet format version {fmt}")
        try:
            base = ModelVersionId(r.text(), r.i64())
            target = ModelVersionId(r.text(), r.i64())
            s_bits, q_bits, f, rounding = struct.unpack("<BBdB", r.take(11))
            params = QuantizationParams(s_bits, q_bits, f, rounding)
        except (ValueError, UnicodeDecodeError) as exc:
            raise BadHeader(str(exc)) from None
        layer_count = r.u32()
        directory = []
        for _ in range(layer_count):
            name = r.text()
            rank = r.u8()
            dims = tuple(r.u64() for _ in range(rank))
            if not dims or any(d < 1 for d in dims):
                raise BadHeader(f"{name}: bad dimensions {dims}")
            directory.append((name, dims, r.u64()))
        layers = tuple(
            PacketLayer(name, dims, bytes(r.take(plen))) for name, dims, plen in directory
        )
        checksum = r.u64()
    except TruncatedPayload as exc:
        raise BadHeader(f"truncated packet: {exc}") from None
    except UnicodeDecodeError as exc:
        raise BadHeader(f"bad text field: {exc}") from None
    if r.remaining():
        raise BadHeader(f"{r.remaining()} trailing bytes after packet checksum")
    return DeltaPacket(base, target, params, layers, checksum)


@dataclass(frozen=True)
class SizeReport:
    """Size accounting for one packet against a 4-bytes-per-weight baseline."""

    weight_count: int
    baseline_bytes: int
    payload_bytes: int
    packet_bytes: int
    compression_ratio: float
    entropy_bits_per_weight: float


def size_report(pkt: DeltaPacket, weight_count: int | None = None) -> SizeReport:
    if weight_count is None:
        weight_count = pkt.weight_count
    qd = decode_packet(pkt)
    pooled = (
        np.concatenate([l.values for l in qd.layers]) if qd.layers else np.zeros(0, np.int64)
    )
    if pooled.size:
        _, counts = np.unique(pooled, return_counts=True)
        p = counts / pooled.size
        entropy = float(-(p * np.log2(p)).sum())
    else:
        entropy = 0.0
    packet_bytes = len(packet_to_bytes(pkt))
    baseline = 4 * weight_count
    return SizeReport(
        weight_count=weight_count,
        baseline_bytes=baseline,
        payload_bytes=pkt.payload_bytes,
        packet_bytes=packet_bytes,
        compression_ratio=baseline / packet_bytes,
        entropy_bits_per_weight=entropy,
    )
