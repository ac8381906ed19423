"""Versioned float32 model containers with a bit-exact wire format.

A model artifact is an ordered list of named weight tensors plus version
lineage metadata. Containers serialize to the "DRM1" layout; every field is
little-endian and the trailer is an FNV-1a-64 checksum over the preceding
bytes, so identical artifacts produce identical files on any platform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from math import prod
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"DRM1"

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

# Pure-python FNV is fine for headers but not for multi-megabyte payloads;
# the JIT path is compiled lazily on the first large input.
_FNV_JIT_THRESHOLD = 1 << 14
_fnv_jit = None
_fnv_jit_failed = False


class ModelPipeError(Exception):
    """Base class for every error raised by this package."""


class ContainerError(ModelPipeError):
    pass


class BadMagic(ContainerError):
    pass


class TruncatedPayload(ContainerError):
    pass


class ShapeMismatch(ContainerError):
    pass


class NonFiniteWeight(ContainerError):
    pass


class ChecksumMismatch(ModelPipeError):
    """Stored or transmitted bytes disagree with their recorded checksum."""


def _fnv_pure(data: bytes, h: int) -> int:
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def _compile_fnv_jit():
    global _fnv_jit, _fnv_jit_failed
    if _fnv_jit is not None or _fnv_jit_failed:
        return
    try:
        from numba import njit, types

        u8_ro = types.Array(types.uint8, 1, "C", readonly=True)

        @njit([types.uint64(u8_ro, types.uint64)], cache=True, nogil=True)
        def _jit(arr, h):  # pragma: no cover - exercised via fnv1a64
            for i in range(arr.size):
                h = (h ^ np.uint64(arr[i])) * np.uint64(0x100000001B3)
            return h

        _fnv_jit = _jit
    except Exception:
        _fnv_jit_failed = True


def fnv1a64(data: bytes | bytearray | memoryview | np.ndarray, seed: int = FNV_OFFSET) -> int:
    """FNV-1a 64-bit hash of a byte buffer."""
    if isinstance(data, np.ndarray):
        buf = np.ascontiguousarray(data).view(np.uint8).reshape(-1)
    else:
        buf = np.frombuffer(data, dtype=np.uint8)
    if buf.size >= _FNV_JIT_THRESHOLD:
        _compile_fnv_jit()
    if _fnv_jit is not None:
        return int(_fnv_jit(buf, np.uint64(seed)))
    return _fnv_pure(buf.tobytes(), seed)


def _frozen_f32(values) -> np.ndarray:
    """Flat, C-ordered, read-only float32 view; copies only when needed."""
    arr = np.asarray(values)
    if arr.dtype == np.float32 and arr.flags.c_contiguous and not arr.flags.writeable:
        return arr.reshape(-1)
    out = np.array(arr, dtype=np.float32, copy=True, order="C").reshape(-1)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class WeightTensor:
    """One named tensor: a shape and its flat row-major float32 payload.

    Equality is bitwise over the payload, so it distinguishes -0.0 from
    0.0 and agrees with the checksum: equal tensors hash equal.
    """

    name: str
    shape: tuple[int, ...]
    data: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, WeightTensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def __post_init__(self):
        if not self.name or len(self.name.encode("utf-8")) >= 1 << 16:
            raise ValueError("tensor name must be 1..65535 UTF-8 bytes")
        shape = tuple(int(d) for d in self.shape)
        if not shape or any(d < 1 for d in shape):
            raise ShapeMismatch(f"{self.name}: dimensions must be positive, got {shape}")
        if len(shape) >= 1 << 8:
            raise ShapeMismatch(f"{self.name}: rank {len(shape)} exceeds the u8 wire field")
        data = _frozen_f32(self.data)
        if data.size != prod(shape):
            raise ShapeMismatch(
                f"{self.name}: shape {shape} wants {prod(shape)} values, got {data.size}"
            )
        if not np.isfinite(data).all():
            raise NonFiniteWeight(f"{self.name}: NaN or Inf in weights")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)

    @property
    def weight_count(self) -> int:
        return self.data.size


@dataclass(frozen=True, order=True)
class ModelVersionId:
    model_id: str
    version: int

    def __post_init__(self):
        if self.version < -1:
            raise ValueError("version must be >= -1 (-1 is the no-base sentinel)")


@dataclass(frozen=True)
class ModelArtifact:
    """Immutable snapshot of one model version."""

    model_id: str
    version: int
    parent_version: int | None
    layers: tuple[WeightTensor, ...]
    architecture_digest: int = field(init=False, compare=False)

    def __post_init__(self):
        if not self.model_id or len(self.model_id.encode("utf-8")) >= 1 << 16:
            raise ValueError("model_id must be 1..65535 UTF-8 bytes")
        if self.version < 0:
            raise ValueError(f"version must be non-negative, got {self.version}")
        if self.parent_version is not None and not (0 <= self.parent_version < self.version):
            raise ValueError(
                f"parent_version {self.parent_version} must precede version {self.version}"
            )
        layers = tuple(self.layers)
        names = [t.name for t in layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique within an artifact")
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "architecture_digest", architecture_digest(layers))

    @property
    def id(self) -> ModelVersionId:
        return ModelVersionId(self.model_id, self.version)

    @property
    def weight_count(self) -> int:
        return sum(t.weight_count for t in self.layers)


def architecture_digest(layers: Iterable[WeightTensor | tuple[str, Sequence[int]]]) -> int:
    """64-bit digest of the ordered (name, shape) list.

    Stream per layer: UTF-8 name, a 0x00 separator, then each dimension as
    8 bytes little-endian. Weight values do not participate.
    """
    parts = []
    for layer in layers:
        name, shape = (layer.name, layer.shape) if isinstance(layer, WeightTensor) else layer
        parts.append(name.encode("utf-8"))
        parts.append(b"\x00")
        for dim in shape:
            parts.append(int(dim).to_bytes(8, "little"))
    return fnv1a64(b"".join(parts))


def architecture_compatible(a: ModelArtifact, b: ModelArtifact) -> bool:
    return a.architecture_digest == b.architecture_digest


def weight_bytes(model: ModelArtifact) -> bytes:
    """Weight payloads in layer order, exactly as they appear in a container."""
    return b"".join(t.data.astype("<f4", copy=False).tobytes() for t in model.layers)


def weight_checksum(model: ModelArtifact) -> int:
    return fnv1a64(weight_bytes(model))


class Reader:
    """Cursor over immutable bytes; underruns raise TruncatedPayload."""

    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def take(self, n: int) -> memoryview:
        if self.remaining() < n:
            raise TruncatedPayload(f"wanted {n} bytes at offset {self.pos}, have {self.remaining()}")
        view = memoryview(self.buf)[self.pos : self.pos + n]
        self.pos += n
        return view

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def text(self) -> str:
        n = self.u16()
        return bytes(self.take(n)).decode("utf-8")


def pack_text(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def serialize_model(model: ModelArtifact) -> bytes:
    parts = [MAGIC, pack_text(model.model_id), struct.pack("<Q", model.version)]
    if model.parent_version is None:
        parts.append(b"\x00")
    else:
        parts.append(struct.pack("<BQ", 1, model.parent_version))
    parts.append(struct.pack("<I", len(model.layers)))
    for t in model.layers:
        parts.append(pack_text(t.name))
        parts.append(struct.pack("<B", len(t.shape)))
        parts.append(struct.pack(f"<{len(t.shape)}Q", *t.shape))
        parts.append(t.data.astype("<f4", copy=False).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def deserialize_model(blob: bytes) -> ModelArtifact:
    if blob[:4] != MAGIC:
        raise BadMagic(f"container must begin with {MAGIC!r}")
    r = Reader(blob, 4)
    model_id = r.text()
    version = r.u64()
    parent: int | None = None
    if r.u8():
        parent = r.u64()
    layer_count = r.u32()
    layers = []
    for _ in range(layer_count):
        name = r.text()
        rank = r.u8()
        dims = tuple(r.u64() for _ in range(rank))
        count = prod(dims) if dims else 0
        if not dims or any(d < 1 for d in dims):
            raise ShapeMismatch(f"{name}: bad dimensions {dims}")
        payload = r.take(4 * count)
        data = np.frombuffer(payload, dtype="<f4")
        layers.append(WeightTensor(name, dims, data))
    trailer = r.u64()
    if r.remaining():
        raise ChecksumMismatch(f"{r.remaining()} trailing bytes after container trailer")
    actual = fnv1a64(blob[: len(blob) - 8])
    if actual != trailer:
        raise ChecksumMismatch(
            f"container trailer {trailer:#018x} != computed {actual:#018x}"
        )
    return ModelArtifact(model_id, version, parent, tuple(layers))
