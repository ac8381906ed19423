"""Socket protocol that pushes delta packets between model stores.

A session is one push: the peers exchange HELLO frames listing which
versions of the model each holds, the sender picks the newest shared
version as the delta base, then OFFER -> ACCEPT -> DELTA -> ACK. The
receiver registers the reconstructed artifact only after its checksum
matches the packet, so a store never holds a partially applied version.

Frames are u32 little-endian length, then a tag byte, then the body.
The stream is assumed reliable; corruption is caught by the packet
checksum, not by per-frame integrity codes.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import struct
from dataclasses import dataclass

from . import codec
from .core import (
    ChecksumMismatch,
    ModelPipeError,
    ModelVersionId,
    Reader,
    TruncatedPayload,
    pack_text,
    weight_checksum,
)
from .registry import (
    DuplicateVersion,
    NoCommonVersion,
    RegistryStore,
    UnknownVersion,
    VersionSet,
    latest_common_version,
)

log = logging.getLogger(__name__)

TAG_HELLO = 1
TAG_OFFER = 2
TAG_ACCEPT = 3
TAG_DELTA = 4
TAG_ACK = 5
TAG_ERROR = 6

FRAME_CAP = 64 * 1024 * 1024  # refuse frames larger than 64 MiB

CODE_PROTOCOL = 1
CODE_UNKNOWN_VERSION = 2
CODE_DUPLICATE_VERSION = 3
CODE_CHECKSUM_MISMATCH = 4
CODE_BAD_PACKET = 5
CODE_INTERNAL = 6


class TransferError(ModelPipeError):
    """A push failed; ``code`` is the wire error code when the peer sent one."""

    def __init__(self, message: str, code: int = 0):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class TransferSummary:
    """Outcome of one successful push."""

    model_id: str
    target_version: int
    prediction_version: int
    params: codec.QuantizationParams
    checksum: int
    bytes_sent: int
    bytes_received: int
    reused_packet: bool
    report: codec.SizeReport


# --- framing ---------------------------------------------------------------


def _frame(tag: int, body: bytes) -> bytes:
    return struct.pack("<IB", len(body) + 1, tag) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise TransferError("connection closed mid-frame")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def _recv_frame(sock: socket.socket) -> tuple[int, bytes, int]:
    """Returns (tag, body, wire bytes consumed)."""
    (length,) = struct.unpack("<I", _recv_exact(sock, 4))
    if length < 1 or length > FRAME_CAP:
        raise TransferError(f"frame length {length} outside [1, {FRAME_CAP}]")
    payload = _recv_exact(sock, length)
    return payload[0], payload[1:], 4 + length


def _hello_body(versions: VersionSet) -> bytes:
    parts = [pack_text(versions.model_id), struct.pack("<I", len(versions.versions))]
    parts.extend(struct.pack("<Q", v) for v in versions.versions)
    return b"".join(parts)


def _parse_hello(body: bytes) -> VersionSet:
    r = Reader(body, 0)
    model_id = r.text()
    count = r.u32()
    versions = tuple(r.u64() for _ in range(count))
    if r.remaining():
        raise TruncatedPayload("trailing bytes in HELLO")
    return VersionSet(model_id, versions)


def _offer_body(model_id: str, target: int, prediction: int, p: codec.QuantizationParams) -> bytes:
    return (
        pack_text(model_id)
        + struct.pack("<qq", target, prediction)
        + struct.pack("<BBdB", p.s_bits, p.q_bits, p.f, p.rounding)
    )


def _parse_offer(body: bytes) -> tuple[str, int, int, codec.QuantizationParams]:
    r = Reader(body, 0)
    model_id = r.text()
    target = r.i64()
    prediction = r.i64()
    s_bits, q_bits, f, rounding = struct.unpack("<BBdB", r.take(11))
    if r.remaining():
        raise TruncatedPayload("trailing bytes in OFFER")
    return model_id, target, prediction, codec.QuantizationParams(s_bits, q_bits, f, rounding)


def _error_body(code: int, message: str) -> bytes:
    return struct.pack("<H", code) + pack_text(message[:512])


def _parse_error(body: bytes) -> tuple[int, str]:
    r = Reader(body, 0)
    return struct.unpack("<H", r.take(2))[0], r.text()


def _raise_remote(code: int, message: str):
    text = f"receiver: {message}"
    if code == CODE_CHECKSUM_MISMATCH:
        raise ChecksumMismatch(text)
    if code == CODE_DUPLICATE_VERSION:
        raise DuplicateVersion(text)
    if code == CODE_UNKNOWN_VERSION:
        raise UnknownVersion(text)
    raise TransferError(text, code)


# --- receiver --------------------------------------------------------------


class _Abort(Exception):
    """Session-fatal condition reported to the peer as an ERROR frame."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Session(socketserver.BaseRequestHandler):
    server: "ModelReceiver"

    def handle(self):
        sock = self.request
        sock.settimeout(self.server.session_timeout)
        try:
            self._run(sock)
        except _Abort as exc:
            log.warning("session from %s aborted: %s", self.client_address, exc)
            try:
                sock.sendall(_frame(TAG_ERROR, _error_body(exc.code, str(exc))))
            except OSError:
                pass
        except (TransferError, TruncatedPayload, OSError) as exc:
            log.warning("session from %s dropped: %s", self.client_address, exc)

    def _expect(self, sock: socket.socket, tag: int, what: str) -> bytes:
        got, body, _ = _recv_frame(sock)
        if got != tag:
            raise _Abort(CODE_PROTOCOL, f"expected {what}, got tag {got}")
        return body

    def _run(self, sock: socket.socket):
        store = self.server.store
        try:
            theirs = _parse_hello(self._expect(sock, TAG_HELLO, "HELLO"))
        except (TruncatedPayload, UnicodeDecodeError) as exc:
            raise _Abort(CODE_PROTOCOL, f"bad HELLO: {exc}") from None
        mine = store.versions(theirs.model_id)
        sock.sendall(_frame(TAG_HELLO, _hello_body(mine)))

        try:
            model_id, target, prediction, params = _parse_offer(
                self._expect(sock, TAG_OFFER, "OFFER")
            )
        except (TruncatedPayload, UnicodeDecodeError, ValueError) as exc:
            raise _Abort(CODE_PROTOCOL, f"bad OFFER: {exc}") from None
        if model_id != theirs.model_id:
            raise _Abort(CODE_PROTOCOL, "OFFER model does not match HELLO")
        if target in mine:
            raise _Abort(CODE_DUPLICATE_VERSION, f"already have {model_id} v{target}")
        if prediction >= 0 and prediction not in mine:
            raise _Abort(CODE_UNKNOWN_VERSION, f"do not have base v{prediction}")
        sock.sendall(_frame(TAG_ACCEPT, b""))

        body = self._expect(sock, TAG_DELTA, "DELTA")
        try:
            pkt = codec.packet_from_bytes(body)
        except codec.CodecError as exc:
            raise _Abort(CODE_BAD_PACKET, str(exc)) from None
        if (pkt.target.model_id, pkt.target.version) != (model_id, target):
            raise _Abort(CODE_PROTOCOL, "packet target does not match OFFER")
        if pkt.base.version != prediction or pkt.params != params:
            raise _Abort(CODE_PROTOCOL, "packet base or params do not match OFFER")

        base = store.get_model(ModelVersionId(model_id, prediction)) if prediction >= 0 else None
        try:
            recon = codec.reconstruct(codec.decode_packet(pkt), base)
        except (codec.CodecError, ModelPipeError) as exc:
            raise _Abort(CODE_BAD_PACKET, str(exc)) from None
        actual = weight_checksum(recon)
        if actual != pkt.checksum:
            raise _Abort(
                CODE_CHECKSUM_MISMATCH,
                f"reconstruction hash {actual:#018x} != packet {pkt.checksum:#018x}",
            )
        try:
            store.register_model(recon)
        except DuplicateVersion as exc:
            raise _Abort(CODE_DUPLICATE_VERSION, str(exc)) from None
        store.put_packet(pkt)
        sock.sendall(_frame(TAG_ACK, struct.pack("<Q", pkt.checksum)))
        log.info(
            "registered %s v%d from %s (%d payload bytes)",
            model_id, target, self.client_address, pkt.payload_bytes,
        )


class ModelReceiver(socketserver.ThreadingTCPServer):
    """Listening endpoint that applies pushed updates into a store.

    Sessions run on daemon threads and only touch the store through its
    locking contract, so concurrent pushes of different models proceed in
    parallel. Use ``shutdown()`` to stop; in-flight sessions that have not
    reached checksum verification leave the store untouched.
    """

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, store: RegistryStore, address: tuple[str, int] = ("127.0.0.1", 0),
                 session_timeout: float = 30.0):
        self.store = store
        self.session_timeout = session_timeout
        super().__init__(address, _Session)

    @property
    def endpoint(self) -> tuple[str, int]:
        host, port = self.server_address[:2]
        return host, port


def serve(store: RegistryStore, host: str = "127.0.0.1", port: int = 7465) -> None:
    """Run a receiver until interrupted. Blocks."""
    with ModelReceiver(store, (host, port)) as receiver:
        log.info("listening on %s:%d, store at %s", host, port, store.root)
        try:
            receiver.serve_forever()
        except KeyboardInterrupt:
            pass


# --- sender ----------------------------------------------------------------


def _pick_packet(
    store: RegistryStore,
    target: ModelVersionId,
    prediction: int,
    params: codec.QuantizationParams | None,
) -> tuple[codec.DeltaPacket, bool]:
    """A stored packet is resent verbatim when it matches; otherwise encode.

    Resending the registered packet keeps every receiver byte-identical to
    the producer even after chained updates, because the packet's checksum
    was minted against the registered reconstruction itself.
    """
    if store.has_packet(target.model_id, prediction, target.version):
        pkt = store.get_packet(target.model_id, prediction, target.version)
        if params is None or pkt.params == params:
            return pkt, True
    chosen = params or codec.QuantizationParams()
    art = store.get_model(target)
    if prediction >= 0:
        base = store.get_model(ModelVersionId(target.model_id, prediction))
        qd = codec.quantize_delta(codec.compute_delta(art, base), chosen)
    else:
        base = None
        qd = codec.quantize_model(art, chosen)
    return codec.encode_packet(qd, base), False


def push_model(
    store: RegistryStore,
    remote: tuple[str, int],
    target: ModelVersionId,
    params: codec.QuantizationParams | None = None,
    *,
    timeout: float = 30.0,
) -> TransferSummary:
    """Push one registered version to a receiver endpoint.

    The delta base is the newest version both stores hold; with no common
    version the whole model is quantized against the -1 sentinel so empty
    receivers can bootstrap. ``params=None`` reuses the stored packet for
    that edge when one exists, else falls back to default parameters.
    """
    sent = 0
    received = 0
    with socket.create_connection(remote, timeout=timeout) as sock:
        sock.settimeout(timeout)

        hello = _frame(TAG_HELLO, _hello_body(store.versions(target.model_id)))
        sock.sendall(hello)
        sent += len(hello)

        tag, body, n = _recv_frame(sock)
        received += n
        if tag == TAG_ERROR:
            _raise_remote(*_parse_error(body))
        if tag != TAG_HELLO:
            raise TransferError(f"expected HELLO reply, got tag {tag}")
        theirs = _parse_hello(body)
        if theirs.model_id != target.model_id:
            raise TransferError("receiver answered for a different model")
        if target.version in theirs:
            raise DuplicateVersion(
                f"receiver already has {target.model_id} v{target.version}"
            )
        try:
            prediction = latest_common_version(store.versions(target.model_id), theirs)
        except NoCommonVersion:
            prediction = -1

        pkt, reused = _pick_packet(store, target, prediction, params)
        offer = _frame(
            TAG_OFFER, _offer_body(target.model_id, target.version, prediction, pkt.params)
        )
        sock.sendall(offer)
        sent += len(offer)

        tag, body, n = _recv_frame(sock)
        received += n
        if tag == TAG_ERROR:
            _raise_remote(*_parse_error(body))
        if tag != TAG_ACCEPT:
            raise TransferError(f"expected ACCEPT, got tag {tag}")

        delta = _frame(TAG_DELTA, codec.packet_to_bytes(pkt))
        sock.sendall(delta)
        sent += len(delta)

        tag, body, n = _recv_frame(sock)
        received += n
        if tag == TAG_ERROR:
            _raise_remote(*_parse_error(body))
        if tag != TAG_ACK:
            raise TransferError(f"expected ACK, got tag {tag}")
        (acked,) = struct.unpack("<Q", body)
        if acked != pkt.checksum:
            raise ChecksumMismatch(
                f"ACK checksum {acked:#018x} != sent packet {pkt.checksum:#018x}"
            )

    return TransferSummary(
        model_id=target.model_id,
        target_version=target.version,
        prediction_version=prediction,
        params=pkt.params,
        checksum=pkt.checksum,
        bytes_sent=sent,
        bytes_received=received,
        reused_packet=reused,
        report=codec.size_report(pkt),
    )
