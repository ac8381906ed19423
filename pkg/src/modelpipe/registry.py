"""On-disk store of model versions and the delta packets that link them.

Layout: one directory per model id under the store root, holding
``v{N}.drm`` containers and ``v{A}_to_{B}.drp`` packets. ``index.json``
is a convenience cache; a directory scan is always authoritative, so a
store survives crashes and can be rebuilt from the files alone. Writers
take a per-model advisory file lock; readers never lock because every
write lands via atomic rename.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from urllib.parse import quote, unquote

from filelock import FileLock

from . import codec
from .core import (
    ChecksumMismatch,
    ModelArtifact,
    ModelPipeError,
    ModelVersionId,
    deserialize_model,
    serialize_model,
    weight_checksum,
)

STORE_ENV_VAR = "RETINA_STORE"

_MODEL_FILE = re.compile(r"^v(\d+)\.drm$")
_PACKET_FILE = re.compile(r"^v(-?\d+)_to_(\d+)\.drp$")


class RegistryError(ModelPipeError):
    pass


class UnknownParent(RegistryError):
    pass


class UnknownVersion(RegistryError, KeyError):
    pass


class NonMonotoneVersion(RegistryError):
    pass


class DuplicateVersion(RegistryError):
    pass


class NoCommonVersion(RegistryError):
    pass


class ChainGap(RegistryError):
    pass


@dataclass(frozen=True)
class VersionSet:
    """The versions of one model a node holds, sorted ascending."""

    model_id: str
    versions: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "versions", tuple(sorted(set(int(v) for v in self.versions))))

    @property
    def latest(self) -> int | None:
        return self.versions[-1] if self.versions else None

    def __contains__(self, version: int) -> bool:
        return version in self.versions


def latest_common_version(a: VersionSet, b: VersionSet) -> int:
    """Greatest version both sides hold; the best delta base for a transfer."""
    if a.model_id != b.model_id:
        raise NoCommonVersion(f"different models: {a.model_id!r} vs {b.model_id!r}")
    common = set(a.versions) & set(b.versions)
    if not common:
        raise NoCommonVersion(f"{a.model_id}: no shared version")
    return max(common)


def _atomic_write(path: Path, blob: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


class RegistryStore:
    """Filesystem-backed registry rooted at a directory.

    The root comes from the constructor argument or, when omitted, the
    RETINA_STORE environment variable.
    """

    def __init__(self, root: str | os.PathLike | None = None):
        if root is None:
            root = os.environ.get(STORE_ENV_VAR)
        if not root:
            raise ValueError(f"no store root given and {STORE_ENV_VAR} is not set")
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    # -- paths ---------------------------------------------------------

    def _model_dir(self, model_id: str) -> Path:
        return self.root / quote(model_id, safe="")

    def _model_path(self, model_id: str, version: int) -> Path:
        return self._model_dir(model_id) / f"v{version}.drm"

    def _packet_path(self, model_id: str, base: int, target: int) -> Path:
        return self._model_dir(model_id) / f"v{base}_to_{target}.drp"

    def _lock(self, model_id: str) -> FileLock:
        d = self._model_dir(model_id)
        d.mkdir(parents=True, exist_ok=True)
        return FileLock(d / ".lock")

    # -- queries -------------------------------------------------------

    def model_ids(self) -> list[str]:
        return sorted(
            unquote(p.name) for p in self.root.iterdir() if p.is_dir()
        )

    def versions(self, model_id: str) -> VersionSet:
        d = self._model_dir(model_id)
        found = []
        if d.is_dir():
            for entry in d.iterdir():
                m = _MODEL_FILE.match(entry.name)
                if m:
                    found.append(int(m.group(1)))
        return VersionSet(model_id, tuple(found))

    def packets(self, model_id: str) -> list[tuple[int, int]]:
        d = self._model_dir(model_id)
        found = []
        if d.is_dir():
            for entry in d.iterdir():
                m = _PACKET_FILE.match(entry.name)
                if m:
                    found.append((int(m.group(1)), int(m.group(2))))
        return sorted(found)

    def get_model(self, ref: ModelVersionId) -> ModelArtifact:
        path = self._model_path(ref.model_id, ref.version)
        if not path.is_file():
            raise UnknownVersion(f"{ref.model_id} v{ref.version} not in store")
        return deserialize_model(path.read_bytes())

    def get_packet(self, model_id: str, base: int, target: int) -> codec.DeltaPacket:
        path = self._packet_path(model_id, base, target)
        if not path.is_file():
            raise UnknownVersion(f"{model_id} packet v{base}->v{target} not in store")
        return codec.packet_from_bytes(path.read_bytes())

    def has_packet(self, model_id: str, base: int, target: int) -> bool:
        return self._packet_path(model_id, base, target).is_file()

    # -- writes --------------------------------------------------------

    def register_model(self, model: ModelArtifact) -> ModelVersionId:
        """Add a new latest version; lineage and monotonicity are enforced."""
        with self._lock(model.model_id):
            have = self.versions(model.model_id)
            if model.version in have:
                raise DuplicateVersion(f"{model.model_id} v{model.version} already registered")
            if have.latest is not None and model.version < have.latest:
                raise NonMonotoneVersion(
                    f"{model.model_id} v{model.version} is below latest v{have.latest}"
                )
            if model.parent_version is not None and model.parent_version not in have:
                raise UnknownParent(
                    f"{model.model_id} v{model.version} parent v{model.parent_version} missing"
                )
            _atomic_write(self._model_path(model.model_id, model.version), serialize_model(model))
            self._write_index(model.model_id)
        return model.id

    def put_packet(self, pkt: codec.DeltaPacket) -> None:
        model_id = pkt.target.model_id
        with self._lock(model_id):
            _atomic_write(
                self._packet_path(model_id, pkt.base.version, pkt.target.version),
                codec.packet_to_bytes(pkt),
            )
            self._write_index(model_id)

    def _write_index(self, model_id: str) -> None:
        # cache only; directory scans are the source of truth
        index = {
            "versions": list(self.versions(model_id).versions),
            "packets": [list(p) for p in self.packets(model_id)],
        }
        _atomic_write(
            self._model_dir(model_id) / "index.json",
            json.dumps(index, indent=0).encode("utf-8"),
        )


def register_update(
    store: RegistryStore,
    pristine: ModelArtifact,
    params: codec.QuantizationParams,
) -> tuple[ModelArtifact, codec.DeltaPacket]:
    """Publish a freshly trained model as a quantized update.

    What gets registered is the reconstruction, not the pristine weights:
    every node that later applies the returned packet ends up with the
    byte-identical artifact, so future deltas share an agreed base. With
    an empty history the model is quantized whole against the -1 sentinel.
    """
    have = store.versions(pristine.model_id)
    if have.latest is None:
        qd = codec.quantize_model(pristine, params)
        base = None
    else:
        base = store.get_model(ModelVersionId(pristine.model_id, have.latest))
        qd = codec.quantize_delta(codec.compute_delta(pristine, base), params)
    pkt = codec.encode_packet(qd, base)
    recon = codec.reconstruct(qd, base)
    store.register_model(recon)
    store.put_packet(pkt)
    return recon, pkt


def reconstruct_chain(
    store: RegistryStore,
    base: ModelVersionId,
    packets: Sequence[codec.DeltaPacket],
) -> ModelArtifact:
    """Fold a packet chain onto a stored base version.

    Each packet must name the current artifact as its base (ChainGap
    otherwise) and each reconstruction must hash to the packet's recorded
    checksum (ChecksumMismatch otherwise).
    """
    current = store.get_model(base)
    for pkt in packets:
        if (pkt.base.model_id, pkt.base.version) != (current.model_id, current.version):
            raise ChainGap(
                f"packet base {pkt.base.model_id} v{pkt.base.version} != "
                f"current {current.model_id} v{current.version}"
            )
        candidate = codec.reconstruct(codec.decode_packet(pkt), current)
        actual = weight_checksum(candidate)
        if actual != pkt.checksum:
            raise ChecksumMismatch(
                f"chain step to v{pkt.target.version}: checksum {actual:#018x} "
                f"!= recorded {pkt.checksum:#018x}"
            )
        current = candidate
    return current
