"""Alignment penalties tying target representations to frozen source ones.

The penalty for one sample is a weighted sum over source models of the
squared distance between the source's representation and the target's
representation pushed through a learned linear map. Representations may
be vectors (one map each) or order-2 tensors (one map per mode, applied
as V1 @ Z @ V2.T). Batched inputs add a leading axis; the returned value
is the sum over the batch, matching an objective that sums over samples.

The vector and tensor paths are implemented independently; a 1-tuple of
mode matrices must reproduce the vector path exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import ModelPipeError


class DimensionMismatch(ModelPipeError):
    pass


@dataclass
class TransformSet:
    """Learned alignment maps: ``mats[p][m]`` is the per-mode matrix tuple
    for alignment pair p and source model m (length 1 = vector path)."""

    mats: list[list[tuple[np.ndarray, ...]]]

    def order(self, pair: int, source: int) -> int:
        return len(self.mats[pair][source])

    def copy(self) -> "TransformSet":
        return TransformSet(
            [[tuple(m.copy() for m in ms) for ms in pair] for pair in self.mats]
        )


def _as_batch(values, sample_ndim: int, what: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == sample_ndim:
        return arr[None], True
    if arr.ndim != sample_ndim + 1:
        raise DimensionMismatch(
            f"{what}: expected {sample_ndim} or {sample_ndim + 1} axes, got shape {arr.shape}"
        )
    return arr, False


def _check_weights(n_sources: int, n_transforms: int, alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if not (n_sources == n_transforms == alpha.size):
        raise DimensionMismatch(
            f"{n_sources} source representations, {n_transforms} transforms, "
            f"{alpha.size} weights"
        )
    if (alpha < 0).any():
        raise ValueError("source weights must be non-negative")
    return alpha


def mode_product(z: np.ndarray, mats) -> np.ndarray:
    """Multiply each mode of a batched tensor by a matrix.

    ``z`` has shape (batch, d_1, ..., d_Q); ``mats[q]`` has shape
    (e_q, d_q). Orders 1 and 2 are supported.
    """
    mats = tuple(np.asarray(m, dtype=np.float64) for m in mats)
    if len(mats) == 1:
        return z @ mats[0].T
    if len(mats) == 2:
        return np.einsum("ia,nab,jb->nij", mats[0], z, mats[1], optimize=True)
    raise DimensionMismatch(f"tensor order {len(mats)} not supported (use 1 or 2)")


def _check_map(v: np.ndarray, target_dim: int, source_dim: int, m: int, mode: str):
    if v.ndim != 2 or v.shape != (source_dim, target_dim):
        raise DimensionMismatch(
            f"source {m}: {mode} map of shape {v.shape} cannot take "
            f"dimension {target_dim} to {source_dim}"
        )


def reuse_penalty_vec(z_target, z_sources, transforms, alpha) -> float:
    """Weighted squared reconstruction error of vector representations."""
    value, _, _ = _penalty_vec(z_target, z_sources, transforms, alpha, grads=False)
    return value


def reuse_penalty_vec_grads(z_target, z_sources, transforms, alpha):
    """Penalty plus gradients: (value, d/dz_target, [d/dV_m])."""
    return _penalty_vec(z_target, z_sources, transforms, alpha, grads=True)


def _penalty_vec(z_target, z_sources, transforms, alpha, grads: bool):
    zt, single = _as_batch(z_target, 1, "target representation")
    alpha = _check_weights(len(z_sources), len(transforms), alpha)
    total = 0.0
    dz = np.zeros_like(zt) if grads else None
    dvs = []
    for m, (zs_in, v_in, a) in enumerate(zip(z_sources, transforms, alpha)):
        zs, _ = _as_batch(zs_in, 1, f"source {m} representation")
        v = np.asarray(v_in, dtype=np.float64)
        _check_map(v, zt.shape[1], zs.shape[1], m, "vector")
        if zs.shape[0] != zt.shape[0]:
            raise DimensionMismatch(
                f"source {m}: batch {zs.shape[0]} != target batch {zt.shape[0]}"
            )
        resid = zs - zt @ v.T
        total += a * float(np.sum(resid * resid))
        if grads:
            dz -= (2.0 * a) * (resid @ v)
            dvs.append((-2.0 * a) * (resid.T @ zt))
    if not grads:
        return float(total), None, None
    return float(total), dz[0] if single else dz, dvs


def reuse_penalty_tensor(z_target, z_sources, transforms, alpha) -> float:
    """Weighted squared reconstruction error with per-mode maps."""
    value, _, _ = _penalty_tensor(z_target, z_sources, transforms, alpha, grads=False)
    return value


def reuse_penalty_tensor_grads(z_target, z_sources, transforms, alpha):
    """Penalty plus gradients: (value, d/dz_target, [per-mode map grads])."""
    return _penalty_tensor(z_target, z_sources, transforms, alpha, grads=True)


def _penalty_tensor(z_target, z_sources, transforms, alpha, grads: bool):
    alpha = _check_weights(len(z_sources), len(transforms), alpha)
    if not transforms:
        raise DimensionMismatch("need at least one source model")
    order = len(transforms[0])
    if order not in (1, 2):
        raise DimensionMismatch(f"tensor order {order} not supported (use 1 or 2)")
    zt, single = _as_batch(z_target, order, "target representation")
    total = 0.0
    dz = np.zeros_like(zt) if grads else None
    dvs = []
    for m, (zs_in, mats_in, a) in enumerate(zip(z_sources, transforms, alpha)):
        mats = tuple(np.asarray(v, dtype=np.float64) for v in mats_in)
        if len(mats) != order:
            raise DimensionMismatch(
                f"source {m}: {len(mats)} mode maps, expected {order}"
            )
        zs, _ = _as_batch(zs_in, order, f"source {m} representation")
        for q, v in enumerate(mats):
            _check_map(v, zt.shape[1 + q], zs.shape[1 + q], m, f"mode-{q + 1}")
        if zs.shape[0] != zt.shape[0]:
            raise DimensionMismatch(
                f"source {m}: batch {zs.shape[0]} != target batch {zt.shape[0]}"
            )
        resid = zs - mode_product(zt, mats)
        total += a * float(np.sum(resid * resid))
        if not grads:
            continue
        if order == 1:
            (v1,) = mats
            dz -= (2.0 * a) * (resid @ v1)
            dvs.append(((-2.0 * a) * (resid.T @ zt),))
        else:
            v1, v2 = mats
            dz -= (2.0 * a) * np.einsum("ia,nij,jb->nab", v1, resid, v2, optimize=True)
            dv1 = (-2.0 * a) * np.einsum("nij,nab,jb->ia", resid, zt, v2, optimize=True)
            dv2 = (-2.0 * a) * np.einsum("nij,nab,ia->jb", resid, zt, v1, optimize=True)
            dvs.append((dv1, dv2))
    if not grads:
        return float(total), None, None
    return float(total), dz[0] if single else dz, dvs
