"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np

from modelpipe import ModelArtifact, WeightTensor


def random_model(
    rng: np.random.Generator,
    model_id: str = "m",
    version: int = 0,
    parent: int | None = None,
    layer_count: int = 3,
    max_dim: int = 6,
    scale: float = 1.0,
) -> ModelArtifact:
    layers = []
    for i in range(layer_count):
        rank = int(rng.integers(1, 4))
        shape = tuple(int(d) for d in rng.integers(1, max_dim + 1, rank))
        data = rng.normal(0.0, scale, int(np.prod(shape))).astype(np.float32)
        layers.append(WeightTensor(f"layer{i}", shape, data))
    return ModelArtifact(model_id, version, parent, layers)


def perturbed_model(
    base: ModelArtifact,
    rng: np.random.Generator,
    rel: float = 0.05,
    version: int | None = None,
    parent: int | None = None,
) -> ModelArtifact:
    """Same architecture as ``base`` with per-weight |delta| <= rel * |weight|."""
    if version is None:
        version = base.version + 1
    layers = []
    for t in base.layers:
        w = t.data.astype(np.float64)
        delta = rel * np.abs(w) * rng.uniform(-1.0, 1.0, w.shape)
        layers.append(WeightTensor(t.name, t.shape, (w + delta).astype(np.float32)))
    return ModelArtifact(base.model_id, version, parent, layers)
