"""Synthetic classification domains related by planar rotations.

Every domain is a Gaussian mixture whose class means sit on a circle in
the first two feature dimensions; the remaining dimensions carry only
noise. Source domains rotate and translate that circle, which shifts the
input distribution while keeping the tasks related, so representations
learned on a source stay informative about the target. Source models are
trained to convergence on abundant data from their own domain; the
target domain gets few labels plus unlabeled samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import MLP, accuracy
from .training import DomainDataset, ReuseConfig, SourceModelSet, train_target


@dataclass(frozen=True)
class SynthSpec:
    """Geometry and size of one benchmark family; seeds pick the draw."""

    class_count: int = 4
    feature_dim: int = 12
    circle_radius: float = 2.0
    cluster_std: float = 0.9
    source_rotations: tuple[float, ...] = (35.0, -50.0, 70.0)
    source_shifts: tuple[tuple[float, float], ...] = ((0.5, -0.3), (-0.4, 0.2), (0.3, 0.5))
    source_samples: int = 1500
    source_holdout: int = 1000
    source_hidden: tuple[int, ...] = (16, 8)
    source_epochs: int = 40
    source_step: float = 0.10
    source_batch: int = 64
    target_samples: int = 400
    labeled_fraction: float = 0.10
    target_holdout: int = 2000
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "source_rotations", tuple(float(r) for r in self.source_rotations))
        object.__setattr__(
            self, "source_shifts", tuple((float(a), float(b)) for a, b in self.source_shifts)
        )
        object.__setattr__(self, "source_hidden", tuple(int(w) for w in self.source_hidden))
        if len(self.source_shifts) != len(self.source_rotations):
            raise ValueError("need one shift per rotation")
        if self.class_count < 2 or self.feature_dim < 2:
            raise ValueError("need class_count >= 2 and feature_dim >= 2")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must be in (0, 1]")

    @property
    def num_sources(self) -> int:
        return len(self.source_rotations)


@dataclass(frozen=True)
class SyntheticBenchmark:
    """Trained sources plus per-domain datasets for one seed."""

    spec: SynthSpec
    sources: SourceModelSet
    source_data: tuple[DomainDataset, ...]
    target_data: DomainDataset
    source_accuracy: tuple[float, ...]


def domain_means(spec: SynthSpec, rotation_deg: float, shift: tuple[float, float]) -> np.ndarray:
    """Class means: a circle in dims (0, 1), rotated then translated;
    all other dimensions are centered noise."""
    k = np.arange(spec.class_count)
    angle = 2.0 * np.pi * k / spec.class_count + np.deg2rad(rotation_deg)
    means = np.zeros((spec.class_count, spec.feature_dim))
    means[:, 0] = spec.circle_radius * np.cos(angle) + shift[0]
    means[:, 1] = spec.circle_radius * np.sin(angle) + shift[1]
    return means


def sample_domain(
    means: np.ndarray, spec: SynthSpec, count: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    labels = rng.integers(0, spec.class_count, size=count)
    x = means[labels] + rng.normal(0.0, spec.cluster_std, size=(count, spec.feature_dim))
    return x, labels


def _source_config(spec: SynthSpec, seed: int) -> ReuseConfig:
    return ReuseConfig(
        hidden_widths=spec.source_hidden,
        activation=spec.activation,
        gamma=0.0,
        step_size=spec.source_step,
        batch_size=spec.source_batch,
        epochs=spec.source_epochs,
        seed=seed,
    )


def make_synthetic_domains(spec: SynthSpec, seed: int) -> SyntheticBenchmark:
    """Generate all domains and train the source models. Deterministic:
    one sampling stream per (spec, seed), sources drawn and trained in
    order, then the target domain."""
    rng = np.random.default_rng((int(seed), 2))
    models: list[MLP] = []
    source_data: list[DomainDataset] = []
    source_acc: list[float] = []
    empty = np.zeros((0, spec.feature_dim))
    for rotation, shift in zip(spec.source_rotations, spec.source_shifts):
        means = domain_means(spec, rotation, shift)
        x, y = sample_domain(means, spec, spec.source_samples, rng)
        hx, hy = sample_domain(means, spec, spec.source_holdout, rng)
        data = DomainDataset(x, y, empty, hx, hy, spec.class_count)
        train_seed = int(rng.integers(1 << 31))
        result = train_target(None, data, _source_config(spec, train_seed))
        models.append(result.network)
        source_data.append(data)
        source_acc.append(accuracy(result.network, hx, hy))

    target_means = domain_means(spec, 0.0, (0.0, 0.0))
    n_labeled = max(1, round(spec.target_samples * spec.labeled_fraction))
    lx, ly = sample_domain(target_means, spec, n_labeled, rng)
    ux, _ = sample_domain(target_means, spec, spec.target_samples - n_labeled, rng)
    hx, hy = sample_domain(target_means, spec, spec.target_holdout, rng)
    target = DomainDataset(lx, ly, ux, hx, hy, spec.class_count)

    penult = len(spec.source_hidden)
    sources = SourceModelSet(tuple(models), (penult,) * spec.num_sources)
    return SyntheticBenchmark(spec, sources, tuple(source_data), target,
                              tuple(source_acc))


BENCHMARK_SPEC = SynthSpec()


def benchmark_config(
    gamma: float = 5.0,
    seed: int = 0,
    *,
    spec: SynthSpec = BENCHMARK_SPEC,
    alpha: tuple[float, ...] | None = None,
    epochs: int = 200,
    step_size: float = 2e-3,
    batch_size: int = 16,
) -> ReuseConfig:
    """Target-side training configuration used by the bundled benchmark."""
    return ReuseConfig(
        hidden_widths=spec.source_hidden,
        activation=spec.activation,
        gamma=gamma,
        alpha=alpha,
        step_size=step_size,
        batch_size=batch_size,
        epochs=epochs,
        seed=seed,
    )
