"""Empirical check of the risk inequality for linear reuse instances.

For linear networks under squared loss with features bounded by a radius
r, the trained target's expected risk should not exceed

    2 M sum_m alpha_m^2 R_m (r^2 / gamma + 1)

where R_m is the risk, on target data, of the transformed source
predictor: the source's representation pulled back into target
representation space through the pseudoinverse of the learned alignment
map, then pushed through the target's own output head. Risks on both
sides are Monte Carlo estimates on a large held-out sample, so the check
carries a small estimation slack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import ModelPipeError
from .network import MLP
from .training import (
    DomainDataset,
    ReuseConfig,
    SourceModelSet,
    TransformSet,
    resolve_alpha,
    train_target,
)


class HypothesisViolated(ModelPipeError):
    """Instance breaks the linear-model, squared-loss, gamma > 0 premises."""


@dataclass(frozen=True)
class BoundInstance:
    """One hypothesis-satisfying least-squares problem, data included."""

    sources: SourceModelSet
    data: DomainDataset
    config: ReuseConfig
    radius: float
    noise_sigma: float
    eval_x: np.ndarray
    eval_y: np.ndarray
    seed: int


@dataclass(frozen=True)
class BoundReport:
    lhs: float
    rhs: float
    holds: bool
    source_risks: tuple[float, ...]
    alpha: tuple[float, ...]
    radius: float
    gamma: float
    slack: float
    seed: int


def _ball_project(x: np.ndarray, radius: float) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x * np.minimum(1.0, radius / np.maximum(norms, 1e-300))


def make_bound_instance(
    num_sources: int = 2,
    gamma: float = 5.0,
    seed: int = 0,
    *,
    feature_dim: int = 6,
    rep_dim: int = 5,
    source_rep_dims: tuple[int, ...] | None = None,
    noise_sigma: float | None = None,
    relatedness: float = 0.1,
    labeled: int = 32,
    unlabeled: int = 1000,
    radius: float = 3.0,
    eval_samples: int = 10_000,
    epochs: int = 120,
    step_size: float = 5e-4,
    batch_size: int = 16,
) -> BoundInstance:
    """Random linear instance whose sources share the target's structure.

    All features are projected onto the ball of the given radius, so the
    boundedness premise holds exactly. Every source representation map is
    a full-rank mixing of a shared map plus a perturbation scaled by
    ``relatedness``; labels carry Gaussian noise (sigma drawn from
    [0.2, 0.6] unless given), which keeps every risk bounded away from
    zero and the check honest rather than a 0 <= 0 triviality.
    """
    if source_rep_dims is None:
        source_rep_dims = tuple(rep_dim + m for m in range(num_sources))
    if len(source_rep_dims) != num_sources:
        raise ValueError("need one representation width per source")
    if min(source_rep_dims) < rep_dim:
        raise ValueError("source representations must be at least rep_dim wide")

    rng = np.random.default_rng((int(seed), 3))
    sigma = float(rng.uniform(0.2, 0.6)) if noise_sigma is None else float(noise_sigma)
    shared = rng.normal(0.0, 1.0, size=(rep_dim, feature_dim)) / np.sqrt(feature_dim)
    head = rng.normal(0.0, 1.0, size=(1, rep_dim))
    w_true = head @ shared

    def draw_x(count: int) -> np.ndarray:
        return _ball_project(rng.normal(0.0, 1.0, size=(count, feature_dim)), radius)

    def draw_xy(count: int) -> tuple[np.ndarray, np.ndarray]:
        x = draw_x(count)
        y = x @ w_true.T + sigma * rng.normal(0.0, 1.0, size=(count, 1))
        return x, y

    models = []
    for width in source_rep_dims:
        mixing = rng.normal(0.0, 1.0, size=(width, rep_dim)) / np.sqrt(rep_dim)
        wobble = relatedness * rng.normal(0.0, 1.0, size=(rep_dim, feature_dim)) / np.sqrt(feature_dim)
        rep_map = mixing @ (shared + wobble)
        own_head = head + relatedness * rng.normal(0.0, 1.0, size=(1, rep_dim))
        own_w = own_head @ (shared + wobble)
        readout = own_w @ np.linalg.pinv(rep_map)
        models.append(MLP([rep_map, readout], [np.zeros(width), np.zeros(1)], "identity"))
    sources = SourceModelSet(tuple(models), (1,) * num_sources)

    lx, ly = draw_xy(labeled)
    ux = draw_x(unlabeled)
    hx, hy = draw_xy(1000)
    eval_x, eval_y = draw_xy(eval_samples)
    data = DomainDataset(lx, ly, ux, hx, hy, 0)
    config = ReuseConfig(
        hidden_widths=(rep_dim,),
        activation="identity",
        loss="squared",
        gamma=gamma,
        step_size=step_size,
        batch_size=batch_size,
        epochs=epochs,
        seed=seed,
    )
    return BoundInstance(sources, data, config, radius, sigma, eval_x, eval_y, seed)


def squared_risk(predictions: np.ndarray, targets: np.ndarray) -> float:
    diff = np.asarray(predictions) - np.asarray(targets)
    return float((diff * diff).sum(axis=1).mean())


def transformed_source_predictor(
    net: MLP, transforms: TransformSet, sources: SourceModelSet, m: int, pair: int = 0
):
    """Predictor built from published parts only: source representation,
    pseudoinverse of the learned map, target head. Requires linear nets."""
    if net.activation != "identity" or sources.models[m].activation != "identity":
        raise HypothesisViolated("transformed-source predictors require identity activations")
    pullback = np.linalg.pinv(transforms.mats[pair][m][0])
    source = sources.models[m]
    rep_layer = sources.rep_layers[m]
    aligned = net.depth - 1  # default alignment: penultimate layer

    def predict(x: np.ndarray) -> np.ndarray:
        z = source.forward(x).representation(rep_layer) @ pullback.T
        for i in range(aligned, net.depth):
            z = z @ net.weights[i].T + net.biases[i]
        return z

    return predict


def check_risk_bound(instance: BoundInstance, slack: float = 0.05) -> BoundReport:
    """Train the target, estimate both sides on the evaluation sample, and
    compare at the learned transforms."""
    config = instance.config
    if config.activation != "identity" or any(
        s.activation != "identity" for s in instance.sources.models
    ):
        raise HypothesisViolated("linear instances require identity activations")
    if config.loss != "squared":
        raise HypothesisViolated("the inequality is stated for squared loss")
    if config.gamma <= 0:
        raise HypothesisViolated("gamma must be positive (the bound divides by it)")
    max_norm = float(np.linalg.norm(instance.eval_x, axis=1).max())
    if max_norm > instance.radius * (1 + 1e-12):
        raise HypothesisViolated(f"feature norm {max_norm} exceeds radius {instance.radius}")

    result = train_target(instance.sources, instance.data, config)
    lhs = squared_risk(result.network.predict(instance.eval_x), instance.eval_y)
    alpha = resolve_alpha(config, len(instance.sources))
    risks = []
    for m in range(len(instance.sources)):
        predict = transformed_source_predictor(
            result.network, result.transforms, instance.sources, m
        )
        risks.append(squared_risk(predict(instance.eval_x), instance.eval_y))
    m_count = len(instance.sources)
    factor = instance.radius**2 / config.gamma + 1.0
    rhs = 2.0 * m_count * sum(a * a * r for a, r in zip(alpha, risks)) * factor
    return BoundReport(
        lhs=lhs,
        rhs=rhs,
        holds=lhs <= rhs * (1.0 + slack),
        source_risks=tuple(risks),
        alpha=tuple(alpha),
        radius=instance.radius,
        gamma=config.gamma,
        slack=slack,
        seed=instance.seed,
    )
