"""Mini-batch gradient descent on a supervised-plus-alignment objective.

The objective is the supervised loss averaged over the labeled samples
plus gamma times the alignment penalty summed over every sample, labeled
or not, and over every aligned layer. Source models are frozen: they are
evaluated forward only and never receive gradients.

Determinism contract: all randomness derives from the config seed through
two fixed streams, one for parameter initialization (network first, then
transforms) and one for per-epoch shuffling. Two runs with equal seeds
and configs produce identical traces; a gamma=0 run follows the exact
same parameter trajectory as plain supervised training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import ModelPipeError
from .network import ACTIVATIONS, MLP, ForwardTape, accuracy, init_mlp
from .regularizer import (
    DimensionMismatch,
    TransformSet,
    reuse_penalty_tensor_grads,
    reuse_penalty_vec,
    reuse_penalty_vec_grads,
    reuse_penalty_tensor,
)

LOSSES = ("softmax", "squared")


class DivergenceDetected(ModelPipeError):
    """Training produced a non-finite objective value."""


@dataclass(frozen=True)
class AlignmentPair:
    """One aligned layer: target hidden layer index plus, per source model,
    the source hidden layer it should be reconstructable from.

    ``target_view``/``source_views`` reshape the width-d representations to
    matrices, switching that pair to per-mode maps (one map per axis)
    instead of one d-by-d map; the products of each view must equal the
    corresponding layer widths.
    """

    target_layer: int
    source_layers: tuple[int, ...]
    target_view: tuple[int, int] | None = None
    source_views: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "source_layers", tuple(int(v) for v in self.source_layers))
        if (self.target_view is None) != (self.source_views is None):
            raise ValueError("target_view and source_views must be set together")
        if self.target_view is not None:
            object.__setattr__(self, "target_view", tuple(int(v) for v in self.target_view))
            object.__setattr__(
                self, "source_views", tuple(tuple(int(v) for v in sv) for sv in self.source_views)
            )
            if len(self.source_views) != len(self.source_layers):
                raise ValueError("need one source view per source layer")

    @property
    def order(self) -> int:
        return 1 if self.target_view is None else 2


@dataclass(frozen=True)
class SourceModelSet:
    """Frozen models whose representations the target learns to explain."""

    models: tuple[MLP, ...]
    rep_layers: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "rep_layers", tuple(int(v) for v in self.rep_layers))
        if not self.models:
            raise ValueError("need at least one source model")
        if len(self.rep_layers) != len(self.models):
            raise ValueError("need one representation layer per source model")
        for m, (net, layer) in enumerate(zip(self.models, self.rep_layers)):
            if not 1 <= layer <= net.depth - 1:
                raise ValueError(f"source {m}: layer {layer} not in 1..{net.depth - 1}")

    def __len__(self) -> int:
        return len(self.models)


@dataclass(frozen=True)
class DomainDataset:
    """Samples from one domain: a few labeled, many unlabeled, plus a
    held-out split for honest evaluation.

    ``class_count`` > 0 marks classification (integer labels); 0 marks
    regression (2-D float targets).
    """

    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    holdout_x: np.ndarray
    holdout_y: np.ndarray
    class_count: int

    def __post_init__(self):
        for name in ("labeled_x", "unlabeled_x", "holdout_x"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2:
                raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)
        if self.labeled_x.shape[0] < 1:
            raise ValueError("need at least one labeled sample")
        widths = {self.labeled_x.shape[1], self.unlabeled_x.shape[1], self.holdout_x.shape[1]}
        if len(widths) != 1:
            raise ValueError(f"inconsistent feature dimensions {sorted(widths)}")
        if self.class_count > 0:
            for name in ("labeled_y", "holdout_y"):
                y = np.asarray(getattr(self, name), dtype=np.int64)
                if y.ndim != 1 or ((y < 0) | (y >= self.class_count)).any():
                    raise ValueError(f"{name} must be 1-D labels in 0..{self.class_count - 1}")
                object.__setattr__(self, name, y)
        else:
            for name in ("labeled_y", "holdout_y"):
                y = np.asarray(getattr(self, name), dtype=np.float64)
                if y.ndim != 2 or not np.isfinite(y).all():
                    raise ValueError(f"{name} must be 2-D finite targets")
                object.__setattr__(self, name, y)
        if self.labeled_y.shape[0] != self.labeled_x.shape[0]:
            raise ValueError("labeled_x and labeled_y row counts differ")
        if self.holdout_y.shape[0] != self.holdout_x.shape[0]:
            raise ValueError("holdout_x and holdout_y row counts differ")

    @property
    def feature_dim(self) -> int:
        return self.labeled_x.shape[1]

    @property
    def n_labeled(self) -> int:
        return self.labeled_x.shape[0]

    @property
    def n_unlabeled(self) -> int:
        return self.unlabeled_x.shape[0]


@dataclass(frozen=True)
class Batch:
    """Mini-batch rows; ``labeled`` masks the rows that carry usable y."""

    x: np.ndarray
    y: np.ndarray
    labeled: np.ndarray


@dataclass(frozen=True)
class ReuseConfig:
    """Everything a training run needs besides the data and the sources."""

    hidden_widths: tuple[int, ...]
    activation: str = "tanh"
    loss: str = "softmax"
    gamma: float = 5.0
    alpha: tuple[float, ...] | None = None
    alignment: tuple[AlignmentPair, ...] | None = None
    step_size: float = 0.05
    batch_size: int = 16
    epochs: int = 150
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError("hidden_widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if not (np.isfinite(self.gamma) and self.gamma >= 0):
            raise ValueError("gamma must be finite and non-negative")
        if self.alpha is not None:
            alpha = tuple(float(a) for a in self.alpha)
            if any(a < 0 for a in alpha) or abs(sum(alpha) - 1.0) > 1e-9:
                raise ValueError("alpha must be non-negative and sum to 1")
            object.__setattr__(self, "alpha", alpha)
        if self.alignment is not None:
            object.__setattr__(self, "alignment", tuple(self.alignment))
        if self.step_size <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("step_size must be > 0, batch_size >= 1, epochs >= 0")


@dataclass(frozen=True)
class ObjectiveParts:
    supervised: float
    penalty: float
    total: float


@dataclass(frozen=True)
class Grads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    transforms: list[list[tuple[np.ndarray, ...]]]


@dataclass(frozen=True)
class TraceRow:
    """Whole-dataset objective parts plus the held-out score after one
    epoch; the score is accuracy for classifiers, mean squared error for
    squared loss."""

    epoch: int
    supervised: float
    penalty: float
    total: float
    holdout: float


@dataclass(frozen=True)
class TrainResult:
    network: MLP
    transforms: TransformSet
    trace: tuple[TraceRow, ...]


def uniform_alpha(count: int) -> tuple[float, ...]:
    return (1.0 / count,) * count


def resolve_alpha(config: ReuseConfig, n_sources: int) -> tuple[float, ...]:
    if config.alpha is None:
        return uniform_alpha(n_sources)
    if len(config.alpha) != n_sources:
        raise ValueError(f"{len(config.alpha)} weights for {n_sources} sources")
    return config.alpha


def resolve_alignment(
    config: ReuseConfig, net: MLP, sources: SourceModelSet
) -> tuple[AlignmentPair, ...]:
    """Default: one pair tying the penultimate layers together."""
    if config.alignment is None:
        pairs = (AlignmentPair(net.depth - 1, sources.rep_layers),)
    else:
        pairs = config.alignment
    for pair in pairs:
        if not 1 <= pair.target_layer <= net.depth - 1:
            raise ValueError(f"target layer {pair.target_layer} not in 1..{net.depth - 1}")
        if len(pair.source_layers) != len(sources):
            raise ValueError("need one source layer per source model")
        for m, layer in enumerate(pair.source_layers):
            if not 1 <= layer <= sources.models[m].depth - 1:
                raise ValueError(f"source {m}: layer {layer} out of range")
        d_t = net.widths[pair.target_layer]
        if pair.target_view is not None and int(np.prod(pair.target_view)) != d_t:
            raise ValueError(f"target view {pair.target_view} does not tile width {d_t}")
        if pair.source_views is not None:
            for m, view in enumerate(pair.source_views):
                d_s = sources.models[m].widths[pair.source_layers[m]]
                if int(np.prod(view)) != d_s:
                    raise ValueError(f"source {m} view {view} does not tile width {d_s}")
    return pairs


def init_transforms(
    net: MLP,
    sources: SourceModelSet,
    pairs: tuple[AlignmentPair, ...],
    rng: np.random.Generator,
) -> TransformSet:
    """Uniform(-1/sqrt(target width), ...) per matrix, drawn pair-major,
    source-minor, modes innermost."""
    mats: list[list[tuple[np.ndarray, ...]]] = []
    for pair in pairs:
        row = []
        d_t = net.widths[pair.target_layer]
        for m in range(len(sources)):
            d_s = sources.models[m].widths[pair.source_layers[m]]
            if pair.order == 1:
                bound = 1.0 / np.sqrt(d_t)
                row.append((rng.uniform(-bound, bound, size=(d_s, d_t)),))
            else:
                t_view = pair.target_view
                s_view = pair.source_views[m]
                row.append(tuple(
                    rng.uniform(-1.0 / np.sqrt(dt), 1.0 / np.sqrt(dt), size=(ds, dt))
                    for ds, dt in zip(s_view, t_view)
                ))
        mats.append(row)
    return TransformSet(mats)


def _supervised(output: np.ndarray, batch: Batch, loss: str) -> tuple[float, np.ndarray]:
    """Loss averaged over the labeled rows, and its gradient w.r.t. the
    network output (zero on unlabeled rows)."""
    dout = np.zeros_like(output)
    lab = np.asarray(batch.labeled, dtype=bool)
    n_lab = int(lab.sum())
    if n_lab == 0:
        return 0.0, dout
    if loss == "softmax":
        logits = output[lab]
        y = np.asarray(batch.y, dtype=np.int64)[lab]
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        value = float(-log_p[np.arange(n_lab), y].mean())
        grad = np.exp(log_p)
        grad[np.arange(n_lab), y] -= 1.0
        dout[lab] = grad / n_lab
        return value, dout
    diff = output[lab] - np.asarray(batch.y, dtype=np.float64)[lab]
    value = float((diff * diff).sum() / n_lab)
    dout[lab] = (2.0 / n_lab) * diff
    return value, dout


def _aligned_reps(
    tape: ForwardTape,
    source_tapes: list[ForwardTape],
    pair: AlignmentPair,
) -> tuple[np.ndarray, list[np.ndarray]]:
    n = tape.x.shape[0]
    z_t = tape.representation(pair.target_layer)
    z_s = [st.representation(layer) for st, layer in zip(source_tapes, pair.source_layers)]
    if pair.order == 2:
        z_t = z_t.reshape((n,) + pair.target_view)
        z_s = [z.reshape((n,) + view) for z, view in zip(z_s, pair.source_views)]
    return z_t, z_s


def total_objective(
    net: MLP,
    transforms: TransformSet,
    sources: SourceModelSet | None,
    batch: Batch,
    config: ReuseConfig,
) -> ObjectiveParts:
    """Exact objective on the given rows: supervised mean plus gamma times
    the penalty summed over every row and aligned pair."""
    tape = net.forward(batch.x)
    supervised, _ = _supervised(tape.output, batch, config.loss)
    penalty = 0.0
    if sources is not None:
        pairs = resolve_alignment(config, net, sources)
        alpha = resolve_alpha(config, len(sources))
        source_tapes = [m.forward(batch.x) for m in sources.models]
        for p, pair in enumerate(pairs):
            z_t, z_s = _aligned_reps(tape, source_tapes, pair)
            if pair.order == 1:
                flat = [t[0] for t in transforms.mats[p]]
                penalty += reuse_penalty_vec(z_t, z_s, flat, alpha)
            else:
                penalty += reuse_penalty_tensor(z_t, z_s, transforms.mats[p], alpha)
    return ObjectiveParts(supervised, penalty, supervised + config.gamma * penalty)


def gradients(
    net: MLP,
    transforms: TransformSet,
    sources: SourceModelSet | None,
    batch: Batch,
    config: ReuseConfig,
) -> tuple[Grads, ObjectiveParts]:
    """Analytic gradients of the batch objective for the network and every
    transform; sources are evaluated forward only.

    With gamma == 0 the penalty terms contribute nothing to any update, so
    their evaluation is skipped and the reported penalty is 0; use
    total_objective for an unconditional evaluation.
    """
    tape = net.forward(batch.x)
    supervised, dout = _supervised(tape.output, batch, config.loss)
    d_mats = [[tuple(np.zeros_like(v) for v in ms) for ms in row] for row in transforms.mats]
    taps: dict[int, np.ndarray] = {}
    penalty = 0.0
    if sources is not None and config.gamma != 0.0:
        pairs = resolve_alignment(config, net, sources)
        alpha = resolve_alpha(config, len(sources))
        source_tapes = [m.forward(batch.x) for m in sources.models]
        n = batch.x.shape[0]
        for p, pair in enumerate(pairs):
            z_t, z_s = _aligned_reps(tape, source_tapes, pair)
            if pair.order == 1:
                flat = [t[0] for t in transforms.mats[p]]
                pen, dz, dvs = reuse_penalty_vec_grads(z_t, z_s, flat, alpha)
                dvs = [(g,) for g in dvs]
            else:
                pen, dz, dvs = reuse_penalty_tensor_grads(z_t, z_s, transforms.mats[p], alpha)
            penalty += pen
            h = pair.target_layer
            tap = config.gamma * dz.reshape(n, -1)
            taps[h] = taps[h] + tap if h in taps else tap
            d_mats[p] = [tuple(config.gamma * g for g in gs) for gs in dvs]

    d_weights: list[np.ndarray] = [np.empty(0)] * net.depth
    d_biases: list[np.ndarray] = [np.empty(0)] * net.depth
    _, slope = ACTIVATIONS[net.activation]
    delta = dout
    for i in reversed(range(net.depth)):
        inputs = tape.hidden[i - 1] if i > 0 else tape.x
        d_weights[i] = delta.T @ inputs
        d_biases[i] = delta.sum(axis=0)
        if i == 0:
            break
        dz = delta @ net.weights[i]
        if i in taps:
            dz = dz + taps[i]
        delta = dz * slope(tape.preacts[i - 1], tape.hidden[i - 1])
    parts = ObjectiveParts(supervised, penalty, supervised + config.gamma * penalty)
    return Grads(d_weights, d_biases, d_mats), parts


def _holdout_score(net: MLP, dataset: DomainDataset) -> float:
    if dataset.class_count > 0:
        return accuracy(net, dataset.holdout_x, dataset.holdout_y)
    diff = net.predict(dataset.holdout_x) - dataset.holdout_y
    return float((diff * diff).sum(axis=1).mean())


def train_target(
    sources: SourceModelSet | None,
    dataset: DomainDataset,
    config: ReuseConfig,
) -> TrainResult:
    """Gradient-descent training of a fresh target network.

    ``sources=None`` is the plain supervised baseline and requires
    gamma == 0. Random draws happen in a fixed order: network init, then
    transform init, from one stream; per-epoch permutations from a second
    stream, so baseline and reuse runs with equal seeds share their
    initialization and visit identical batches.
    """
    if sources is None and config.gamma != 0.0:
        raise ValueError("gamma > 0 requires source models")
    if config.loss == "softmax":
        if dataset.class_count < 2:
            raise ValueError("softmax loss needs class_count >= 2")
        out_dim = dataset.class_count
        y_pad = np.zeros(dataset.n_unlabeled, dtype=np.int64)
    else:
        if dataset.class_count != 0:
            raise ValueError("squared loss expects a regression dataset (class_count 0)")
        out_dim = dataset.labeled_y.shape[1]
        y_pad = np.zeros((dataset.n_unlabeled, out_dim))

    params_rng = np.random.default_rng((config.seed, 0))
    shuffle_rng = np.random.default_rng((config.seed, 1))
    net = init_mlp(
        (dataset.feature_dim, *config.hidden_widths, out_dim), config.activation, params_rng
    )
    if sources is not None:
        pairs = resolve_alignment(config, net, sources)
        resolve_alpha(config, len(sources))
        transforms = init_transforms(net, sources, pairs, params_rng)
    else:
        transforms = TransformSet([])

    x_all = np.vstack([dataset.labeled_x, dataset.unlabeled_x])
    y_all = np.concatenate([dataset.labeled_y, y_pad])
    labeled = np.zeros(x_all.shape[0], dtype=bool)
    labeled[: dataset.n_labeled] = True
    everything = Batch(x_all, y_all, labeled)

    lr = config.step_size
    trace = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(x_all.shape[0])
        for start in range(0, order.size, config.batch_size):
            idx = order[start : start + config.batch_size]
            grads, parts = gradients(
                net, transforms, sources, Batch(x_all[idx], y_all[idx], labeled[idx]), config
            )
            if not np.isfinite(parts.total):
                raise DivergenceDetected(f"epoch {epoch}: objective {parts.total}")
            for i in range(net.depth):
                net.weights[i] -= lr * grads.weights[i]
                net.biases[i] -= lr * grads.biases[i]
            if sources is not None and config.gamma != 0.0:
                for p, row in enumerate(transforms.mats):
                    for m, ms in enumerate(row):
                        row[m] = tuple(v - lr * g for v, g in zip(ms, grads.transforms[p][m]))
        parts = total_objective(net, transforms, sources, everything, config)
        if not np.isfinite(parts.total):
            raise DivergenceDetected(f"epoch {epoch}: objective {parts.total}")
        trace.append(TraceRow(epoch, parts.supervised, parts.penalty, parts.total,
                              _holdout_score(net, dataset)))
    return TrainResult(net, transforms, tuple(trace))


def trace_to_csv(trace) -> str:
    """Rows: epoch, supervised, penalty, total, holdout."""
    lines = ["epoch,supervised,penalty,total,holdout"]
    for row in trace:
        lines.append(
            f"{row.epoch},{row.supervised:.10g},{row.penalty:.10g},"
            f"{row.total:.10g},{row.holdout:.10g}"
        )
    return "\n".join(lines) + "\n"
