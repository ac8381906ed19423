"""Small dense networks with taped forward passes for hand-derived gradients.

Hidden layers share one elementwise activation; the output layer is
affine. A forward pass records pre-activations and hidden representations
so the training module can backpropagate and so alignment penalties can
reach into any hidden layer. Everything is float64; narrowing to float32
happens only at the container boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import ModelArtifact, ModelPipeError, WeightTensor


class NetworkError(ModelPipeError):
    pass


def _tanh_slope(pre, act):
    return 1.0 - act * act


def _relu_slope(pre, act):
    return (pre > 0.0).astype(pre.dtype)


def _identity_slope(pre, act):
    return np.ones_like(pre)


# name -> (function, slope as a function of (pre-activation, activation))
ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_slope),
    "relu": (lambda x: np.maximum(x, 0.0), _relu_slope),
    "identity": (lambda x: x, _identity_slope),
}


@dataclass(frozen=True)
class ForwardTape:
    """Everything a backward pass needs from one forward evaluation.

    ``hidden[i]`` is the representation after hidden layer i, i.e. the
    input to layer i+1; the network input itself is ``x``. ``output`` is
    the affine result of the last layer, before any loss.
    """

    x: np.ndarray
    preacts: tuple[np.ndarray, ...]
    hidden: tuple[np.ndarray, ...]
    output: np.ndarray

    def representation(self, layer: int) -> np.ndarray:
        """Hidden representation z^layer for layer in 1..depth-1."""
        if not 1 <= layer <= len(self.hidden):
            raise NetworkError(f"hidden layer {layer} not in 1..{len(self.hidden)}")
        return self.hidden[layer - 1]


class MLP:
    """Fully connected network: weights[i] has shape (fan_out, fan_in)."""

    def __init__(self, weights, biases, activation: str):
        if activation not in ACTIVATIONS:
            raise NetworkError(f"unknown activation {activation!r}")
        if not weights or len(weights) != len(biases):
            raise NetworkError("need one bias vector per weight matrix")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        self.activation = activation
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise NetworkError(f"layer {i}: weight {w.shape} does not pair with bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise NetworkError(
                    f"layer {i}: fan-in {w.shape[1]} != previous fan-out "
                    f"{self.weights[i - 1].shape[0]}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise NetworkError(f"layer {i}: non-finite parameters")

    @property
    def depth(self) -> int:
        return len(self.weights)

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def forward(self, x: np.ndarray) -> ForwardTape:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        act, _ = ACTIVATIONS[self.activation]
        preacts = []
        hidden = []
        z = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = z @ w.T + b
            preacts.append(pre)
            if i < self.depth - 1:
                z = act(pre)
                hidden.append(z)
        return ForwardTape(x, tuple(preacts), tuple(hidden), preacts[-1])

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x).output

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.activation)

    def parameter_bytes(self) -> bytes:
        """Concatenated raw parameter bytes; lets tests prove frozenness."""
        return b"".join([w.tobytes() for w in self.weights]
                        + [b.tobytes() for b in self.biases])


def init_mlp(widths, activation: str, rng: np.random.Generator) -> MLP:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases.

    Draws one weight matrix per layer in order, nothing else, so callers
    can reproduce the stream.
    """
    widths = tuple(int(d) for d in widths)
    if len(widths) < 2 or any(d < 1 for d in widths):
        raise NetworkError(f"need at least (input, output) positive widths, got {widths}")
    weights = []
    biases = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MLP(weights, biases, activation)


def accuracy(net: MLP, x: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax output matches the integer label."""
    pred = np.argmax(net.predict(x), axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def to_artifact(net: MLP, model_id: str, version: int,
                parent_version: int | None = None) -> ModelArtifact:
    """Snapshot parameters as a container artifact (float32).

    Layer i becomes tensors ``layer{i}/weight`` and ``layer{i}/bias``; the
    activation is structural configuration, not a weight, and is supplied
    again on load.
    """
    layers = []
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        layers.append(WeightTensor(f"layer{i}/weight", w.shape, w.astype(np.float32)))
        layers.append(WeightTensor(f"layer{i}/bias", b.shape, b.astype(np.float32)))
    return ModelArtifact(model_id, version, parent_version, tuple(layers))


def from_artifact(artifact: ModelArtifact, activation: str) -> MLP:
    if len(artifact.layers) % 2:
        raise NetworkError("expected weight/bias tensor pairs")
    weights = []
    biases = []
    for i in range(0, len(artifact.layers), 2):
        w, b = artifact.layers[i], artifact.layers[i + 1]
        if w.name != f"layer{i // 2}/weight" or b.name != f"layer{i // 2}/bias":
            raise NetworkError(f"unexpected tensor names {w.name!r}, {b.name!r}")
        weights.append(w.data.astype(np.float64).reshape(w.shape))
        biases.append(b.data.astype(np.float64).reshape(b.shape))
    return MLP(weights, biases, activation)
