"""Build a model artifact, serialize it, and watch the trailer catch damage.

The container is the unit everything else trades in: a named, versioned,
immutable set of float32 weight tensors with a checksum trailer.  This
walk-through packs a small two-layer model, round-trips it through bytes,
and then flips a single payload byte to show the integrity check firing.
"""

import numpy as np

from modelpipe import (
    ChecksumMismatch,
    ModelArtifact,
    WeightTensor,
    deserialize_model,
    serialize_model,
    weight_checksum,
)


def main():
    rng = np.random.default_rng(7)
    layers = (
        WeightTensor("dense0/weight", (8, 4), rng.normal(size=32).astype(np.float32)),
        WeightTensor("dense0/bias", (8,), rng.normal(size=8).astype(np.float32)),
    )
    model = ModelArtifact("demo", 0, None, layers)

    print(f"model {model.model_id} v{model.version}  "
          f"arch digest {model.architecture_digest:#018x}")
    for tensor in model.layers:
        print(f"  {tensor.name:16s} shape={tensor.shape} weights={tensor.weight_count}")

    blob = serialize_model(model)
    print(f"\nserialized: {len(blob)} bytes, checksum {weight_checksum(model):#018x}")

    back = deserialize_model(blob)
    same = all(np.array_equal(a.data, b.data) for a, b in zip(back.layers, model.layers))
    print(f"round trip: version={back.version} weights_equal={same}")

    damaged = bytearray(blob)
    damaged[len(blob) // 2] ^= 0x01
    try:
        deserialize_model(bytes(damaged))
    except ChecksumMismatch as err:
        print(f"one flipped byte -> {type(err).__name__}: {err}")


if __name__ == "__main__":
    main()
