"""Grow a version chain in a registry store and rebuild it from packets.

A store keeps reconstructed artifacts, never pristine training output:
registering an update quantizes the new version against the latest one
already present and stores what a receiver would decode.  Every node that
later applies the same packets therefore lands on byte-identical weights.
This script registers four versions, prints the stored chain, then replays
the packets onto the oldest version and checks the result matches.
"""

import tempfile

import numpy as np

from modelpipe import (
    ModelArtifact,
    ModelVersionId,
    QuantizationParams,
    RegistryStore,
    WeightTensor,
    reconstruct_chain,
    register_update,
    serialize_model,
)

PARAMS = QuantizationParams(12, 7, 0.3)


def drifted(model, rng, rel=0.05):
    layers = []
    for t in model.layers:
        w = t.data.astype(np.float64)
        layers.append(WeightTensor(t.name, t.shape,
                                   (w + rel * np.abs(w) * rng.uniform(-1, 1, w.shape))
                                   .astype(np.float32)))
    return ModelArtifact(model.model_id, model.version + 1, model.version, layers)


def main():
    rng = np.random.default_rng(23)
    fresh = ModelArtifact("chain", 0, None,
                          (WeightTensor("w", (50_000,),
                                        rng.normal(0, 0.5, 50_000).astype(np.float32)),))
    with tempfile.TemporaryDirectory() as root:
        store = RegistryStore(root)
        recon, packet = register_update(store, fresh, PARAMS)
        print(f"v0 registered whole  stored={len(serialize_model(recon))} bytes, "
              f"packet payload={packet.payload_bytes} bytes")
        packets = []
        for _ in range(3):
            latest = store.get_model(ModelVersionId("chain", store.versions("chain").latest))
            recon, packet = register_update(store, drifted(latest, rng), PARAMS)
            packets.append(packet)
            print(f"v{recon.version} registered delta  base=v{packet.base.version} "
                  f"payload={packet.payload_bytes} bytes")

        print(f"\nstore now holds versions {store.versions('chain').versions}")
        rebuilt = reconstruct_chain(store, ModelVersionId("chain", 0), packets)
        final = store.get_model(ModelVersionId("chain", 3))
        print(f"replaying 3 packets onto v0 -> v{rebuilt.version}, "
              f"bytes_equal={serialize_model(rebuilt) == serialize_model(final)}")


if __name__ == "__main__":
    main()
