"""Push model updates to a receiver over a local socket.

The sender opens with the versions it holds, the receiver answers with
what it already has, and the two agree on the newest shared version as the
subtraction base — an empty receiver gets the whole model against the
no-base sentinel instead.  The receiver registers an update only after the
checksum over the reconstructed weights verifies, so a second push of the
same version is refused before any bytes of payload move.
"""

import logging
import tempfile
import threading

import numpy as np

from modelpipe import (
    DuplicateVersion,
    ModelArtifact,
    ModelVersionId,
    ModelReceiver,
    QuantizationParams,
    RegistryStore,
    WeightTensor,
    push_model,
    register_update,
    serialize_model,
)

PARAMS = QuantizationParams(12, 7, 0.3)


def summary_line(tag, summary):
    base = ("whole model" if summary.prediction_version == -1
            else f"delta vs v{summary.prediction_version}")
    print(f"{tag}: v{summary.target_version} as {base}, "
          f"{summary.bytes_sent} bytes sent, reused_packet={summary.reused_packet}")


def main():
    # the refused push hangs up mid-session by design; keep the receiver's
    # warning about it out of the demo output
    logging.getLogger("modelpipe.transport").setLevel(logging.ERROR)
    rng = np.random.default_rng(31)
    w = rng.normal(0, 0.5, 100_000).astype(np.float32)
    v0 = ModelArtifact("cam", 0, None, (WeightTensor("w", (100_000,), w),))

    with tempfile.TemporaryDirectory() as s_root, tempfile.TemporaryDirectory() as r_root:
        sender = RegistryStore(s_root)
        recon, _ = register_update(sender, v0, PARAMS)
        drift = (0.05 * np.abs(recon.layers[0].data)
                 * rng.uniform(-1, 1, 100_000)).astype(np.float32)
        v1 = ModelArtifact("cam", 1, 0,
                           (WeightTensor("w", (100_000,), recon.layers[0].data + drift),))
        register_update(sender, v1, PARAMS)

        receiver_store = RegistryStore(r_root)
        with ModelReceiver(receiver_store, ("127.0.0.1", 0)) as server:
            thread = threading.Thread(target=server.serve_forever, daemon=True)
            thread.start()
            host, port = server.endpoint
            print(f"receiver listening on {host}:{port}\n")
            try:
                summary_line("bootstrap", push_model(sender, server.endpoint,
                                                     ModelVersionId("cam", 0)))
                summary_line("update   ", push_model(sender, server.endpoint,
                                                     ModelVersionId("cam", 1)))
                try:
                    push_model(sender, server.endpoint, ModelVersionId("cam", 1))
                except DuplicateVersion as err:
                    print(f"repeat   : refused, {type(err).__name__}: {err}")
            finally:
                server.shutdown()
                server.server_close()
            thread.join(timeout=5)

        got = receiver_store.get_model(ModelVersionId("cam", 1))
        want = sender.get_model(ModelVersionId("cam", 1))
        print(f"\nreceiver's v1 byte-identical to sender's: "
              f"{serialize_model(got) == serialize_model(want)}")


if __name__ == "__main__":
    main()
