"""Delta-coded distribution of neural network weights, plus a reuse trainer.

The pipeline: snapshot models into versioned containers, extract per-layer
deltas between consecutive versions, quantize them onto a decimal grid,
ship the encoded packets over a small TCP protocol, and rebuild bit-exact
artifacts on the receiving side. The reuse trainer grows a target model
against several frozen source models by penalizing hidden representations
that cannot reconstruct the sources' representations through learned maps.
"""

from .core import (
    BadMagic,
    ChecksumMismatch,
    ContainerError,
    ModelArtifact,
    ModelPipeError,
    ModelVersionId,
    NonFiniteWeight,
    ShapeMismatch,
    TruncatedPayload,
    WeightTensor,
    architecture_compatible,
    architecture_digest,
    deserialize_model,
    fnv1a64,
    serialize_model,
    weight_bytes,
    weight_checksum,
)
from .codec import (
    ArchitectureMismatch,
    BadHeader,
    CodecError,
    DeltaLayer,
    DeltaModel,
    DeltaPacket,
    LengthMismatch,
    MalformedVarint,
    PacketLayer,
    QuantLayer,
    QuantizationOverflow,
    QuantizationParams,
    QuantizedDelta,
    SizeReport,
    apply_delta,
    compute_delta,
    decode_packet,
    decode_values,
    dequantize_delta,
    dequantize_weight,
    encode_packet,
    encode_values,
    packet_from_bytes,
    packet_to_bytes,
    quantize_delta,
    quantize_model,
    quantize_weight,
    reconstruct,
    round_half_away_from_zero,
    size_report,
)
from .registry import (
    ChainGap,
    DuplicateVersion,
    NoCommonVersion,
    NonMonotoneVersion,
    RegistryStore,
    UnknownParent,
    UnknownVersion,
    VersionSet,
    latest_common_version,
    reconstruct_chain,
    register_update,
)
from .transport import ModelReceiver, TransferError, TransferSummary, push_model, serve
from . import reuse

__version__ = "0.1.0"
