"""Training a target model against frozen source models.

The trainer minimizes a supervised loss on scarce labels plus a penalty,
summed over labeled and unlabeled samples alike, that makes source-model
representations reconstructable from the target's hidden representations
through learned linear maps. Also here: the synthetic multi-domain
benchmark and the empirical risk-bound harness for linear instances.
"""

from .network import (
    ACTIVATIONS,
    ForwardTape,
    MLP,
    NetworkError,
    accuracy,
    from_artifact,
    init_mlp,
    to_artifact,
)
from .regularizer import (
    DimensionMismatch,
    TransformSet,
    mode_product,
    reuse_penalty_tensor,
    reuse_penalty_tensor_grads,
    reuse_penalty_vec,
    reuse_penalty_vec_grads,
)
from .training import (
    AlignmentPair,
    Batch,
    DivergenceDetected,
    DomainDataset,
    Grads,
    ObjectiveParts,
    ReuseConfig,
    SourceModelSet,
    TraceRow,
    TrainResult,
    gradients,
    init_transforms,
    resolve_alignment,
    resolve_alpha,
    total_objective,
    trace_to_csv,
    train_target,
    uniform_alpha,
)
from .synthetic import (
    BENCHMARK_SPEC,
    SynthSpec,
    SyntheticBenchmark,
    benchmark_config,
    domain_means,
    make_synthetic_domains,
    sample_domain,
)
from .bound import (
    BoundInstance,
    BoundReport,
    HypothesisViolated,
    check_risk_bound,
    make_bound_instance,
    squared_risk,
    transformed_source_predictor,
)
