"""slimnn: a benchmark suite for neural-network compression.

Compares iterative pruning (magnitude saliency under L1/L2 weight decay,
and diagonal-curvature saliency), hashed weight sharing, and small
parameter-matched convolutional baselines on MNIST-style image data.
"""

from .data import Dataset, batch_iter, load_idx, make_variant, normalize, resplit, write_idx
from .errors import (
    ConfigurationError,
    DataError,
    IdxFormatError,
    PruningError,
    ShapeMismatchError,
    SlimnnError,
    TrainingDivergedError,
    UnsupportedLayerError,
)
from .estimators import HashedMLPClassifier, PrunedMLPClassifier, SimpleConvClassifier
from .harness import (
    AggregateRecord,
    ExperimentConfig,
    RunRecord,
    aggregate,
    conv_sweep,
    emit_report,
    fingerprint,
    pareto_front,
    run_trials,
    weight_histogram,
)
from .hashing import HashedLayer, bucket_index
from .network import (
    ConvSpec,
    Network,
    NetworkSpec,
    TrainHyper,
    conv_net_spec,
    hashed_mlp_spec,
    init_network,
    mlp_spec,
)
from .pruning import (
    PruningPlan,
    compression_ratio,
    current_sparsity,
    prune_to,
    run_pruning,
    saliency_magnitude,
    saliency_obd,
    target_sparsity,
)
from .training import evaluate

__version__ = "0.1.0"

__all__ = [
    "AggregateRecord",
    "ConfigurationError",
    "ConvSpec",
    "DataError",
    "Dataset",
    "ExperimentConfig",
    "HashedLayer",
    "HashedMLPClassifier",
    "IdxFormatError",
    "Network",
    "NetworkSpec",
    "PrunedMLPClassifier",
    "PruningError",
    "PruningPlan",
    "RunRecord",
    "ShapeMismatchError",
    "SimpleConvClassifier",
    "SlimnnError",
    "TrainHyper",
    "TrainingDivergedError",
    "UnsupportedLayerError",
    "aggregate",
    "batch_iter",
    "bucket_index",
    "compression_ratio",
    "conv_net_spec",
    "conv_sweep",
    "current_sparsity",
    "emit_report",
    "evaluate",
    "fingerprint",
    "hashed_mlp_spec",
    "init_network",
    "load_idx",
    "make_variant",
    "mlp_spec",
    "normalize",
    "pareto_front",
    "prune_to",
    "resplit",
    "run_pruning",
    "run_trials",
    "saliency_magnitude",
    "saliency_obd",
    "target_sparsity",
    "weight_histogram",
    "write_idx",
]
