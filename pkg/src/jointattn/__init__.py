"""Cross-stream joint attention over two GRU-encoded feature streams, with fusion baselines."""

from .attention import (
    AdditiveAttention,
    AttentionTrace,
    BranchSelection,
    JointAttention,
    RecurrentSpatialPooling,
    SpatialAttention,
    additive_attention,
    branch_selection,
    gate_concentration,
    jna_backward,
    jna_forward,
    spatial_attention,
)
from .fusion import (
    HEAD_TYPES,
    ModelSpec,
    Prediction,
    TwoStreamModel,
    average_fusion,
    build_model,
    dominance_metric,
    fc_fusion_forward,
    model_forward,
)
from .recurrent import GruCell, GruEncoder, encode_backward, encode_sequence, gru_step
from .synthetic import LabeledSequencePair, SyntheticTaskSpec, generate_task, load_dataset, save_dataset
from .tensor_core import ConfigError, DimensionError, NormalizationError, Param, StateError, make_rng
from .training import (
    REFERENCE_JOINT_SCHEDULE,
    TrainSchedule,
    TrainingDivergedError,
    WindowSpec,
    evaluate,
    lr_at,
    train,
    window_indices,
)

__version__ = "0.1.0"
