"""Split learning with heterogeneous cut layers and early-exit inference."""

from .data import AugmentConfig, Dataset, augment, cifar10_load, iid_partition, synth_make
from .errors import ConfigError, FormatError, NumericError, ProtocolError, ShapeError
from .inference import ExitDecisionConfig, SweepPoint, entropy, infer_one, sweep
from .model import (
    BaseNetworkSpec,
    ClientModel,
    LayerSpec,
    ServerModel,
    build_base,
    split,
    table_spec,
)
from .optim import AdamState, CosineSchedule, ParameterSet, adam_step, cosine_lr
from .tensor import Tensor
from .training import (
    FeatureBatch,
    RoundLog,
    TrainConfig,
    TrainResult,
    cross_layer_aggregate,
    run_averaging,
    run_centralized,
    run_distributed,
    run_sequential,
    run_strategy,
)

__version__ = "0.1.0"
