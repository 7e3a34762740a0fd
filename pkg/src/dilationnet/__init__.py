"""Multi-dilation CNNs with multi-resolution feature fusion, on a numpy autodiff engine."""

from .tensor import ComputationRecord, Tensor, backward, suspend_recording
from .ops import (
    BatchNormState,
    ConvSpec,
    add_n,
    batch_norm,
    concat,
    conv2d,
    dense,
    global_avg_pool,
    relu,
    sigmoid,
)
from .networks import (
    NetStructure,
    build_dilation_net,
    build_for_variant,
    net_from_description,
    structure_description,
)
from .checkpoint import Checkpoint, CheckpointError, checkpoint_from_net, net_from_checkpoint
from .data import (
    AugmentationConfig,
    Batch,
    DatasetManifest,
    augment,
    dataset_from_manifest,
    fraction,
    iter_batches,
    multi_res_batches,
    normalize,
    partition_batches,
    resample,
    scan_dataset,
    split,
    synth_dataset,
)
from .fusion import (
    FrozenBackbone,
    FusionSpec,
    enumerate_combinations,
    extract_backbone,
    fusion_forward,
    load_fusion,
)
from .training import (
    TrainConfig,
    TrainingDivergedError,
    adam_step,
    bce_l2_loss,
    train_stage1,
    train_stage2,
)
from .metrics import (
    ConfusionMatrix,
    MetricsReport,
    auc,
    basic_rates,
    confusion,
    evaluate,
    kappa,
)
from .gradcheck import grad_check, run_scope
from .estimators import DilationNetClassifier, FusionClassifier

__version__ = "0.1.0"

__all__ = [
    "ComputationRecord",
    "Tensor",
    "backward",
    "suspend_recording",
    "BatchNormState",
    "ConvSpec",
    "add_n",
    "batch_norm",
    "concat",
    "conv2d",
    "dense",
    "global_avg_pool",
    "relu",
    "sigmoid",
    "NetStructure",
    "build_dilation_net",
    "build_for_variant",
    "net_from_description",
    "structure_description",
    "Checkpoint",
    "CheckpointError",
    "checkpoint_from_net",
    "net_from_checkpoint",
    "AugmentationConfig",
    "Batch",
    "DatasetManifest",
    "augment",
    "dataset_from_manifest",
    "fraction",
    "iter_batches",
    "multi_res_batches",
    "normalize",
    "partition_batches",
    "resample",
    "scan_dataset",
    "split",
    "synth_dataset",
    "FrozenBackbone",
    "FusionSpec",
    "enumerate_combinations",
    "extract_backbone",
    "fusion_forward",
    "load_fusion",
    "TrainConfig",
    "TrainingDivergedError",
    "adam_step",
    "bce_l2_loss",
    "train_stage1",
    "train_stage2",
    "ConfusionMatrix",
    "MetricsReport",
    "auc",
    "basic_rates",
    "confusion",
    "evaluate",
    "kappa",
    "grad_check",
    "run_scope",
    "DilationNetClassifier",
    "FusionClassifier",
    "__version__",
]
