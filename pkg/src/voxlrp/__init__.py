"""3D convolutional classification of volumetric images with relevance heatmaps.

Train a small 3D CNN on labeled volumes, then redistribute its class score
back to the input voxels with alpha-beta relevance rules to see which
structures drove each decision.  See the README for the CLI pipeline.
"""

from .errors import (
    ConfigError,
    ManifestError,
    ModelFileError,
    NiftiError,
    PreprocessError,
    ShapeError,
    StateError,
    TrainingDiverged,
    VoxlrpError,
)
from .layers import (
    AvgPool3d,
    BatchNorm,
    Conv3d,
    Dense,
    Flatten,
    ModelConfig,
    ParamSet,
    ReLU,
    default_model_config,
    format_model_config,
    infer_shapes,
    init_params,
    model_backward,
    model_forward,
    parse_model_config,
    softmax,
)
from .lrp import (
    LrpConfig,
    RelevanceMap,
    aggregate_group,
    conservation_audit,
    explain,
    fold_batchnorm,
    init_relevance,
)
from .modelstore import load_model, save_model
from .trainer import (
    AdamState,
    Dataset,
    Metrics,
    Sample,
    TrainConfig,
    TrainHistory,
    adam_step,
    class_weights,
    cyclical_lr,
    evaluate,
    kfold,
    stratified_split,
    train,
    weighted_cross_entropy,
)
from .volume import (
    PhantomSpec,
    Volume,
    phantom_dataset,
    phantom_volumes,
    preprocess,
    read_nifti,
    write_nifti,
)

__version__ = "0.1.0"
