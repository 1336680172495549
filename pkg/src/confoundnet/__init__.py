"""Deterministic CNN training engine with an auxiliary pose-regression head."""

from . import errors
from .data import (
    Chip,
    SynthConfig,
    export_dataset,
    flip_augment,
    load_dataset,
    normalize,
    synth_generate,
)
from .network import (
    Network,
    NetworkConfig,
    backward,
    build,
    combined_loss,
    forward,
    strip_pose_head,
)
from .pose_geometry import (
    Azimuth,
    Quaternion,
    azimuth_dist,
    negate_azimuth,
    pose_loss,
    quat_dist,
    quat_from_azimuth,
)
from .tensor_engine import (
    LayerParams,
    Tensor,
    conv2d_backward,
    conv2d_forward,
    fc_backward,
    fc_forward,
    grad_check,
    maxpool2_backward,
    maxpool2_forward,
    relu_backward,
    relu_forward,
    softmax_logloss,
)
from .trainer import (
    EvalReport,
    HyperParams,
    Metrics,
    checkpoint_load,
    checkpoint_save,
    evaluate,
    sgd_step,
    train,
)

__version__ = "0.1.0"
