"""3D motion parsing: geometry, motion decomposition, losses, pose recovery, segmentation and evaluation."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BehindCameraError, DegeneracyError, DimensionError, DomainError, EmptyDomainError,
    FormatError, IllConditionedError, MotionParseError, NoSignalError,
)
from .geometry import Intrinsics, PoseSE3, backproject, project, se3_exp, se3_log  # noqa: E402
from .hmp import HMPOutput, parse, visibility_mask  # noqa: E402
from .losses import LossWeights, loss_mono, loss_mono_stereo  # noqa: E402
from .metrics import eval_depth, eval_scene_flow, eval_segmentation, median_scale  # noqa: E402
from .pose_optim import OptimSettings, PoseEstimate, estimate_pose, pose_error  # noqa: E402
from .scene import SceneSpec, synthesize_scene  # noqa: E402
from .segmentation import fit_gmm2, graph_cut_segment, segment_moving_objects  # noqa: E402
