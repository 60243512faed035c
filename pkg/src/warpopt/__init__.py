"""Instance-wise projective warping, self-supervision losses, direct pose
optimization, video-instance annotation and the synthetic-scene oracle."""

from .geometry import (
    Intrinsics,
    PointCloud,
    PoseSE3,
    Projection,
    backproject,
    compose,
    invert,
    pose_to_transform,
    project,
    transform_to_pose,
    upsample_intrinsics,
)
from .warp import (
    WarpResult,
    forward_warp,
    forward_warp_mask,
    inverse_warp,
    scale_consistent_depth,
)
from .instances import (
    InconsistencyMap,
    InstanceMaskSet,
    ScenePair,
    background_mask,
    compose_full,
    depth_inconsistency,
    merge_inconsistency,
    propagate_instance_mask,
    reconstruct_background,
    reconstruct_instance,
    union_valid_mask,
    weighted_valid_mask,
)
from .losses import (
    HeightPrior,
    LossBreakdown,
    LossConfig,
    geometric_loss,
    height_loss,
    reconstruction_loss,
    smoothness_loss,
    ssim_map,
    total_loss,
    translation_loss,
    translation_prior,
)
from .pipeline import (
    OptimizerConfig,
    ParamLayout,
    SceneParams,
    evaluate_pair,
)
from .optim import (
    OptimizeResult,
    SceneGradient,
    cyclic_triplet,
    gradient,
    optimize,
)
from .synth import SyntheticSceneConfig, render_sequence
from .metrics import AteResult, DepthMetrics, ate_metric, depth_metrics
from .annotate import (
    FlowField,
    MotsScores,
    TrackedSequence,
    iou_table,
    match_instances,
    mots_metrics,
    occlusion_consensus,
    track_masks,
)

__version__ = "0.1.0"
