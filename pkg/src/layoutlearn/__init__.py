"""Compositional 3D scene learning: K radiance fields placed by N learned layouts."""

from .compositor import Layout, LayoutSet, PlacedFields, SceneModel, combine, init_layout_set
from .diff import ParamStore, Tape, Var, backward, finite_diff_check
from .estimator import LayoutLearner
from .eval import GroundTruthScene, best_assignment, iou_score, multi_seed_eval, score_matrix
from .field import BlobField, MlpField, VoxelField
from .geom import RigidScaleTransform, quat_to_rotmat, transform_rays
from .losses import LossWeights, MockGuidance, NoiseSchedule, empty_loss, sds_pixel_gradient
from .renderer import Camera, CameraRanges, RenderConfig, render
from .trainer import SceneTarget, TrainConfig, Trainer, lr_at, run_mode

__version__ = "0.1.0"

__all__ = [
    "BlobField", "Camera", "CameraRanges", "GroundTruthScene", "Layout", "LayoutLearner", "LayoutSet", "LossWeights",
    "MlpField", "MockGuidance", "NoiseSchedule", "ParamStore", "PlacedFields", "RenderConfig",
    "RigidScaleTransform", "SceneModel", "SceneTarget", "Tape", "TrainConfig", "Trainer", "Var",
    "VoxelField", "backward", "best_assignment", "combine", "empty_loss", "finite_diff_check",
    "init_layout_set", "iou_score", "lr_at", "multi_seed_eval", "quat_to_rotmat", "render", "run_mode",
    "score_matrix", "sds_pixel_gradient", "transform_rays",
]
