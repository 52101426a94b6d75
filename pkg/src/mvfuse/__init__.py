"""Multi-view keypoint fusion for 6D pose estimation of bin-picked parts."""

from .errors import MvFuseError
from .fusion import ObjectCluster, PoseHypothesis, cluster_instances, polish_pose, ransac_pose
from .geometry import CameraView, RigidTransform, project, rigid_align
from .heatmap import Heatmap, KeypointField, multiview_probability, multiview_uncertainty
from .object_model import KeypointModel, load_model, save_model
from .pipeline import EstimateConfig, SceneInput, estimate, from_synthetic
from .refine import DepthImage, ScoredCloud, filter_cloud, icp
from .score import Detection, Verdict, add_error, evaluate_scene, precision_recall
from .simulate import SceneConfig, generate, oracle_best_keypoint

__version__ = "0.1.0"
