"""Multi-body visual odometry: camera and object motion from depth, optical flow and instance masks."""

from .dataio import GroundTruth, NoiseSpec, load_sequence, read_manifest
from .estimator import Correspondences, EstimateResult, SolverConfig, estimate
from .geometry import Intrinsics, SE3Pose, se3_exp, se3_log
from .metrics import PoseError, epe, object_velocity, pose_change_error
from .pipeline import Frame, FrameResult, MultiBodyOdometry, PipelineConfig
from .report import Report, evaluate
from .synthetic import SyntheticSceneSpec, generate_synthetic

__version__ = "0.1.0"
