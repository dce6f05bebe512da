"""Uncertainty-aware occupancy submapping with probabilistic depth fusion and
a robust pose-graph back end, exercised on synthetic scenes."""

from .geometry import PinholeCamera, Pose, backproject, compose, exp, inverse, log, project
from .depth_oracle import (
    DepthImage,
    NoiseModel,
    SyntheticScene,
    calibrate_gain,
    corrupt_mvs,
    corrupt_stereo,
    render_depth,
)
from .depth_fusion import FusedDepth, fuse_images, fuse_pixel
from .submap import InverseSensorParams, OccupancySubmap, inverse_sensor_model, update_voxel
from .factor_graph import (
    FactorGraph,
    O2PFactor,
    OptimizeOptions,
    RelPoseFactor,
    SolverFailure,
    StateVector,
    jacobian_selftest,
    optimize,
    robust_weight,
)
from .submap_manager import SubmapRegistry, overlap_fraction, should_spawn
from .evaluation import (
    Trajectory,
    align_se3,
    ate_rmse,
    hilti_score,
    mesh_accuracy,
    mesh_completeness,
    sample_gt_surface,
)
from .pipeline import RunConfig, run, run_ablation

__version__ = "0.1.0"
