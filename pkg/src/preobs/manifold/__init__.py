"""Rigid-body estimation on SO(3) x R^n.

Submodules:
    kinematics  ground-truth motion, IMU streams, interval preintegration
    extension   body-frame dynamic extension and state reconstruction
    solvers     batch estimators (preintegration-based and PEBO) and the
                orthogonal-Procrustes / Gauss-Newton machinery
"""

from .kinematics import (
    GRAVITY,
    ExtendedPose,
    ImuStream,
    PoseTrajectory,
    PreintegralSO3,
    imu_preintegrate,
    imu_preintegrate_all,
    integrate_rotation,
    propagate_keyframe,
    simulate_rigid_body,
)
from .extension import (
    ManifoldPeboExtension,
    reconstruct_manifold_state,
    run_manifold_extension,
)
from .solvers import (
    LandmarkMeasurements,
    ManifoldEstimate,
    best_fit_rotation,
    pose_from_landmarks,
    sample_landmarks,
    solve_manifold_pebo,
    solve_manifold_preintegration,
)

__all__ = [
    "GRAVITY",
    "ExtendedPose",
    "ImuStream",
    "PoseTrajectory",
    "PreintegralSO3",
    "imu_preintegrate",
    "imu_preintegrate_all",
    "integrate_rotation",
    "propagate_keyframe",
    "simulate_rigid_body",
    "ManifoldPeboExtension",
    "reconstruct_manifold_state",
    "run_manifold_extension",
    "LandmarkMeasurements",
    "ManifoldEstimate",
    "best_fit_rotation",
    "pose_from_landmarks",
    "sample_landmarks",
    "solve_manifold_pebo",
    "solve_manifold_preintegration",
]
