"""Rigid-body kinematics, IMU streams, and interval preintegration on SO(3).

The motion model is R' = R hat(omega), v' = a + g, p' = v with attitude R,
inertial-frame velocity v and position p; the IMU measures body-frame rate
and specific acceleration with known constant biases. Preintegration
summarizes each keyframe interval as (DeltaR, Deltav, Deltap), quantities
computed from the measurements alone that propagate any keyframe state to
the next.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import IntegrationDivergedError
from ..grid import TimeGrid
from ..ltv import half_table, psd_factor
from ..so3 import hat, is_rotation, project_so3, so3_exp

GRAVITY = np.array([0.0, 0.0, 9.8])

# re-project integrated rotations onto SO(3) this often (and at span ends)
PROJECT_EVERY = 100


@dataclass(frozen=True)
class ExtendedPose:
    """Attitude, inertial velocity and inertial position."""

    R: np.ndarray  # (3, 3)
    v: np.ndarray  # (3,)
    p: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(3))
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float).reshape(3))
        if not is_rotation(self.R, tol=1e-6):
            raise ValueError("R is not a rotation matrix")

    @classmethod
    def identity(cls) -> "ExtendedPose":
        return cls(np.eye(3), np.zeros(3), np.zeros(3))


@dataclass(frozen=True)
class PoseTrajectory:
    """Poses on the fine grid."""

    grid: TimeGrid
    R: np.ndarray  # (n_points, 3, 3)
    v: np.ndarray  # (n_points, 3)
    p: np.ndarray  # (n_points, 3)

    def pose_at(self, index: int) -> ExtendedPose:
        return ExtendedPose(self.R[index], self.v[index], self.p[index])

    def at_keyframes(self):
        kf = list(self.grid.keyframe_indices)
        return self.R[kf], self.v[kf], self.p[kf]


@dataclass(frozen=True)
class ImuStream:
    """Fine-grid body-frame IMU samples with known constant biases."""

    grid: TimeGrid
    omega: np.ndarray       # (n_points, 3) measured body rate
    accel: np.ndarray       # (n_points, 3) measured specific acceleration
    bias_omega: np.ndarray  # (3,)
    bias_accel: np.ndarray  # (3,)
    gravity: np.ndarray     # (3,)
    seed: int | None = None

    def __post_init__(self):
        for name in ("omega", "accel"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (self.grid.n_points, 3):
                raise ValueError(f"{name} must have shape ({self.grid.n_points}, 3)")
            object.__setattr__(self, name, v)
        for name in ("bias_omega", "bias_accel", "gravity"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).reshape(3))

    def corrected_half_tables(self):
        """Bias-corrected rate and acceleration on the half grid."""
        w = half_table(self.omega - self.bias_omega)
        a = half_table(self.accel - self.bias_accel)
        return w, a


@dataclass(frozen=True)
class PreintegralSO3:
    """Initial-condition-free summary of one keyframe interval."""

    k: int
    DR: np.ndarray  # (3, 3)
    Dv: np.ndarray  # (3,)
    Dp: np.ndarray  # (3,)
    t_start: float
    t_end: float
    method: str     # "exact-substep" | "exp-approx"

    @property
    def dt(self) -> float:
        return self.t_end - self.t_start


def _signal_table(sig, grid: TimeGrid) -> np.ndarray:
    """Fine-grid (n_points, 3) table from a callable or array-like signal."""
    if callable(sig):
        return np.stack([np.asarray(sig(t), dtype=float).reshape(3) for t in grid.times()])
    v = np.asarray(sig, dtype=float)
    if v.shape == (3,):
        return np.tile(v, (grid.n_points, 1))
    if v.shape != (grid.n_points, 3):
        raise ValueError(f"signal shape {v.shape} incompatible with grid")
    return v


def simulate_rigid_body(
    omega,
    accel_inertial,
    pose0: ExtendedPose,
    grid: TimeGrid,
    *,
    bias_omega=(0.0, 0.0, 0.0),
    bias_accel=(0.0, 0.0, 0.0),
    sigma_omega=None,
    sigma_accel=None,
    seed: int | None = None,
    gravity=GRAVITY,
) -> tuple[PoseTrajectory, ImuStream]:
    """Integrate the rigid-body motion and emit the corresponding IMU stream.

    ``omega`` is the body-frame angular rate and ``accel_inertial`` the
    apparent acceleration in the inertial frame (v' = a + g); both may be
    callables of t or fine-grid tables. The emitted IMU samples are
    omega + bias (+ noise) and R' a + bias (+ noise), with per-sample noise
    covariance sigma/dt under the white-noise convention.
    """
    g = np.asarray(gravity, dtype=float).reshape(3)
    w_tab = _signal_table(omega, grid)
    a_tab = _signal_table(accel_inertial, grid)
    w_half = half_table(w_tab)
    a_half = half_table(a_tab)
    dt = grid.dt
    kf = set(grid.keyframe_indices)

    R = np.array(pose0.R, dtype=float)
    v = np.array(pose0.v, dtype=float)
    p = np.array(pose0.p, dtype=float)
    n_pts = grid.n_points
    R_out = np.empty((n_pts, 3, 3))
    v_out = np.empty((n_pts, 3))
    p_out = np.empty((n_pts, 3))
    R_out[0], v_out[0], p_out[0] = R, v, p

    for j in range(grid.n_steps):
        h = 2 * j
        # stages for (R, v, p); v' and p' do not depend on R
        k1R = R @ hat(w_half[h])
        k2R = (R + 0.5 * dt * k1R) @ hat(w_half[h + 1])
        k3R = (R + 0.5 * dt * k2R) @ hat(w_half[h + 1])
        k4R = (R + dt * k3R) @ hat(w_half[h + 2])
        R = R + (dt / 6.0) * (k1R + 2.0 * k2R + 2.0 * k3R + k4R)

        # v' = a + g does not depend on the state, so k3v == k2v
        k1v = a_half[h] + g
        k2v = a_half[h + 1] + g
        k4v = a_half[h + 2] + g
        v_new = v + (dt / 6.0) * (k1v + 4.0 * k2v + k4v)
        # p' = v: stages use the staged v values
        k1p = v
        k2p = v + 0.5 * dt * k1v
        k3p = v + 0.5 * dt * k2v
        k4p = v + dt * k2v
        p = p + (dt / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        v = v_new

        i = j + 1
        if i % PROJECT_EVERY == 0 or i in kf:
            R = project_so3(R)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(v)) and np.all(np.isfinite(p))):
            raise IntegrationDivergedError(step=i, t=grid.time_of(i))
        R_out[i], v_out[i], p_out[i] = R, v, p

    truth = PoseTrajectory(grid=grid, R=R_out, v=v_out, p=p_out)

    b_w = np.asarray(bias_omega, dtype=float).reshape(3)
    b_a = np.asarray(bias_accel, dtype=float).reshape(3)
    eps_w = np.zeros((n_pts, 3))
    eps_a = np.zeros((n_pts, 3))
    if sigma_omega is not None or sigma_accel is not None:
        rng = np.random.default_rng(seed)
        if sigma_omega is not None:
            Lw = psd_factor(sigma_omega, "sigma_omega")
            eps_w = rng.standard_normal((n_pts, 3)) @ (Lw.T / np.sqrt(dt))
        if sigma_accel is not None:
            La = psd_factor(sigma_accel, "sigma_accel")
            eps_a = rng.standard_normal((n_pts, 3)) @ (La.T / np.sqrt(dt))
    accel_body = np.einsum("nji,nj->ni", R_out, a_tab)  # R^T a
    stream = ImuStream(
        grid=grid,
        omega=w_tab + b_w + eps_w,
        accel=accel_body + b_a + eps_a,
        bias_omega=b_w,
        bias_accel=b_a,
        gravity=g,
        seed=seed,
    )
    return truth, stream


def integrate_rotation(
    w_half: np.ndarray, grid: TimeGrid, i0: int, i1: int, R0=None
) -> np.ndarray:
    """Integrate R' = R hat(w) over fine steps [i0, i1] from R0 (default I).

    ``w_half`` is a bias-corrected half-grid rate table. The result is
    re-projected onto SO(3) every PROJECT_EVERY steps and at the end.
    Returns R at i1 only.
    """
    R = np.eye(3) if R0 is None else np.array(R0, dtype=float)
    dt = grid.dt
    for j in range(i0, i1):
        h = 2 * j
        k1 = R @ hat(w_half[h])
        k2 = (R + 0.5 * dt * k1) @ hat(w_half[h + 1])
        k3 = (R + 0.5 * dt * k2) @ hat(w_half[h + 1])
        k4 = (R + dt * k3) @ hat(w_half[h + 2])
        R = R + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if (j + 1 - i0) % PROJECT_EVERY == 0:
            R = project_so3(R)
    return project_so3(R)


def imu_preintegrate(
    stream: ImuStream, t_start: float, t_end: float, method: str = "exact-substep", k: int = 0
) -> PreintegralSO3:
    """Preintegrate the IMU over [t_start, t_end] into (DeltaR, Deltav, Deltap).

    method "exact-substep" integrates d(DeltaR)/dt = DeltaR hat(w) on the
    fine steps, which is the exact relation R(t) = R(t_start) DeltaR;
    "exp-approx" instead uses DeltaR = Exp(integral of w), which is only
    first-order accurate in the interval length for time-varying rates.
    Either way Deltav and Deltap accumulate DeltaR-rotated accelerations,
    with all quantities bias-corrected and independent of initial
    conditions.
    """
    if method not in ("exact-substep", "exp-approx"):
        raise ValueError(f"unknown preintegration method {method!r}")
    grid = stream.grid
    i0, i1 = grid.index_of(t_start), grid.index_of(t_end)
    if i1 <= i0:
        raise ValueError(f"span [{t_start}, {t_end}] is empty or reversed")
    w_half, a_half = stream.corrected_half_tables()
    dt = grid.dt

    Dv = np.zeros(3)
    Dp = np.zeros(3)
    if method == "exact-substep":
        DR = np.eye(3)
        for j in range(i0, i1):
            h = 2 * j
            k1R = DR @ hat(w_half[h])
            k2R = (DR + 0.5 * dt * k1R) @ hat(w_half[h + 1])
            k3R = (DR + 0.5 * dt * k2R) @ hat(w_half[h + 1])
            k4R = (DR + dt * k3R) @ hat(w_half[h + 2])

            k1v = DR @ a_half[h]
            k2v = (DR + 0.5 * dt * k1R) @ a_half[h + 1]
            k3v = (DR + 0.5 * dt * k2R) @ a_half[h + 1]
            k4v = (DR + dt * k3R) @ a_half[h + 2]

            k1p = Dv
            k2p = Dv + 0.5 * dt * k1v
            k3p = Dv + 0.5 * dt * k2v
            k4p = Dv + dt * k3v

            DR = DR + (dt / 6.0) * (k1R + 2.0 * k2R + 2.0 * k3R + k4R)
            Dv = Dv + (dt / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
            Dp = Dp + (dt / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
            if (j + 1 - i0) % PROJECT_EVERY == 0:
                DR = project_so3(DR)
        DR = project_so3(DR)
    else:
        # accumulate theta = integral of w; rotate accelerations by Exp(theta)
        theta = np.zeros(3)
        for j in range(i0, i1):
            h = 2 * j
            k1t = w_half[h]
            k2t = w_half[h + 1]
            k4t = w_half[h + 2]

            R0g = so3_exp(theta)
            Rmid = so3_exp(theta + 0.5 * dt * k1t)
            Rmid2 = so3_exp(theta + 0.5 * dt * k2t)
            Rend = so3_exp(theta + dt * k2t)
            k1v = R0g @ a_half[h]
            k2v = Rmid @ a_half[h + 1]
            k3v = Rmid2 @ a_half[h + 1]
            k4v = Rend @ a_half[h + 2]

            k1p = Dv
            k2p = Dv + 0.5 * dt * k1v
            k3p = Dv + 0.5 * dt * k2v
            k4p = Dv + dt * k3v

            theta = theta + (dt / 6.0) * (k1t + 4.0 * k2t + k4t)
            Dv = Dv + (dt / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
            Dp = Dp + (dt / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        DR = so3_exp(theta)

    if not (np.all(np.isfinite(DR)) and np.all(np.isfinite(Dv)) and np.all(np.isfinite(Dp))):
        raise IntegrationDivergedError(step=i1, t=t_end)
    return PreintegralSO3(
        k=k, DR=DR, Dv=Dv, Dp=Dp, t_start=t_start, t_end=t_end, method=method
    )


def imu_preintegrate_all(stream: ImuStream, method: str = "exact-substep") -> list[PreintegralSO3]:
    """Preintegrals for every consecutive keyframe interval of the stream's grid."""
    grid = stream.grid
    kf = grid.keyframe_indices
    return [
        imu_preintegrate(
            stream, grid.time_of(kf[k]), grid.time_of(kf[k + 1]), method=method, k=k
        )
        for k in range(len(kf) - 1)
    ]


def propagate_keyframe(
    pose: ExtendedPose, pre: PreintegralSO3, dt: float | None = None, gravity=GRAVITY
) -> ExtendedPose:
    """Propagate a keyframe state through a preintegrated interval.

        R+ = R DeltaR
        v+ = v + R Deltav + dt g
        p+ = p + dt v + dt^2/2 g + R Deltap
    """
    g = np.asarray(gravity, dtype=float).reshape(3)
    dt = pre.dt if dt is None else dt
    R_new = pose.R @ pre.DR
    v_new = pose.v + pose.R @ pre.Dv + dt * g
    p_new = pose.p + dt * pose.v + 0.5 * dt * dt * g + pose.R @ pre.Dp
    return ExtendedPose(project_so3(R_new), v_new, p_new)
