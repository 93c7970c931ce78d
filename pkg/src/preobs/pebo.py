"""Parameter estimation-based observer (PEBO) for LTV systems.

A copy of the system dynamics (the extension xi) and its fundamental
matrix Omega are integrated over the whole horizon with no resets; the
unknown state then differs from xi by Omega times a constant parameter
theta (the initial state), so state estimation reduces to a linear
regression for theta from the keyframe outputs. A noise budget propagated
alongside gives the per-keyframe regression-error covariance used by the
statistically weighted variant.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import UnsupportedFeedforwardError
from .grid import TimeGrid
from .lsq import solve_stacked
from .ltv import LtvModel, MeasurementSet, SignalTrajectory, psd_factor

# below this reciprocal condition number Omega(t_k) is flagged as ill-conditioned
RCOND_WARN = 1e-12


@dataclass(frozen=True)
class PeboExtension:
    """Trajectories of the dynamic extension xi and fundamental matrix Omega.

    Both are stored on the full fine grid; ``omega_rcond`` records the
    reciprocal condition number of Omega at every keyframe (ill-conditioned
    values are flagged, not fatal: an unstable A makes Omega unbounded and
    it is the caller's decision how to proceed).
    """

    grid: TimeGrid
    xi0: np.ndarray          # (n,)
    xi: np.ndarray           # (n_points, n)
    Omega: np.ndarray        # (n_points, n, n)
    omega_rcond: np.ndarray  # (n_keyframes,)

    def at_keyframes(self):
        kf = list(self.grid.keyframe_indices)
        return self.xi[kf], self.Omega[kf]


@dataclass(frozen=True)
class Regressor:
    """Per-keyframe linear regression data: Y_k ~= G_k theta."""

    keyframe_indices: tuple[int, ...]
    times: np.ndarray   # (N,)
    Y: np.ndarray       # (N, p)
    G: np.ndarray       # (N, p, n)


@dataclass(frozen=True)
class NoiseBudget:
    """Regression-error covariance pieces: state covariance Pi plus sigma_y."""

    grid: TimeGrid
    Pi: np.ndarray       # (n_points, n, n), Pi(t0) = 0
    sigma_y: np.ndarray  # (p, p)


def run_extension(model: LtvModel, u_bar: SignalTrajectory, xi0) -> PeboExtension:
    """Integrate xi' = A xi + B u from xi0 and Omega' = A Omega from I.

    Both run over the full horizon with no resets, jointly in a single
    pass. Keyframes at which Omega is nearly singular trigger a warning.
    """
    grid = u_bar.grid
    n = model.n
    xi0 = np.atleast_1d(np.asarray(xi0, dtype=float))
    if xi0.shape != (n,):
        raise ValueError(f"xi0 has shape {xi0.shape}, expected ({n},)")
    flow = model.flow(grid)
    X0 = np.hstack([np.eye(n), xi0[:, None]])
    forcing = np.zeros((2 * grid.n_steps + 1, n, n + 1))
    forcing[:, :, n] = flow.forcing_from_input(u_bar)
    traj = flow.propagate(X0, 0, grid.n_steps, forcing=forcing, record="all")
    Omega = traj[:, :, :n]
    xi = traj[:, :, n]

    rconds = []
    for i in grid.keyframe_indices:
        s = np.linalg.svd(Omega[i], compute_uv=False)
        rc = float(s[-1] / s[0]) if s[0] > 0 else 0.0
        rconds.append(rc)
        if rc < RCOND_WARN:
            warnings.warn(
                f"fundamental matrix nearly singular at keyframe t = {grid.time_of(i):.6g} "
                f"(rcond = {rc:.3e})",
                RuntimeWarning,
            )
    return PeboExtension(
        grid=grid, xi0=xi0, xi=xi, Omega=Omega, omega_rcond=np.array(rconds)
    )


def build_regressor(
    measurements: MeasurementSet,
    ext: PeboExtension,
    model: LtvModel,
    *,
    include_last: bool = False,
) -> Regressor:
    """Assemble Y_k = y_k - C_k xi_k + C_k Omega_k xi0 - D_k u_k and G_k = C_k Omega_k.

    By default the final keyframe is excluded, matching the batch cost
    convention; pass include_last=True to use every keyframe.
    """
    grid = measurements.grid
    kf = list(grid.keyframe_indices)
    n_used = len(kf) if (include_last or len(kf) == 1) else len(kf) - 1
    kf = kf[:n_used]
    t_k = grid.keyframe_times()[:n_used]
    C_k = model.C(t_k)
    D_k = model.D(t_k)
    Omega_k = ext.Omega[kf]
    xi_k = ext.xi[kf]
    u_k = measurements.u_bar.values[kf]
    G = np.einsum("kij,kjl->kil", C_k, Omega_k)
    Y = (
        measurements.y_bar[:n_used]
        - np.einsum("kij,kj->ki", C_k, xi_k)
        + np.einsum("kij,j->ki", G, ext.xi0)
        - np.einsum("kij,kj->ki", D_k, u_k)
    )
    return Regressor(keyframe_indices=tuple(kf), times=t_k, Y=Y, G=G)


def estimate_theta(reg: Regressor, gammas, *, allow_deficient: bool = False) -> np.ndarray:
    """Weighted least-squares estimate of the constant parameter theta.

    Minimizes sum_k gamma_k |Y_k - G_k theta|^2 exactly. An insufficiently
    excited trajectory leaves theta underdetermined, which raises an error
    reporting the nullspace dimension.
    """
    N, p, n = reg.G.shape
    gammas = np.broadcast_to(np.asarray(gammas, dtype=float), (N,))
    if np.any(gammas <= 0):
        raise ValueError("weights must be positive")
    sw = np.sqrt(gammas)[:, None, None]
    A = (sw * reg.G).reshape(N * p, n)
    b = (np.sqrt(gammas)[:, None] * reg.Y).reshape(N * p)
    return solve_stacked(A, b, allow_deficient=allow_deficient, label="parameter regression")


def reconstruct_state(ext: PeboExtension, theta, *, fine: bool = False):
    """State trajectory xi_t - Omega_t xi0 + Omega_t theta.

    Returns (times, x_hat); keyframes only by default, every fine-grid
    point with fine=True. The xi0 term cancels algebraically, so the
    reconstruction does not depend on the choice of xi0.
    """
    theta = np.asarray(theta, dtype=float)
    if fine:
        idx = np.arange(ext.grid.n_points)
        times = ext.grid.times()
    else:
        idx = np.asarray(ext.grid.keyframe_indices, dtype=int)
        times = ext.grid.keyframe_times()
    x_hat = ext.xi[idx] + np.einsum("kij,j->ki", ext.Omega[idx], theta - ext.xi0)
    return times, x_hat


def propagate_noise(model: LtvModel, grid: TimeGrid, sigma_u, sigma_y=None) -> NoiseBudget:
    """Propagate the input-noise covariance through the dynamics.

    Pi' = A Pi + Pi A' + B sigma_u B', Pi(t0) = 0; symmetry is enforced by
    averaging after every step, so Pi stays symmetric PSD on the grid.
    """
    sigma_u = np.atleast_2d(np.asarray(sigma_u, dtype=float))
    psd_factor(sigma_u, "sigma_u")
    if sigma_y is None:
        sigma_y = np.zeros((model.p, model.p))
    flow = model.flow(grid)
    Pi = flow.propagate_lyapunov(sigma_u, record="all")
    return NoiseBudget(grid=grid, Pi=Pi, sigma_y=np.atleast_2d(np.asarray(sigma_y, dtype=float)))


def estimate_theta_weighted(
    reg: Regressor,
    budget: NoiseBudget,
    model: LtvModel,
    *,
    allow_deficient: bool = False,
) -> np.ndarray:
    """Theta estimate weighted by the inverse regression-error covariance.

    Per keyframe the residual Y_k - G_k theta carries covariance
    sigma_y + C_k Pi_k C_k', and the estimate minimizes the sum of the
    correspondingly weighted squared residuals. Requires a system without
    feedforward (D = 0): with D != 0 the input noise enters Y directly and
    the per-keyframe covariance above is no longer the right weight.

    A singular weight base is regularized with 1e-12 * I and warned about.
    """
    N, p, n = reg.G.shape
    D_k = model.D(reg.times)
    if np.max(np.abs(D_k)) > 0:
        raise UnsupportedFeedforwardError("weighted estimation requires D(t) = 0")
    C_k = model.C(reg.times)
    Pi_k = budget.Pi[list(reg.keyframe_indices)]
    rows_A = np.empty((N, p, n))
    rows_b = np.empty((N, p))
    for k in range(N):
        base = budget.sigma_y + C_k[k] @ Pi_k[k] @ C_k[k].T
        base = 0.5 * (base + base.T)
        try:
            L = np.linalg.cholesky(base)
        except np.linalg.LinAlgError:
            warnings.warn(
                f"singular weight base at t = {reg.times[k]:.6g}; regularizing", RuntimeWarning
            )
            L = np.linalg.cholesky(base + 1e-12 * np.eye(p))
        # whiten: ||r||^2_{base^-1} = ||L^-1 r||^2
        rows_A[k] = scipy.linalg.solve_triangular(L, reg.G[k], lower=True)
        rows_b[k] = scipy.linalg.solve_triangular(L, reg.Y[k], lower=True)
    return solve_stacked(
        rows_A.reshape(N * p, n),
        rows_b.reshape(N * p),
        allow_deficient=allow_deficient,
        label="weighted parameter regression",
    )
