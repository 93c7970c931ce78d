"""Batch estimators on SO(3) x R^n from body-frame landmark observations.

The measurement model is y_i(t_k) = R(t_k)'(p_i - p(t_k)) + noise: each
landmark is observed in body coordinates at measurement keyframes. Two
estimators are provided. The preintegration-based batch solver optimizes
all keyframe poses tied together by preintegrated interval terms (soft
penalties, or exact recursion in hard-constraint mode); the PEBO solver
optimizes the constant frame Q_c and the 9-vector theta of the dynamic
extension (plus landmarks when unknown), under the constraint that the
estimated gravity block equals Q_c' g.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ..errors import RankDeficientError
from ..gn import GaussNewtonLog, gauss_newton, jacobian_nullspace_dim
from ..grid import TimeGrid
from ..lsq import solve_stacked
from ..ltv import psd_factor
from ..so3 import hat, project_so3, so3_exp
from .extension import ManifoldPeboExtension, reconstruct_manifold_state
from .kinematics import GRAVITY, PoseTrajectory, PreintegralSO3

_E = [hat(e) for e in np.eye(3)]  # so(3) basis


@dataclass(frozen=True)
class LandmarkMeasurements:
    """Body-frame landmark observations at a subset of keyframes.

    ``slots`` are positions into the grid's keyframe list; ``y`` holds one
    3-vector per (slot, landmark).
    """

    grid: TimeGrid
    slots: tuple[int, ...]
    y: np.ndarray        # (n_slots, n_landmarks, 3)
    sigma_y: np.ndarray  # (3, 3) per-observation noise covariance
    seed: int | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim != 3 or y.shape[0] != len(self.slots) or y.shape[2] != 3:
            raise ValueError("y must have shape (n_slots, n_landmarks, 3)")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "slots", tuple(int(s) for s in self.slots))
        object.__setattr__(self, "sigma_y", np.atleast_2d(np.asarray(self.sigma_y, dtype=float)))

    @property
    def n_landmarks(self) -> int:
        return self.y.shape[1]

    def keyframe_indices(self) -> list[int]:
        kf = self.grid.keyframe_indices
        return [kf[s] for s in self.slots]


def default_measurement_slots(grid: TimeGrid) -> tuple[int, ...]:
    """All keyframes except the final one (the single keyframe when K = 1)."""
    K = grid.n_keyframes
    return tuple(range(max(K - 1, 1)))


def sample_landmarks(
    truth: PoseTrajectory, landmarks, sigma_y, seed: int, slots=None
) -> LandmarkMeasurements:
    """Draw noisy body-frame landmark observations from a truth trajectory."""
    grid = truth.grid
    slots = default_measurement_slots(grid) if slots is None else tuple(slots)
    landmarks = np.asarray(landmarks, dtype=float).reshape(-1, 3)
    Ly = psd_factor(np.atleast_2d(np.asarray(sigma_y, dtype=float)) * np.eye(3), "sigma_y")
    rng = np.random.default_rng(seed)
    kf = grid.keyframe_indices
    y = np.empty((len(slots), len(landmarks), 3))
    for s_pos, s in enumerate(slots):
        i = kf[s]
        y[s_pos] = (landmarks - truth.p[i]) @ truth.R[i]  # row-wise R^T (p_i - p)
    y += rng.standard_normal(y.shape) @ Ly.T
    return LandmarkMeasurements(
        grid=grid, slots=slots, y=y,
        sigma_y=np.atleast_2d(np.asarray(sigma_y, dtype=float)) * np.eye(3), seed=seed,
    )


def best_fit_rotation(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Rotation U minimizing sum ||dst_j - U src_j||^2 (Wahba/Procrustes).

    Closed form via the SVD of the cross-covariance, with the usual
    determinant correction to stay in SO(3).
    """
    src = np.asarray(src, dtype=float).reshape(-1, 3)
    dst = np.asarray(dst, dtype=float).reshape(-1, 3)
    H = src.T @ dst  # tr(U H) is the alignment score
    A, s, Bt = np.linalg.svd(H)
    if s[1] <= 1e-12 * max(s[0], 1.0):
        raise RankDeficientError(1, "point sets are degenerate (collinear)")
    U = Bt.T @ A.T
    if np.linalg.det(U) < 0:
        U = Bt.T @ np.diag([1.0, 1.0, -1.0]) @ A.T
    return U


def pose_from_landmarks(y_slot: np.ndarray, landmarks: np.ndarray):
    """(R, p) best explaining y_i = R'(p_i - p) for known landmarks.

    Requires at least three non-collinear landmarks.
    """
    y_slot = np.asarray(y_slot, dtype=float).reshape(-1, 3)
    landmarks = np.asarray(landmarks, dtype=float).reshape(-1, 3)
    y_c = y_slot - y_slot.mean(axis=0)
    p_c = landmarks - landmarks.mean(axis=0)
    U = best_fit_rotation(p_c, y_c)  # y_c ~= U p_c with U = R'
    R = U.T
    p = landmarks.mean(axis=0) - R @ y_slot.mean(axis=0)
    return R, p


@dataclass(frozen=True)
class ManifoldEstimate:
    """PEBO solution: constant frame, theta, landmarks, reconstructed poses."""

    Q_c: np.ndarray        # (3, 3)
    theta: np.ndarray      # (9,) = (v_B(t0), p_B(t0), g_c)
    landmarks: np.ndarray  # (n_landmarks, 3)
    times: np.ndarray      # keyframe times
    R: np.ndarray          # (K, 3, 3)
    v: np.ndarray          # (K, 3)
    p: np.ndarray          # (K, 3)
    cost: float
    log: GaussNewtonLog


@dataclass(frozen=True)
class KeyframeEstimate:
    """Preintegration-batch solution over keyframe states."""

    times: np.ndarray
    R: np.ndarray          # (K, 3, 3)
    v: np.ndarray
    p: np.ndarray
    landmarks: np.ndarray
    cost: float
    log: GaussNewtonLog


def _whitener(sigma) -> np.ndarray:
    """L^-1 with sigma = L L'; residuals are whitened as L^-1 r.

    A zero covariance (noise-free data) falls back to unit weights; a
    singular one is regularized.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if sigma.shape == (1, 1):
        sigma = sigma[0, 0] * np.eye(3)
    if np.max(np.abs(sigma)) == 0.0:
        return np.eye(3)
    try:
        L = np.linalg.cholesky(0.5 * (sigma + sigma.T))
    except np.linalg.LinAlgError:
        L = np.linalg.cholesky(0.5 * (sigma + sigma.T) + 1e-12 * np.eye(3))
    return scipy.linalg.solve_triangular(L, np.eye(3), lower=True)


def _is_isotropic(sigma) -> bool:
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if sigma.shape == (1, 1):
        return True
    return np.allclose(sigma, sigma[0, 0] * np.eye(3), rtol=1e-12, atol=0.0)


# ---------------------------------------------------------------------------
# PEBO solver
# ---------------------------------------------------------------------------


class _PeboProblem:
    """Shared tables for the manifold PEBO cost at measurement slots."""

    def __init__(self, ext: ManifoldPeboExtension, meas: LandmarkMeasurements, sigma_y=None):
        if meas.grid is not ext.grid and meas.grid != ext.grid:
            raise ValueError("measurements and extension use different grids")
        idx = meas.keyframe_indices()
        self.Q_k = ext.Q[idx]                      # (S, 3, 3)
        c = ext.xi[idx] - np.einsum("kij,j->ki", ext.Omega[idx], ext.xi0)
        self.c2 = c[:, 3:6]                        # (S, 3)
        self.M2 = ext.Omega[idx][:, 3:6, :]        # (S, 3, 9)
        self.y = meas.y                            # (S, L, 3)
        self.g = ext.gravity
        self.Wy = _whitener(meas.sigma_y if sigma_y is None else sigma_y)
        self.S, self.L = meas.y.shape[:2]

    def theta9(self, Q_c, theta6):
        return np.concatenate([theta6, Q_c.T @ self.g])

    def residual(self, Q_c, theta6, landmarks) -> np.ndarray:
        th = self.theta9(Q_c, theta6)
        p_body = self.c2 + np.einsum("kij,j->ki", self.M2, th)   # (S, 3)
        q = landmarks @ Q_c                                       # rows are Q_c' p_i
        r = np.empty((self.S, self.L, 3))
        for s in range(self.S):
            h = q @ self.Q_k[s] - p_body[s]                       # rows are Q_k' q_i - p_B
            r[s] = (self.y[s] - h) @ self.Wy.T
        return r.ravel()

    def cost(self, Q_c, theta6, landmarks) -> float:
        r = self.residual(Q_c, theta6, landmarks)
        return float(r @ r)


def solve_manifold_pebo(
    ext: ManifoldPeboExtension,
    meas: LandmarkMeasurements,
    landmarks=None,
    *,
    sigma_y=None,
    init=None,
    max_iter: int = 100,
    rel_tol: float = 1e-10,
) -> ManifoldEstimate:
    """Estimate (Q_c, theta, landmarks) subject to g_c = Q_c' g.

    With known landmarks (``landmarks`` given) the problem alternates a
    closed-form orthogonal-Procrustes solve for Q_c with a linear
    least-squares solve for theta. With unknown landmarks it runs damped
    Gauss-Newton over (Q_c, theta, landmarks) with a 3-parameter local
    rotation update, initialized from the linear relaxation in which the
    rotated landmarks and the gravity block are free.

    ``sigma_y`` overrides the landmark weight covariance (the measurement
    set's own sigma_y is the default). ``init`` may supply a starting
    point: (Q_c, theta) for known landmarks, (Q_c, theta, landmarks)
    otherwise. With max_iter = 0 the estimate is evaluated at the initial
    point without refinement.
    """
    prob = _PeboProblem(ext, meas, sigma_y=sigma_y)
    if landmarks is not None:
        if not _is_isotropic(meas.sigma_y):
            warnings.warn(
                "known-landmark alternation assumes isotropic landmark noise; "
                "the Procrustes step ignores the anisotropy",
                RuntimeWarning,
            )
        Q_c, theta6, lms, log = _pebo_known_landmarks(
            prob, np.asarray(landmarks, dtype=float).reshape(-1, 3),
            init=init, max_iter=max_iter, rel_tol=rel_tol,
        )
    else:
        Q_c, theta6, lms, log = _pebo_unknown_landmarks(
            prob, init=init, max_iter=max_iter, rel_tol=rel_tol,
        )
    theta = prob.theta9(Q_c, theta6)
    rec = reconstruct_manifold_state(ext, Q_c, theta)
    return ManifoldEstimate(
        Q_c=Q_c, theta=theta, landmarks=lms,
        times=rec.times, R=rec.R, v=rec.v, p=rec.p,
        cost=prob.cost(Q_c, theta6, lms), log=log,
    )


def _pebo_theta_step(prob: _PeboProblem, Q_c, landmarks) -> np.ndarray:
    """Linear least squares for theta6 with the gravity block pinned to Q_c' g."""
    g_c = Q_c.T @ prob.g
    rows_A = np.empty((prob.S, prob.L, 3, 6))
    rows_b = np.empty((prob.S, prob.L, 3))
    q = landmarks @ Q_c
    for s in range(prob.S):
        target = q @ prob.Q_k[s] - prob.y[s] - prob.c2[s] - prob.M2[s][:, 6:9] @ g_c
        rows_b[s] = target @ prob.Wy.T
        rows_A[s] = np.broadcast_to(prob.Wy @ prob.M2[s][:, 0:6], (prob.L, 3, 6))
    return solve_stacked(
        rows_A.reshape(-1, 6), rows_b.ravel(), label="manifold theta regression"
    )


def _pebo_known_landmarks(prob, landmarks, *, init, max_iter, rel_tol):
    if init is not None:
        Q_c = np.asarray(init[0], dtype=float)
        theta6 = np.asarray(init[1], dtype=float).reshape(9)[0:6].copy()
    else:
        frames = []
        for s in range(prob.S):
            R_s, _ = pose_from_landmarks(prob.y[s], landmarks)
            frames.append(R_s @ prob.Q_k[s].T)
        Q_c = project_so3(np.mean(frames, axis=0))
        theta6 = _pebo_theta_step(prob, Q_c, landmarks)

    log = GaussNewtonLog(costs=[prob.cost(Q_c, theta6, landmarks)])
    src = np.tile(landmarks, (prob.S, 1))
    for it in range(max_iter):
        # (a) Procrustes step for Q_c at frozen theta
        th = prob.theta9(Q_c, theta6)
        p_body = prob.c2 + np.einsum("kij,j->ki", prob.M2, th)
        dst = np.vstack([(prob.y[s] + p_body[s]) @ prob.Q_k[s].T for s in range(prob.S)])
        U = best_fit_rotation(src, dst)   # dst ~= U src with U = Q_c'
        Q_c = U.T
        # (b) linear solve for theta at the new Q_c
        theta6 = _pebo_theta_step(prob, Q_c, landmarks)
        cost = prob.cost(Q_c, theta6, landmarks)
        log.costs.append(cost)
        log.n_iter = it + 1
        prev = log.costs[-2]
        # relative decrease with an absolute floor so zero-residual
        # problems terminate once at the rounding noise level
        if abs(prev - cost) <= rel_tol * (prev + 1.0):
            log.converged = True
            break
    if max_iter > 0:
        # the alternation converges only linearly near the minimum; a short
        # damped Gauss-Newton polish over (Q_c, theta) sharpens it
        Q_c, theta6, log = _pebo_known_polish(
            prob, Q_c, theta6, landmarks, log, max_iter=max_iter, rel_tol=rel_tol
        )
    return Q_c, theta6, landmarks, log


def _pebo_known_polish(prob, Q_c, theta6, landmarks, log, *, max_iter, rel_tol):
    landmarks = np.asarray(landmarks, dtype=float)
    residual_full, jacobian_full, _, _ = _pebo_functions(prob)

    def residual(state):
        return residual_full((state[0], state[1], landmarks))

    def jacobian(state):
        return jacobian_full((state[0], state[1], landmarks))[:, 0:9]

    def apply_step(state, delta):
        return (state[0] @ so3_exp(delta[0:3]), state[1] + delta[3:9])

    state, polish_log = gauss_newton(
        residual, jacobian, (Q_c, theta6), apply_step, max_iter=max_iter, rel_tol=rel_tol
    )
    log.costs.extend(polish_log.costs[1:])
    log.n_iter += polish_log.n_iter
    log.converged = polish_log.converged
    return state[0], state[1], log


def _rotation_between(a, b) -> np.ndarray:
    """Minimal rotation taking direction a to direction b."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    c = np.cross(a, b)
    d = float(a @ b)
    if np.linalg.norm(c) < 1e-12:
        if d > 0:
            return np.eye(3)
        # antipodal: rotate by pi about any axis orthogonal to a
        axis = np.cross(a, np.array([1.0, 0.0, 0.0]))
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, np.array([0.0, 1.0, 0.0]))
        axis /= np.linalg.norm(axis)
        return so3_exp(np.pi * axis)
    angle = np.arctan2(np.linalg.norm(c), d)
    return so3_exp(angle * c / np.linalg.norm(c))


def _pebo_linear_relaxation(prob: _PeboProblem):
    """Free-gravity, rotated-landmark linear least squares used as a GN start.

    Unknowns: theta (gravity block unconstrained) and q_i = Q_c' p_i. The
    residual is affine in these, so one orthogonal-factorization solve
    gives the relaxed optimum; Q_c is then a rotation mapping the
    estimated gravity block to g, and landmarks follow as p_i = Q_c q_i.
    The relaxation is rank deficient exactly in the directions the full
    problem leaves unobservable, so the minimum-norm solution is used.
    """
    S, L = prob.S, prob.L
    n_cols = 9 + 3 * L
    A = np.zeros((S * L * 3, n_cols))
    b = np.zeros(S * L * 3)
    row = 0
    for s in range(S):
        WM2 = prob.Wy @ prob.M2[s]
        WQt = prob.Wy @ prob.Q_k[s].T
        for i in range(L):
            A[row:row + 3, 0:9] = WM2
            A[row:row + 3, 9 + 3 * i:12 + 3 * i] = -WQt
            b[row:row + 3] = prob.Wy @ (prob.y[s, i] + prob.c2[s])
            row += 3
    # model: Wy (y + c2) + A z = residual -> minimize ||A z - (-b)||
    z = solve_stacked(A, -b, allow_deficient=True, label="pebo linear relaxation")
    theta9 = z[0:9]
    q = z[9:].reshape(L, 3)
    g_c = theta9[6:9]
    norm = np.linalg.norm(g_c)
    if norm < 1e-9:
        Q_c = np.eye(3)
    else:
        Q_c = _rotation_between(g_c * (np.linalg.norm(prob.g) / norm), prob.g)
    return Q_c, theta9[0:6].copy(), q @ Q_c.T  # p_i = Q_c q_i


def _pebo_functions(prob: _PeboProblem):
    """(residual, jacobian, apply_step, n_par) closures for the unknown-landmark cost."""
    S, L = prob.S, prob.L
    n_par = 9 + 3 * L

    def residual(state):
        return prob.residual(*state)

    def jacobian(state):
        Q_c, theta6, lms = state
        g_c = Q_c.T @ prob.g
        J = np.zeros((S * L * 3, n_par))
        row = 0
        for s in range(S):
            WQt = prob.Wy @ prob.Q_k[s].T
            WM2g_hatg = prob.Wy @ prob.M2[s][:, 6:9] @ hat(g_c)
            WM2v = prob.Wy @ prob.M2[s][:, 0:6]
            for i in range(L):
                q_i = Q_c.T @ lms[i]
                J[row:row + 3, 0:3] = -WQt @ hat(q_i) + WM2g_hatg
                J[row:row + 3, 3:9] = WM2v
                J[row:row + 3, 9 + 3 * i:12 + 3 * i] = -WQt @ Q_c.T
                row += 3
        return J

    def apply_step(state, delta):
        Q_c, theta6, lms = state
        return (
            Q_c @ so3_exp(delta[0:3]),
            theta6 + delta[3:9],
            lms + delta[9:].reshape(L, 3),
        )

    return residual, jacobian, apply_step, n_par


def _pebo_unknown_landmarks(prob, *, init, max_iter, rel_tol):
    if init is not None:
        Q_c0 = np.asarray(init[0], dtype=float)
        theta60 = np.asarray(init[1], dtype=float).reshape(9)[0:6].copy()
        lms0 = np.asarray(init[2], dtype=float).reshape(-1, 3).copy()
    else:
        Q_c0, theta60, lms0 = _pebo_linear_relaxation(prob)
    state0 = (Q_c0, theta60, lms0)
    if max_iter == 0:
        return Q_c0, theta60, lms0, GaussNewtonLog(costs=[prob.cost(*state0)])

    residual, jacobian, apply_step, _ = _pebo_functions(prob)
    state, log = gauss_newton(
        residual, jacobian, state0, apply_step, max_iter=max_iter, rel_tol=rel_tol
    )
    log.nullspace_dim = jacobian_nullspace_dim(jacobian(state))
    return state[0], state[1], state[2], log


# ---------------------------------------------------------------------------
# Preintegration batch solver
# ---------------------------------------------------------------------------


class _BatchTables:
    """Whitened weights, interval data and measurement layout for the batch cost."""

    def __init__(self, preintegrals, meas, sigma_y, sigma_R, sigma_v, sigma_p, gravity):
        self.grid = meas.grid
        self.K = self.grid.n_keyframes
        if len(preintegrals) != self.K - 1:
            raise ValueError(
                f"{len(preintegrals)} preintegrals do not cover {self.K} keyframes"
            )
        self.pre = list(preintegrals)
        self.slots = meas.slots
        self.y = meas.y
        self.L = meas.n_landmarks
        self.g = np.asarray(gravity, dtype=float).reshape(3)
        self.Wy = _whitener(meas.sigma_y if sigma_y is None else sigma_y)
        self.W1 = _whitener(sigma_R)
        self.W2 = _whitener(sigma_v)
        self.W3 = _whitener(sigma_p)
        self.dts = np.array([p.dt for p in self.pre])
        self.n_interval_rows = 15 * (self.K - 1)
        self.n_rows = self.n_interval_rows + 3 * self.L * len(self.slots)

    def landmark_residuals(self, R, p, lms, out):
        row = 0
        for s_pos, s in enumerate(self.slots):
            h = (lms - p[s]) @ R[s]
            out[row:row + 3 * self.L] = ((self.y[s_pos] - h) @ self.Wy.T).ravel()
            row += 3 * self.L
        return out


def solve_manifold_preintegration(
    preintegrals: list[PreintegralSO3],
    meas: LandmarkMeasurements,
    sigma_R=1e-6,
    sigma_v=1e-6,
    sigma_p=1e-6,
    *,
    sigma_y=None,
    landmarks=None,
    hard: bool = False,
    gravity=GRAVITY,
    init=None,
    max_iter: int = 100,
    rel_tol: float = 1e-10,
) -> KeyframeEstimate:
    """Batch estimate of keyframe poses (and landmarks) from preintegrals.

    Minimizes the sum over intervals of the landmark term plus three
    propagation terms weighted by the inverses of sigma_R, sigma_v and
    sigma_p: the rotation residual R_{k+1} - R_k DeltaR in (weighted)
    Frobenius norm, and the velocity/position recursion residuals. Damped
    Gauss-Newton with a 3-parameter local update per keyframe rotation.

    hard=True replaces the propagation penalties with exact recursion: all
    keyframe states are eliminated in favor of the initial one and only
    landmark terms remain.

    ``landmarks`` fixes known landmark positions; otherwise they are
    estimated (supply ``init`` or rely on the known-landmark-style
    initialization). ``init`` may give (R, v, p [, landmarks]) stacked
    over keyframes for the soft mode, or (R0, v0, p0 [, landmarks]) in
    hard mode.
    """
    tab = _BatchTables(preintegrals, meas, sigma_y, sigma_R, sigma_v, sigma_p, gravity)
    if hard:
        return _batch_hard(tab, landmarks, init, max_iter, rel_tol)
    return _batch_soft(tab, landmarks, init, max_iter, rel_tol)


def _chain_tables(tab: _BatchTables):
    """Per-keyframe chains for the hard recursion.

    G_k = DeltaR_0 ... DeltaR_{k-1};  tau_k = t_k - t_0
    s_v_k = sum_{j<k} G_j Dv_j                (v_k = v0 + R0 s_v_k + tau_k g)
    s_p_k = sum_{j<k} (dt_j s_v_j + G_j Dp_j) (p_k = p0 + tau_k v0 + R0 s_p_k + c_p_k g)
    """
    K = tab.K
    G = np.empty((K, 3, 3))
    s_v = np.zeros((K, 3))
    s_p = np.zeros((K, 3))
    tau = np.zeros(K)
    c_p = np.zeros(K)
    G[0] = np.eye(3)
    for k, pre in enumerate(tab.pre):
        dt = pre.dt
        G[k + 1] = G[k] @ pre.DR
        s_v[k + 1] = s_v[k] + G[k] @ pre.Dv
        s_p[k + 1] = s_p[k] + dt * s_v[k] + G[k] @ pre.Dp
        c_p[k + 1] = c_p[k] + dt * tau[k] + 0.5 * dt * dt
        tau[k + 1] = tau[k] + dt
    return G, s_v, s_p, tau, c_p


def _hard_poses(x0, G, s_v, s_p, tau, c_p, g):
    R0, v0, p0 = x0
    R = np.einsum("ij,kjl->kil", R0, G)
    v = v0[None, :] + np.einsum("ij,kj->ki", R0, s_v) + tau[:, None] * g[None, :]
    p = (
        p0[None, :]
        + tau[:, None] * v0[None, :]
        + np.einsum("ij,kj->ki", R0, s_p)
        + c_p[:, None] * g[None, :]
    )
    return R, v, p


def _init_poses_from_landmarks(tab: _BatchTables, lms: np.ndarray):
    """Per-slot pose solves chained through unmeasured keyframes."""
    measured = {s: pos for pos, s in enumerate(tab.slots)}
    if 0 not in measured:
        raise ValueError("automatic initialization needs a measurement at the first keyframe")
    K = tab.K
    R = np.empty((K, 3, 3))
    v = np.zeros((K, 3))
    p = np.empty((K, 3))
    for k in range(K):
        if k in measured:
            R[k], p[k] = pose_from_landmarks(tab.y[measured[k]], lms)
        else:
            pre = tab.pre[k - 1]
            R[k] = project_so3(R[k - 1] @ pre.DR)
            p[k] = (
                p[k - 1] + pre.dt * v[k - 1] + 0.5 * pre.dt**2 * tab.g + R[k - 1] @ pre.Dp
            )
        if k >= 1:
            pre = tab.pre[k - 1]
            # invert the position recursion for the previous velocity
            v[k - 1] = (p[k] - p[k - 1] - 0.5 * pre.dt**2 * tab.g - R[k - 1] @ pre.Dp) / pre.dt
            v[k] = v[k - 1] + R[k - 1] @ pre.Dv + pre.dt * tab.g
    return R, v, p


def _soft_functions(tab: _BatchTables, known: bool):
    """(residual, jacobian, apply_step, n_par) closures for the soft batch cost."""
    K, L = tab.K, tab.L
    n_par = 9 * K + (0 if known else 3 * L)

    def residual(state):
        R, v, p, lms = state
        out = np.empty(tab.n_rows)
        row = 0
        for k, pre in enumerate(tab.pre):
            dt = pre.dt
            out[row:row + 9] = (tab.W1 @ (R[k + 1] - R[k] @ pre.DR)).ravel()
            out[row + 9:row + 12] = tab.W2 @ (v[k] + R[k] @ pre.Dv + dt * tab.g - v[k + 1])
            out[row + 12:row + 15] = tab.W3 @ (
                p[k] + dt * v[k] + 0.5 * dt * dt * tab.g + R[k] @ pre.Dp - p[k + 1]
            )
            row += 15
        tab.landmark_residuals(R, p, lms, out[row:])
        return out

    def jacobian(state):
        R, v, p, lms = state
        J = np.zeros((tab.n_rows, n_par))
        row = 0

        def cphi(k):
            return slice(9 * k, 9 * k + 3)

        def cv(k):
            return slice(9 * k + 3, 9 * k + 6)

        def cp(k):
            return slice(9 * k + 6, 9 * k + 9)

        for k, pre in enumerate(tab.pre):
            dt = pre.dt
            # rotation rows: d vec(W1 (R_{k+1} - R_k DR)) / d phi
            for j in range(3):
                J[row:row + 9, 9 * (k + 1) + j] = (tab.W1 @ (R[k + 1] @ _E[j])).ravel()
                J[row:row + 9, 9 * k + j] = -(tab.W1 @ (R[k] @ _E[j] @ pre.DR)).ravel()
            # velocity rows
            J[row + 9:row + 12, cphi(k)] = -tab.W2 @ R[k] @ hat(pre.Dv)
            J[row + 9:row + 12, cv(k)] = tab.W2
            J[row + 9:row + 12, cv(k + 1)] = -tab.W2
            # position rows
            J[row + 12:row + 15, cphi(k)] = -tab.W3 @ R[k] @ hat(pre.Dp)
            J[row + 12:row + 15, cv(k)] = dt * tab.W3
            J[row + 12:row + 15, cp(k)] = tab.W3
            J[row + 12:row + 15, cp(k + 1)] = -tab.W3
            row += 15

        WyT = tab.Wy
        for s_pos, s in enumerate(tab.slots):
            Rt = R[s].T
            for i in range(L):
                b = Rt @ (lms[i] - p[s])
                J[row:row + 3, cphi(s)] = -WyT @ hat(b)
                J[row:row + 3, cp(s)] = WyT @ Rt
                if not known:
                    J[row:row + 3, 9 * K + 3 * i:9 * K + 3 * i + 3] = -WyT @ Rt
                row += 3
        return J

    def apply_step(state, delta):
        R, v, p, lms = state
        R_new = np.empty_like(R)
        v_new = v.copy()
        p_new = p.copy()
        for k in range(K):
            R_new[k] = R[k] @ so3_exp(delta[9 * k:9 * k + 3])
            v_new[k] += delta[9 * k + 3:9 * k + 6]
            p_new[k] += delta[9 * k + 6:9 * k + 9]
        lms_new = lms if known else lms + delta[9 * K:].reshape(L, 3)
        return (R_new, v_new, p_new, lms_new)

    return residual, jacobian, apply_step, n_par


def _batch_soft(tab: _BatchTables, landmarks, init, max_iter, rel_tol):
    known = landmarks is not None
    if known:
        lms0 = np.asarray(landmarks, dtype=float).reshape(-1, 3)

    if init is not None:
        R0 = np.array(init[0], dtype=float)
        v0 = np.array(init[1], dtype=float)
        p0 = np.array(init[2], dtype=float)
        lms_init = lms0 if known else np.array(init[3], dtype=float).reshape(-1, 3)
    elif known:
        R0, v0, p0 = _init_poses_from_landmarks(tab, lms0)
        lms_init = lms0
    else:
        raise ValueError("unknown-landmark batch needs an explicit init")
    state0 = (R0, v0, p0, lms_init)

    residual, jacobian, apply_step, _ = _soft_functions(tab, known)
    state, log = gauss_newton(
        residual, jacobian, state0, apply_step, max_iter=max_iter, rel_tol=rel_tol
    )
    log.nullspace_dim = jacobian_nullspace_dim(jacobian(state))
    R, v, p, lms = state
    r = residual(state)
    return KeyframeEstimate(
        times=tab.grid.keyframe_times(), R=R, v=v, p=p, landmarks=lms,
        cost=float(r @ r), log=log,
    )


def _hard_functions(tab: _BatchTables, known: bool):
    """(residual, jacobian, apply_step, n_par) closures for the hard-mode cost."""
    L = tab.L
    n_par = 9 + (0 if known else 3 * L)
    G, s_v, s_p, tau, c_p = _chain_tables(tab)

    def poses(state):
        return _hard_poses((state[0], state[1], state[2]), G, s_v, s_p, tau, c_p, tab.g)

    def residual(state):
        R, v, p = poses(state)
        out = np.empty(3 * L * len(tab.slots))
        tab.landmark_residuals(R, p, state[3], out)
        return out

    def jacobian(state):
        R0, v0, p0, lms = state
        R, v, p = poses(state)
        J = np.zeros((3 * L * len(tab.slots), n_par))
        row = 0
        for s_pos, s in enumerate(tab.slots):
            Rt = R[s].T
            dp_dphi = -R0 @ hat(s_p[s])            # d p_s / d phi0
            for i in range(L):
                b = Rt @ (lms[i] - p[s])
                J[row:row + 3, 0:3] = tab.Wy @ (-hat(b) @ G[s].T + Rt @ dp_dphi)
                J[row:row + 3, 3:6] = tab.Wy @ (tau[s] * Rt)
                J[row:row + 3, 6:9] = tab.Wy @ Rt
                if not known:
                    J[row:row + 3, 9 + 3 * i:12 + 3 * i] = -tab.Wy @ Rt
                row += 3
        return J

    def apply_step(state, delta):
        R0, v0, p0, lms = state
        lms_new = lms if known else lms + delta[9:].reshape(L, 3)
        return (R0 @ so3_exp(delta[0:3]), v0 + delta[3:6], p0 + delta[6:9], lms_new)

    return residual, jacobian, apply_step, n_par, poses


def _batch_hard(tab: _BatchTables, landmarks, init, max_iter, rel_tol):
    known = landmarks is not None
    if known:
        lms0 = np.asarray(landmarks, dtype=float).reshape(-1, 3)

    if init is not None:
        x0 = (np.array(init[0], dtype=float), np.array(init[1], dtype=float),
              np.array(init[2], dtype=float))
        lms_init = lms0 if known else np.array(init[3], dtype=float).reshape(-1, 3)
    elif known:
        R_all, v_all, p_all = _init_poses_from_landmarks(tab, lms0)
        x0 = (R_all[0], v_all[0], p_all[0])
        lms_init = lms0
    else:
        raise ValueError("unknown-landmark batch needs an explicit init")
    state0 = (x0[0], x0[1], x0[2], lms_init)

    residual, jacobian, apply_step, _, poses = _hard_functions(tab, known)
    state, log = gauss_newton(
        residual, jacobian, state0, apply_step, max_iter=max_iter, rel_tol=rel_tol
    )
    log.nullspace_dim = jacobian_nullspace_dim(jacobian(state))
    R, v, p = poses(state)
    r = residual(state)
    return KeyframeEstimate(
        times=tab.grid.keyframe_times(), R=R, v=v, p=p, landmarks=state[3],
        cost=float(r @ r), log=log,
    )
