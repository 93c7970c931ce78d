"""Preintegration of LTV dynamics over keyframe intervals and batch estimation.

Each keyframe interval [t_k, t_{k+1}] is summarized by a pair (F_k, v_k)
such that x(t_{k+1}) = F_k x(t_k) + v_k: F_k is the state transition over
the interval and v_k the accumulated forced response, both computed from
measured signals alone, with no reference to any state estimate. The batch
problem fits the keyframe states to the low-rate outputs subject to these
interval relations, either softly (penalized residuals w_k) or as hard
constraints (which collapses everything onto the initial state).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import TimeGrid
from .lsq import solve_stacked
from .ltv import LtvModel, MeasurementSet, SignalTrajectory


@dataclass(frozen=True)
class PreintegralSegment:
    """Transition F and forced response v over one keyframe interval."""

    k: int
    F: np.ndarray       # (n, n)
    v: np.ndarray       # (n,)
    t_start: float
    t_end: float

    @property
    def dt(self) -> float:
        return self.t_end - self.t_start


@dataclass(frozen=True)
class BatchEstimate:
    """Solution of the batch problem over keyframes t_0..t_N."""

    times: np.ndarray    # (N+1,)
    x_hat: np.ndarray    # (N+1, n)
    w_hat: np.ndarray    # (N, n) interval residuals
    cost: float


def preintegrate_segment(
    model: LtvModel, u_bar: SignalTrajectory, t_start: float, t_end: float, k: int = 0
) -> PreintegralSegment:
    """Integrate F' = A F from I and v' = A v + B u from 0 over [t_start, t_end].

    The pair is integrated jointly in one pass so F and v see identical
    Runge-Kutta steps; both are evaluated at the right end of the interval.
    """
    grid = u_bar.grid
    i0, i1 = grid.index_of(t_start), grid.index_of(t_end)
    if i1 <= i0:
        raise ValueError(f"segment [{t_start}, {t_end}] is empty or reversed")
    flow = model.flow(grid)
    n = model.n
    X0 = np.hstack([np.eye(n), np.zeros((n, 1))])
    forcing = np.zeros((2 * grid.n_steps + 1, n, n + 1))
    forcing[:, :, n] = flow.forcing_from_input(u_bar)
    Xend = flow.propagate(X0, i0, i1, forcing=forcing, record="last")[0]
    return PreintegralSegment(k=k, F=Xend[:, :n], v=Xend[:, n], t_start=t_start, t_end=t_end)


def preintegrate_all(model: LtvModel, u_bar: SignalTrajectory, grid: TimeGrid) -> list[PreintegralSegment]:
    """Segments for every consecutive keyframe interval of ``grid``."""
    kf = grid.keyframe_indices
    if len(kf) < 2:
        return []
    segs = []
    for k in range(len(kf) - 1):
        segs.append(
            preintegrate_segment(model, u_bar, grid.time_of(kf[k]), grid.time_of(kf[k + 1]), k=k)
        )
    return segs


def _measurement_rows(model: LtvModel, measurements: MeasurementSet, n_used: int):
    """C_k, D_k, y residual targets for the first ``n_used`` keyframes."""
    grid = measurements.grid
    t_k = grid.keyframe_times()[:n_used]
    kf = list(grid.keyframe_indices)[:n_used]
    C_k = model.C(t_k)
    D_k = model.D(t_k)
    u_k = measurements.u_bar.values[kf]
    rhs = measurements.y_bar[:n_used] - np.einsum("kij,kj->ki", D_k, u_k)
    return C_k, rhs


def solve_batch(
    segments: list[PreintegralSegment],
    measurements: MeasurementSet,
    model: LtvModel,
    gammas,
    gamma_ws,
    *,
    allow_deficient: bool = False,
) -> BatchEstimate:
    """Penalized batch estimate over all keyframe states.

    Minimizes sum_k gamma_k |y_k - C_k x_k - D_k u_k|^2
           + sum_k gamma'_k |x_{k+1} - F_k x_k - v_k|^2
    over x_0..x_N, with k running over the N intervals; the output at the
    final keyframe is deliberately not used. The problem is linear
    quadratic and solved exactly as one stacked least-squares system.
    """
    N = len(segments)
    if N == 0:
        raise ValueError("need at least one segment")
    n = model.n
    gammas = np.broadcast_to(np.asarray(gammas, dtype=float), (N,))
    gamma_ws = np.broadcast_to(np.asarray(gamma_ws, dtype=float), (N,))
    if np.any(gammas <= 0) or np.any(gamma_ws <= 0):
        raise ValueError("weights must be positive")

    C_k, y_rhs = _measurement_rows(model, measurements, N)
    p = C_k.shape[1]
    rows = N * p + N * n
    cols = (N + 1) * n
    A = np.zeros((rows, cols))
    b = np.zeros(rows)
    for k in range(N):
        sg = np.sqrt(gammas[k])
        A[k * p:(k + 1) * p, k * n:(k + 1) * n] = sg * C_k[k]
        b[k * p:(k + 1) * p] = sg * y_rhs[k]
    base = N * p
    for k, seg in enumerate(segments):
        sw = np.sqrt(gamma_ws[k])
        r = slice(base + k * n, base + (k + 1) * n)
        A[r, k * n:(k + 1) * n] = -sw * seg.F
        A[r, (k + 1) * n:(k + 2) * n] = sw * np.eye(n)
        b[r] = sw * seg.v

    z = solve_stacked(A, b, allow_deficient=allow_deficient, label="batch estimation")
    x_hat = z.reshape(N + 1, n)
    w_hat = np.stack([x_hat[k + 1] - segments[k].F @ x_hat[k] - segments[k].v for k in range(N)])
    cost = float(
        np.sum(gammas * np.sum((y_rhs - np.einsum("kij,kj->ki", C_k, x_hat[:N])) ** 2, axis=1))
        + np.sum(gamma_ws * np.sum(w_hat**2, axis=1))
    )
    times = np.array([segments[0].t_start] + [s.t_end for s in segments])
    return BatchEstimate(times=times, x_hat=x_hat, w_hat=w_hat, cost=cost)


def solve_batch_hard(
    segments: list[PreintegralSegment],
    measurements: MeasurementSet,
    model: LtvModel,
    gammas,
    *,
    allow_deficient: bool = False,
) -> BatchEstimate:
    """Batch estimate with the interval relations enforced exactly.

    With w_k = 0 every keyframe state is determined by the initial one
    through x_k = Phi_k x_0 + s_k (Phi_k the product of the F's, s_k the
    accumulated v's), so the problem reduces to an n-dimensional least
    squares in x_0. The full trajectory is reconstructed afterwards.
    """
    N = len(segments)
    if N == 0:
        raise ValueError("need at least one segment")
    n = model.n
    gammas = np.broadcast_to(np.asarray(gammas, dtype=float), (N,))
    if np.any(gammas <= 0):
        raise ValueError("weights must be positive")

    Phi = np.empty((N + 1, n, n))
    s = np.empty((N + 1, n))
    Phi[0] = np.eye(n)
    s[0] = 0.0
    for k, seg in enumerate(segments):
        Phi[k + 1] = seg.F @ Phi[k]
        s[k + 1] = seg.F @ s[k] + seg.v

    C_k, y_rhs = _measurement_rows(model, measurements, N)
    p = C_k.shape[1]
    A = np.zeros((N * p, n))
    b = np.zeros(N * p)
    for k in range(N):
        sg = np.sqrt(gammas[k])
        A[k * p:(k + 1) * p] = sg * (C_k[k] @ Phi[k])
        b[k * p:(k + 1) * p] = sg * (y_rhs[k] - C_k[k] @ s[k])

    x0 = solve_stacked(A, b, allow_deficient=allow_deficient, label="hard-constrained batch")
    x_hat = np.einsum("kij,j->ki", Phi, x0) + s
    cost = float(
        np.sum(gammas * np.sum((y_rhs - np.einsum("kij,kj->ki", C_k, x_hat[:N])) ** 2, axis=1))
    )
    times = np.array([segments[0].t_start] + [seg.t_end for seg in segments])
    return BatchEstimate(times=times, x_hat=x_hat, w_hat=np.zeros((N, n)), cost=cost)
