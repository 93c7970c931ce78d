"""Hybrid sampled-data observer: continuous preintegration + discrete Kalman update.

Between keyframes, the interval transition (F_k, v_k) is integrated from
the continuous-time input; at each keyframe the discrete Kalman update
corrects the predicted state with the low-rate output. Keyframe spacing
may vary step to step, so the observer applies unchanged to asynchronous
measurements. Windowed observability/reachability Gramian checks are
provided to verify the convergence hypotheses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ObserverStepError
from .ltv import LtvModel, MeasurementSet
from .preintegration import PreintegralSegment, preintegrate_segment


@dataclass(frozen=True)
class ObserverState:
    """Estimate and covariance at keyframe k."""

    k: int
    x_hat: np.ndarray  # (n,)
    P: np.ndarray      # (n, n), symmetric PSD

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if np.linalg.norm(P - P.T) > 1e-10 * (1.0 + np.linalg.norm(P)):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(0.5 * (P + P.T))[0] < -1e-10:
            raise ValueError("covariance must be PSD")


@dataclass(frozen=True)
class GramianReport:
    """Windowed Gramian at one window start, with its pass/fail flag."""

    window_start: int
    W: np.ndarray
    min_eigenvalue: float
    passes: bool


def _discrete_transitions(transitions) -> np.ndarray:
    Phi = np.asarray(transitions, dtype=float)
    if Phi.ndim != 3 or Phi.shape[1] != Phi.shape[2]:
        raise ValueError("transitions must be a list of square matrices")
    return Phi


def check_uco(transitions, C_list, k1: int, delta_o: float) -> list[GramianReport]:
    """Windowed observability Gramians of the sampled system.

    For each admissible window start k it forms
    W_O[k] = sum_{i=k}^{k+k1} Psi(i,k)' C_i' C_i Psi(i,k), with Psi the
    discrete transition built from the per-interval matrices, and flags
    whether its smallest eigenvalue reaches delta_o.
    """
    if k1 < 1:
        raise ValueError("window length k1 must be >= 1")
    Phi = _discrete_transitions(transitions)
    C = [np.atleast_2d(np.asarray(Ci, dtype=float)) for Ci in C_list]
    n = Phi.shape[1]
    if len(C) != Phi.shape[0] + 1:
        raise ValueError("need one output matrix per keyframe (transitions + 1)")
    reports = []
    for k in range(len(C) - k1):
        W = np.zeros((n, n))
        Psi = np.eye(n)
        for i in range(k, k + k1 + 1):
            W += Psi.T @ C[i].T @ C[i] @ Psi
            if i < k + k1:
                Psi = Phi[i] @ Psi
        W = 0.5 * (W + W.T)
        lam = float(np.linalg.eigvalsh(W)[0])
        reports.append(GramianReport(window_start=k, W=W, min_eigenvalue=lam, passes=lam >= delta_o))
    return reports


def check_reachability(transitions, Q, k2: int, delta_q: float) -> list[GramianReport]:
    """Windowed reachability Gramians W_q = sum_i Psi(i,k) Q Psi(i,k)'."""
    if k2 < 1:
        raise ValueError("window length k2 must be >= 1")
    Phi = _discrete_transitions(transitions)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = Phi.shape[1]
    reports = []
    for k in range(Phi.shape[0] + 1 - k2):
        W = np.zeros((n, n))
        Psi = np.eye(n)
        for i in range(k, k + k2 + 1):
            W += Psi @ Q @ Psi.T
            if i < k + k2:
                Psi = Phi[i] @ Psi
        W = 0.5 * (W + W.T)
        lam = float(np.linalg.eigvalsh(W)[0])
        reports.append(GramianReport(window_start=k, W=W, min_eigenvalue=lam, passes=lam > delta_q))
    return reports


def observer_step(
    state: ObserverState,
    segment: PreintegralSegment,
    y_next,
    u_next,
    C_next: np.ndarray,
    D_next: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
) -> tuple[ObserverState, np.ndarray]:
    """One discrete update: predict through the interval, correct with y.

        x-    = F x + v
        e     = y - C x- - D u
        P-    = F P F' + Q
        K     = P- C' (C P- C' + R)^{-1}
        P     = (I - K C) P- (Joseph form)

    Returns the new state and the innovation e. The covariance update uses
    the Joseph form, which is algebraically identical to (I - KC)P- but
    preserves positive semidefiniteness numerically.
    """
    F, v = segment.F, segment.v
    n = F.shape[0]
    C = np.atleast_2d(np.asarray(C_next, dtype=float))
    D = np.atleast_2d(np.asarray(D_next, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))

    x_pred = F @ state.x_hat + v
    P_pred = F @ state.P @ F.T + Q
    e = np.atleast_1d(np.asarray(y_next, dtype=float)) - C @ x_pred - D @ np.atleast_1d(u_next)
    S = C @ P_pred @ C.T + R
    S = 0.5 * (S + S.T)
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > 1e14:
        raise ObserverStepError(
            f"innovation covariance singular at step {state.k + 1}",
            diagnostics={"k": state.k + 1, "S": S, "cond": cond},
        )
    K = np.linalg.solve(S, C @ P_pred).T
    x_new = x_pred + K @ e
    IKC = np.eye(n) - K @ C
    P_new = IKC @ P_pred @ IKC.T + K @ R @ K.T
    P_new = 0.5 * (P_new + P_new.T)
    return ObserverState(k=state.k + 1, x_hat=x_new, P=P_new), e


@dataclass(frozen=True)
class ObserverRun:
    """Keyframe estimates and the per-step innovation/error log."""

    times: np.ndarray          # (K,)
    x_hat: np.ndarray          # (K, n)
    innovation_norms: np.ndarray  # (K,), 0.0 at k = 0
    trace_P: np.ndarray        # (K,)
    error_norms: np.ndarray | None  # (K,) when truth was supplied
    segments: list[PreintegralSegment]


def run_observer(
    model: LtvModel,
    measurements: MeasurementSet,
    x0_hat,
    P0,
    Q,
    R,
    truth=None,
) -> ObserverRun:
    """Run the observer over all keyframe intervals of the measurement grid.

    Preintegrates each interval from the (noisy) continuous input, then
    applies the discrete update with the keyframe output. Keyframes may be
    non-uniformly spaced. When a truth trajectory is supplied, per-keyframe
    estimation errors are logged alongside innovations and trace(P).
    """
    grid = measurements.grid
    kf = list(grid.keyframe_indices)
    if len(kf) < 2:
        raise ValueError("observer needs at least two keyframes")
    state = ObserverState(k=0, x_hat=np.atleast_1d(np.asarray(x0_hat, dtype=float)),
                          P=np.atleast_2d(np.asarray(P0, dtype=float)))
    times = grid.keyframe_times()
    K = len(kf)
    x_log = np.empty((K, model.n))
    x_log[0] = state.x_hat
    innov = np.zeros(K)
    tr_P = np.empty(K)
    tr_P[0] = float(np.trace(state.P))
    segments = []
    for k in range(K - 1):
        seg = preintegrate_segment(
            model, measurements.u_bar, grid.time_of(kf[k]), grid.time_of(kf[k + 1]), k=k
        )
        segments.append(seg)
        t_next = times[k + 1]
        state, e = observer_step(
            state,
            seg,
            measurements.y_bar[k + 1],
            measurements.u_bar.values[kf[k + 1]],
            model.C_at(t_next),
            model.D_at(t_next),
            Q,
            R,
        )
        x_log[k + 1] = state.x_hat
        innov[k + 1] = float(np.linalg.norm(e))
        tr_P[k + 1] = float(np.trace(state.P))

    err = None
    if truth is not None:
        x_true = truth.values[kf] if hasattr(truth, "values") else np.asarray(truth)
        err = np.linalg.norm(x_log - x_true, axis=1)
    return ObserverRun(
        times=times, x_hat=x_log, innovation_norms=innov, trace_P=tr_P,
        error_norms=err, segments=segments,
    )
