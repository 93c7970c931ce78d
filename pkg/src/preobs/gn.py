"""Damped Gauss-Newton iteration over manifold-valued parameters.

The parameter state is opaque: callers supply residual and Jacobian
functions plus a retraction ``apply_step(state, delta)``. Damping is
Levenberg style (lambda * I), with lambda increased tenfold on a rejected
step and relaxed by 0.3 on acceptance; each trial step is solved as an
augmented least-squares system by orthogonal factorization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NoConvergenceError

MAX_REJECTS = 5  # consecutive non-decreasing proposals before giving up


@dataclass
class GaussNewtonLog:
    costs: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    # number of locally unobservable directions at the solution (0 = fully
    # determined); filled in by solvers that inspect the final Jacobian
    nullspace_dim: int = 0


def jacobian_nullspace_dim(J: np.ndarray, rcond: float = 1e-10) -> int:
    """Directions of the parameter space the residual is locally blind to."""
    s = np.linalg.svd(np.asarray(J, dtype=float), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return J.shape[1]
    return int(J.shape[1] - np.count_nonzero(s > rcond * s[0]))


def numeric_jacobian(residual, state, apply_step, n_params: int, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian through the retraction ``apply_step``."""
    cols = []
    for j in range(n_params):
        d = np.zeros(n_params)
        d[j] = step
        r_plus = np.asarray(residual(apply_step(state, d)), dtype=float).ravel()
        d[j] = -step
        r_minus = np.asarray(residual(apply_step(state, d)), dtype=float).ravel()
        cols.append((r_plus - r_minus) / (2.0 * step))
    return np.stack(cols, axis=1)


def gauss_newton(
    residual: Callable,
    jacobian: Callable,
    state,
    apply_step: Callable,
    *,
    max_iter: int = 100,
    rel_tol: float = 1e-10,
    lam0: float = 1e-4,
):
    """Minimize ||residual(state)||^2; returns (state, GaussNewtonLog).

    Steps that do not decrease the cost are rejected and retried with
    tenfold damping; five consecutive rejections raise NoConvergenceError
    carrying the last cost. Iteration stops when an accepted step changes
    the cost by less than rel_tol relatively, or after max_iter iterations.
    """
    r = np.asarray(residual(state), dtype=float).ravel()
    cost = float(r @ r)
    log = GaussNewtonLog(costs=[cost])
    lam = lam0
    for it in range(max_iter):
        J = np.asarray(jacobian(state), dtype=float)
        n_par = J.shape[1]
        rejects = 0
        while True:
            A = np.vstack([J, np.sqrt(lam) * np.eye(n_par)])
            b = np.concatenate([-r, np.zeros(n_par)])
            delta = np.linalg.lstsq(A, b, rcond=None)[0]
            trial = apply_step(state, delta)
            r_trial = np.asarray(residual(trial), dtype=float).ravel()
            cost_trial = float(r_trial @ r_trial)
            if cost_trial <= cost:
                state = trial
                r = r_trial
                lam = max(lam * 0.3, 1e-15)
                decrease = cost - cost_trial
                # relative decrease with an absolute floor so zero-residual
                # problems terminate once at the rounding noise level
                converged = decrease <= rel_tol * (cost + 1.0)
                cost = cost_trial
                log.costs.append(cost)
                log.lambdas.append(lam)
                log.n_iter = it + 1
                if converged:
                    log.converged = True
                    return state, log
                break
            if cost_trial - cost <= rel_tol * (cost + 1.0):
                # a heavily damped step is a short gradient step; failing to
                # decrease by more than the tolerance means the gradient has
                # vanished, so this is convergence, not a stall
                log.converged = True
                return state, log
            lam *= 10.0
            rejects += 1
            if rejects >= MAX_REJECTS:
                raise NoConvergenceError(
                    f"no cost decrease after {MAX_REJECTS} damping increases at iteration {it}",
                    final_cost=cost,
                )
    return state, log
