"""Deterministic fixed-step integration of matrix/vector ODEs.

The integrator is the classical 4-stage Runge-Kutta scheme on the fine grid.
It is deliberately fixed-step: adaptive stepping would break the exact
alignment between integration points and keyframes that the rest of the
package relies on. Right-hand sides must therefore be evaluable at grid
midpoints t + dt/2.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import IntegrationDivergedError
from .grid import TimeGrid

Rhs = Callable[[float, np.ndarray], np.ndarray]


def rk4_step(rhs: Rhs, t: float, dt: float, x: np.ndarray) -> np.ndarray:
    """One classical Runge-Kutta step from t to t + dt."""
    k1 = rhs(t, x)
    k2 = rhs(t + 0.5 * dt, x + 0.5 * dt * k1)
    k3 = rhs(t + 0.5 * dt, x + 0.5 * dt * k2)
    k4 = rhs(t + dt, x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_matrix_ode(
    rhs: Rhs,
    x0: np.ndarray,
    grid: TimeGrid,
    i0: int = 0,
    i1: int | None = None,
    postprocess: Callable[[int, np.ndarray], np.ndarray] | None = None,
) -> np.ndarray:
    """Integrate dX/dt = rhs(t, X) over grid steps [i0, i1].

    Returns the trajectory at every grid point of the span, shape
    ``(i1 - i0 + 1, *x0.shape)``. ``postprocess(step, X)``, when given, is
    applied to the state after each step (used e.g. to re-project rotations
    or enforce symmetry); it must return the adjusted state.

    Raises IntegrationDivergedError naming the step at which a non-finite
    value first appears.
    """
    if i1 is None:
        i1 = grid.n_steps
    if not (0 <= i0 <= i1 <= grid.n_steps):
        raise ValueError(f"span [{i0}, {i1}] not on grid with {grid.n_steps} steps")
    x = np.array(x0, dtype=float)
    out = np.empty((i1 - i0 + 1,) + x.shape)
    out[0] = x
    dt = grid.dt
    for j in range(i0, i1):
        t = grid.t0 + j * dt
        x = rk4_step(rhs, t, dt, x)
        if not np.all(np.isfinite(x)):
            raise IntegrationDivergedError(step=j + 1, t=t + dt)
        if postprocess is not None:
            x = postprocess(j + 1, x)
        out[j + 1 - i0] = x
    return out


def require_finite(x: np.ndarray, step: int, t: float) -> None:
    """Raise IntegrationDivergedError if x contains a non-finite entry."""
    if not np.all(np.isfinite(x)):
        raise IntegrationDivergedError(step=step, t=t)
