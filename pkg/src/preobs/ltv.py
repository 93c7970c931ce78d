"""Linear time-varying systems: models, simulation, multi-rate measurements.

The model is dx/dt = A(t) x + B(t) u with output y = C(t) x + D(t) u. The
input is available on the fine grid; outputs are sampled at keyframes only.
All flows driven by A(t) (state simulation, transition matrices, dynamic
extensions) go through a single tabulated Runge-Kutta path, ``LinearFlow``,
so that quantities which agree in exact arithmetic also agree numerically
to rounding error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidCovarianceError, IntegrationDivergedError
from .grid import TimeGrid

MatrixFn = Callable[[np.ndarray], np.ndarray]


def _as_matrix_fn(value, rows: int, cols: int) -> MatrixFn:
    """Wrap a constant array or callable into a vectorized t -> matrix map."""
    if callable(value):
        fn = value

        def vectorized(ts):
            ts = np.atleast_1d(np.asarray(ts, dtype=float))
            out = fn(ts)
            out = np.asarray(out, dtype=float)
            if out.shape == (len(ts), rows, cols):
                return out
            # scalar-only callable: evaluate pointwise
            return np.stack([np.asarray(fn(t), dtype=float).reshape(rows, cols) for t in ts])

        return vectorized
    M = np.asarray(value, dtype=float).reshape(rows, cols)

    def constant(ts):
        ts = np.atleast_1d(ts)
        return np.broadcast_to(M, (len(ts), rows, cols)).copy()

    return constant


@dataclass
class LtvModel:
    """Time-indexed system matrices, stored as callables over time arrays.

    ``A``, ``B``, ``C``, ``D`` map an array of times (T,) to stacked
    matrices (T, rows, cols); constants and scalar callables are adapted.
    """

    n: int
    m: int
    p: int
    A: MatrixFn
    B: MatrixFn
    C: MatrixFn
    D: MatrixFn
    _flow_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_matrices(cls, A, B, C, D=None) -> "LtvModel":
        """Build a model from constants and/or callables, inferring shapes."""

        def probe(value):
            out = np.asarray(value(0.0) if callable(value) else value, dtype=float)
            if callable(value) and out.ndim == 3:
                out = out[0]
            return np.atleast_2d(out)

        A0 = probe(A)
        n = A0.shape[-1]
        B0 = probe(B).reshape(n, -1)
        m = B0.shape[1]
        C0 = probe(C).reshape(-1, n)
        p = C0.shape[0]
        if D is None:
            D = np.zeros((p, m))
        return cls(
            n=n, m=m, p=p,
            A=_as_matrix_fn(A, n, n),
            B=_as_matrix_fn(B, n, m),
            C=_as_matrix_fn(C, p, n),
            D=_as_matrix_fn(D, p, m),
        )

    def C_at(self, t: float) -> np.ndarray:
        return self.C(np.array([t]))[0]

    def D_at(self, t: float) -> np.ndarray:
        return self.D(np.array([t]))[0]

    def flow(self, grid: TimeGrid) -> "LinearFlow":
        """Tabulated flow for this model on ``grid`` (memoized per grid)."""
        key = id(grid)
        flow = self._flow_cache.get(key)
        if flow is None or flow.grid is not grid:
            flow = LinearFlow(self, grid)
            self._flow_cache = {key: flow}
        return flow


@dataclass(frozen=True)
class SignalTrajectory:
    """A vector signal sampled at every fine-grid point."""

    grid: TimeGrid
    values: np.ndarray  # (n_points, dim)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.n_points:
            raise ValueError(
                f"signal has {v.shape[0]} samples, grid has {self.grid.n_points} points"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("signal contains non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def at_keyframes(self) -> np.ndarray:
        return self.values[list(self.grid.keyframe_indices)]

    def half_values(self) -> np.ndarray:
        """Values on the half grid (linear midpoint interpolation), (2*n_steps+1, dim)."""
        return half_table(self.values)

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "SignalTrajectory":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.tile(value, (grid.n_points, 1)))

    @classmethod
    def from_function(cls, grid: TimeGrid, fn) -> "SignalTrajectory":
        vals = np.stack([np.atleast_1d(np.asarray(fn(t), dtype=float)) for t in grid.times()])
        return cls(grid, vals)


def half_table(values: np.ndarray) -> np.ndarray:
    """Interleave grid samples with linear midpoints: (N+1, ...) -> (2N+1, ...)."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    out = np.empty((2 * n - 1,) + values.shape[1:])
    out[0::2] = values
    out[1::2] = 0.5 * (values[:-1] + values[1:])
    return out


class LinearFlow:
    """Runge-Kutta flows of dX/dt = A(t) X + G(t) with A tabulated on the half grid.

    One instance per (model, grid) pair serves every A-driven integration:
    truth simulation, preintegration segments, fundamental matrices, dynamic
    extensions and covariance propagation. The forcing table G is supplied
    per call on the same half grid and may carry multiple columns, so a
    batch of independent trajectories integrates in one pass.
    """

    def __init__(self, model: LtvModel, grid: TimeGrid):
        self.model = model
        self.grid = grid
        t_half = grid.t0 + 0.5 * grid.dt * np.arange(2 * grid.n_steps + 1)
        self.A_half = model.A(t_half)
        self.B_half = model.B(t_half)
        if not np.all(np.isfinite(self.A_half)) or not np.all(np.isfinite(self.B_half)):
            raise ValueError("model matrices are non-finite on the grid")

    def forcing_from_input(self, u: SignalTrajectory) -> np.ndarray:
        """Half-grid table of B(t) u(t), shape (2*n_steps+1, n)."""
        u_half = u.half_values()
        return np.einsum("hij,hj->hi", self.B_half, u_half)

    def propagate(
        self,
        X0: np.ndarray,
        i0: int,
        i1: int,
        forcing: np.ndarray | None = None,
        record: Sequence[int] | str = "all",
    ) -> np.ndarray:
        """Integrate X' = A X + G over fine steps [i0, i1].

        X0 may be (n,), (n, q) or (n x q) stacked columns; forcing, when
        given, is a half-grid table broadcastable to X's shape ((2N+1, n)
        for single-column states, (2N+1, n, q) otherwise).

        record: "all" returns the whole span trajectory; "last" only the
        endpoint; a sequence of global grid indices returns those points.
        """
        X = np.array(X0, dtype=float)
        squeeze = X.ndim == 1
        if squeeze:
            X = X[:, None]
        A = self.A_half
        dt = self.grid.dt
        if forcing is not None and forcing.ndim == 2:
            forcing = forcing[:, :, None]

        if record == "all":
            rec = list(range(i0, i1 + 1))
        elif record == "last":
            rec = [i1]
        else:
            rec = sorted(int(r) for r in record)
            if rec and (rec[0] < i0 or rec[-1] > i1):
                raise ValueError("record indices outside the integration span")
        out = np.empty((len(rec),) + X.shape)
        pos = 0
        rec_set = {}
        for j, r in enumerate(rec):
            rec_set.setdefault(r, []).append(j)
        for slot in rec_set.get(i0, []):
            out[slot] = X

        if forcing is None:
            def stage(h, Y):
                return A[h] @ Y
        else:
            def stage(h, Y):
                return A[h] @ Y + forcing[h]

        for j in range(i0, i1):
            h = 2 * j
            k1 = stage(h, X)
            k2 = stage(h + 1, X + (0.5 * dt) * k1)
            k3 = stage(h + 1, X + (0.5 * dt) * k2)
            k4 = stage(h + 2, X + dt * k3)
            X = X + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(X)):
                raise IntegrationDivergedError(step=j + 1, t=self.grid.time_of(j + 1))
            for slot in rec_set.get(j + 1, []):
                out[slot] = X
        if squeeze:
            out = out[..., 0]
        return out

    def propagate_lyapunov(
        self, S_const: np.ndarray, record: Sequence[int] | str = "all"
    ) -> np.ndarray:
        """Integrate P' = A P + P A' + B S B' from P(t0) = 0, symmetrizing each step.

        ``S_const`` is a constant input covariance; the (PSD-preserving)
        symmetrization (P + P')/2 is applied after every step.
        """
        n = self.model.n
        P = np.zeros((n, n))
        A = self.A_half
        S_half = np.einsum("hij,jk,hlk->hil", self.B_half, S_const, self.B_half)
        dt = self.grid.dt
        n_steps = self.grid.n_steps
        if record == "all":
            rec = list(range(n_steps + 1))
        elif record == "last":
            rec = [n_steps]
        else:
            rec = sorted(int(r) for r in record)
        out = np.empty((len(rec), n, n))
        rec_set = {}
        for j, r in enumerate(rec):
            rec_set.setdefault(r, []).append(j)
        for slot in rec_set.get(0, []):
            out[slot] = P

        def stage(h, Y):
            return A[h] @ Y + Y @ A[h].T + S_half[h]

        for j in range(n_steps):
            h = 2 * j
            k1 = stage(h, P)
            k2 = stage(h + 1, P + (0.5 * dt) * k1)
            k3 = stage(h + 1, P + (0.5 * dt) * k2)
            k4 = stage(h + 2, P + dt * k3)
            P = P + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            P = 0.5 * (P + P.T)
            if not np.all(np.isfinite(P)):
                raise IntegrationDivergedError(step=j + 1, t=self.grid.time_of(j + 1))
            for slot in rec_set.get(j + 1, []):
                out[slot] = P
        return out


def simulate(model: LtvModel, grid: TimeGrid, x0, u: SignalTrajectory) -> SignalTrajectory:
    """Ground-truth state trajectory of the LTV system on the fine grid."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (model.n,):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({model.n},)")
    if u.grid is not grid and u.grid != grid:
        raise ValueError("input signal is not defined on the simulation grid")
    flow = model.flow(grid)
    forcing = flow.forcing_from_input(u)
    traj = flow.propagate(x0, 0, grid.n_steps, forcing=forcing, record="all")
    return SignalTrajectory(grid, traj)


def psd_factor(S, name: str = "covariance") -> np.ndarray:
    """Factor L with L L' = S for a symmetric PSD matrix; validates PSD-ness."""
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1] or np.linalg.norm(S - S.T) > 1e-10 * (1.0 + np.linalg.norm(S)):
        raise InvalidCovarianceError(f"{name} is not symmetric")
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    if w[0] < -1e-10 * max(1.0, w[-1]):
        raise InvalidCovarianceError(f"{name} has negative eigenvalue {w[0]:.3e}")
    return V * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class MeasurementSet:
    """Multi-rate noisy data: outputs at keyframes, inputs on the fine grid."""

    grid: TimeGrid
    y_bar: np.ndarray          # (n_keyframes, p)
    u_bar: SignalTrajectory    # noisy input on the fine grid
    sigma_u: np.ndarray        # (m, m) continuous-time input noise intensity
    sigma_y: np.ndarray        # (p, p) per-sample output noise covariance
    seed: int | None = None

    def __post_init__(self):
        y = np.atleast_2d(np.asarray(self.y_bar, dtype=float))
        if y.shape[0] != self.grid.n_keyframes:
            raise ValueError("one output sample per keyframe is required")
        object.__setattr__(self, "y_bar", y)
        object.__setattr__(self, "sigma_u", np.atleast_2d(np.asarray(self.sigma_u, dtype=float)))
        object.__setattr__(self, "sigma_y", np.atleast_2d(np.asarray(self.sigma_y, dtype=float)))


def sample_measurements(
    model: LtvModel,
    grid: TimeGrid,
    x: SignalTrajectory,
    u: SignalTrajectory,
    sigma_u,
    sigma_y,
    seed: int,
) -> MeasurementSet:
    """Draw noisy measurements from a simulated truth trajectory.

    Output noise is i.i.d. N(0, sigma_y) per keyframe. The continuous
    white input noise is realized as i.i.d. N(0, sigma_u / dt) per fine
    step (Euler-Maruyama discretization), so that the variance of its
    integral over a window of length T tends to sigma_u * T as dt -> 0.
    Reproducible: a fixed seed gives a bitwise-identical result.
    """
    Lu = psd_factor(sigma_u, "sigma_u")
    Ly = psd_factor(sigma_y, "sigma_y")
    rng = np.random.default_rng(seed)
    eps_u = rng.standard_normal((grid.n_points, model.m)) @ (Lu.T / np.sqrt(grid.dt))
    eps_y = rng.standard_normal((grid.n_keyframes, model.p)) @ Ly.T

    kf = list(grid.keyframe_indices)
    t_k = grid.keyframe_times()
    C_k = model.C(t_k)
    D_k = model.D(t_k)
    y_true = np.einsum("kij,kj->ki", C_k, x.values[kf]) + np.einsum(
        "kij,kj->ki", D_k, u.values[kf]
    )
    u_bar = SignalTrajectory(grid, u.values + eps_u)
    return MeasurementSet(
        grid=grid,
        y_bar=y_true + eps_y,
        u_bar=u_bar,
        sigma_u=np.atleast_2d(np.asarray(sigma_u, dtype=float)),
        sigma_y=np.atleast_2d(np.asarray(sigma_y, dtype=float)),
        seed=seed,
    )
