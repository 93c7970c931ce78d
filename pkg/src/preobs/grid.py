"""Uniform fine time grid with keyframe markers.

Every signal in the package lives on a shared fine grid (step ``dt``); the
low-rate instants at which outputs arrive are marked as keyframe indices on
that same grid, so there is never any interpolation ambiguity about where a
keyframe sits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ScenarioError


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = t0 + i*dt, i = 0..n_steps, with keyframes on it."""

    t0: float
    dt: float
    n_steps: int
    keyframe_indices: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        kf = tuple(int(i) for i in self.keyframe_indices)
        if any(b <= a for a, b in zip(kf, kf[1:])):
            raise ValueError("keyframe_indices must be strictly increasing")
        if kf and (kf[0] < 0 or kf[-1] > self.n_steps):
            raise ValueError("keyframe indices must lie in [0, n_steps]")
        object.__setattr__(self, "keyframe_indices", kf)

    @property
    def n_points(self) -> int:
        return self.n_steps + 1

    @property
    def t_end(self) -> float:
        return self.t0 + self.n_steps * self.dt

    def times(self) -> np.ndarray:
        """All fine-grid times, shape (n_steps + 1,)."""
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def time_of(self, index: int) -> float:
        return self.t0 + self.dt * index

    def keyframe_times(self) -> np.ndarray:
        return self.t0 + self.dt * np.asarray(self.keyframe_indices, dtype=float)

    @property
    def n_keyframes(self) -> int:
        return len(self.keyframe_indices)

    def index_of(self, t: float, *, tol: float = 1e-9) -> int:
        """Grid index of time ``t``; raises if t is off-grid."""
        x = (t - self.t0) / self.dt
        i = int(round(x))
        if abs(x - i) > tol / self.dt or not (0 <= i <= self.n_steps):
            raise ScenarioError(f"time {t!r} does not lie on the fine grid", field="keyframes")
        return i

    @classmethod
    def regular(cls, t0: float, dt: float, duration: float, n_keyframes: int) -> "TimeGrid":
        """Grid over [t0, t0+duration] with evenly spread keyframes.

        Keyframes include both endpoints; their times are snapped to the
        fine grid (spacing is as even as integer indices allow).
        """
        n_steps = int(round(duration / dt))
        if abs(n_steps * dt - duration) > 1e-9:
            raise ScenarioError("duration is not a whole number of fine steps", field="grid.duration")
        if n_keyframes < 1:
            raise ScenarioError("need at least one keyframe", field="grid.keyframes")
        if n_keyframes == 1:
            idx = (0,)
        else:
            idx = tuple(int(round(j * n_steps / (n_keyframes - 1))) for j in range(n_keyframes))
            if len(set(idx)) != n_keyframes:
                raise ScenarioError("keyframes do not fit on the fine grid", field="grid.keyframes")
        return cls(t0=t0, dt=dt, n_steps=n_steps, keyframe_indices=idx)

    @classmethod
    def from_keyframe_times(cls, t0: float, dt: float, n_steps: int, times) -> "TimeGrid":
        """Grid with explicit (possibly non-uniform) keyframe times.

        Each time must sit on the fine grid; off-grid times raise a
        validation error naming the offending keyframe.
        """
        idx = []
        for j, t in enumerate(times):
            x = (float(t) - t0) / dt
            i = int(round(x))
            if abs(x - i) > 1e-6 or not (0 <= i <= n_steps):
                raise ScenarioError(
                    f"keyframe {j} at t = {t!r} does not lie on the fine grid",
                    field="grid.keyframes",
                )
            idx.append(i)
        return cls(t0=t0, dt=dt, n_steps=n_steps, keyframe_indices=tuple(idx))
