"""Closed-form signal and matrix families used by scenario files.

Scenario configs describe time-varying vectors (inputs, body rates) and
system matrices by named families rather than dense tables, which keeps
the files small and the experiments reproducible; dense per-grid tables
remain available for adversarial cases.
"""

from __future__ import annotations

import numpy as np

from .errors import ScenarioError
from .grid import TimeGrid
from .ltv import SignalTrajectory

_SIGNAL_KINDS = ("constant", "sinusoidal", "piecewise", "table")


def _require_keys(spec: dict, allowed: set, path: str):
    unknown = set(spec) - allowed
    if unknown:
        raise ScenarioError(f"unknown keys {sorted(unknown)}", field=path)


def signal_from_spec(spec: dict, grid: TimeGrid, dim: int | None, path: str) -> SignalTrajectory:
    """Build a fine-grid signal from a family spec.

    Families: constant {value}, sinusoidal {offset, terms: [{amplitude,
    freq_rad, phase}]}, piecewise {times, values} (left-continuous steps),
    table {values} (one row per grid point).
    """
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ScenarioError("expected a mapping with a 'kind' entry", field=path)
    kind = spec["kind"]
    ts = grid.times()
    if kind == "constant":
        _require_keys(spec, {"kind", "value"}, path)
        value = np.atleast_1d(np.asarray(spec["value"], dtype=float))
        vals = np.tile(value, (grid.n_points, 1))
    elif kind == "sinusoidal":
        _require_keys(spec, {"kind", "offset", "terms"}, path)
        offset = np.atleast_1d(np.asarray(spec.get("offset", 0.0), dtype=float))
        vals = np.tile(offset, (grid.n_points, 1)).astype(float)
        for j, term in enumerate(spec.get("terms", [])):
            _require_keys(term, {"amplitude", "freq_rad", "phase"}, f"{path}.terms[{j}]")
            amp = np.atleast_1d(np.asarray(term["amplitude"], dtype=float))
            freq = float(term.get("freq_rad", 1.0))
            phase = float(term.get("phase", 0.0))
            vals = vals + amp[None, :] * np.sin(freq * ts + phase)[:, None]
    elif kind == "piecewise":
        _require_keys(spec, {"kind", "times", "values"}, path)
        times = np.asarray(spec["times"], dtype=float)
        values = np.atleast_2d(np.asarray(spec["values"], dtype=float))
        if len(times) != len(values):
            raise ScenarioError("times and values must have equal length", field=path)
        if np.any(np.diff(times) <= 0):
            raise ScenarioError("piecewise times must be increasing", field=path)
        idx = np.clip(np.searchsorted(times, ts, side="right") - 1, 0, len(times) - 1)
        vals = values[idx]
    elif kind == "table":
        _require_keys(spec, {"kind", "values"}, path)
        vals = np.atleast_2d(np.asarray(spec["values"], dtype=float))
        if vals.shape[0] != grid.n_points:
            raise ScenarioError(
                f"table has {vals.shape[0]} rows, grid has {grid.n_points} points", field=path
            )
    else:
        raise ScenarioError(f"unknown signal kind {kind!r} (expected one of {_SIGNAL_KINDS})", field=path)
    if dim is not None and vals.shape[1] != dim:
        raise ScenarioError(f"signal has dimension {vals.shape[1]}, expected {dim}", field=path)
    return SignalTrajectory(grid, vals)


def matrix_fn_from_spec(spec: dict, rows: int, cols: int, path: str, grid: TimeGrid | None = None):
    """Vectorized t -> (T, rows, cols) map from a matrix family spec."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ScenarioError("expected a mapping with a 'kind' entry", field=path)
    kind = spec["kind"]

    if kind == "constant":
        _require_keys(spec, {"kind", "value"}, path)
        M = np.asarray(spec["value"], dtype=float).reshape(rows, cols)

        def fn(ts):
            ts = np.atleast_1d(ts)
            return np.broadcast_to(M, (len(ts), rows, cols)).copy()

        return fn
    if kind == "sinusoidal":
        _require_keys(spec, {"kind", "offset", "terms"}, path)
        offset = np.asarray(spec.get("offset", np.zeros((rows, cols))), dtype=float).reshape(rows, cols)
        terms = []
        for j, term in enumerate(spec.get("terms", [])):
            _require_keys(term, {"amplitude", "freq_rad", "phase"}, f"{path}.terms[{j}]")
            terms.append((
                np.asarray(term["amplitude"], dtype=float).reshape(rows, cols),
                float(term.get("freq_rad", 1.0)),
                float(term.get("phase", 0.0)),
            ))

        def fn(ts):
            ts = np.atleast_1d(np.asarray(ts, dtype=float))
            out = np.tile(offset, (len(ts), 1, 1))
            for amp, freq, phase in terms:
                out += amp[None] * np.sin(freq * ts + phase)[:, None, None]
            return out

        return fn
    if kind == "piecewise":
        _require_keys(spec, {"kind", "times", "values"}, path)
        times = np.asarray(spec["times"], dtype=float)
        values = np.asarray(spec["values"], dtype=float).reshape(len(times), rows, cols)
        if np.any(np.diff(times) <= 0):
            raise ScenarioError("piecewise times must be increasing", field=path)

        def fn(ts):
            ts = np.atleast_1d(ts)
            idx = np.clip(np.searchsorted(times, ts, side="right") - 1, 0, len(times) - 1)
            return values[idx]

        return fn
    if kind == "table":
        _require_keys(spec, {"kind", "values"}, path)
        if grid is None:
            raise ScenarioError("table matrices need a grid", field=path)
        values = np.asarray(spec["values"], dtype=float).reshape(grid.n_points, rows, cols)
        # tabulated on grid points; half-grid values are linear midpoints
        t0, dt, n = grid.t0, grid.dt, grid.n_steps

        def fn(ts):
            ts = np.atleast_1d(np.asarray(ts, dtype=float))
            x = (ts - t0) / dt
            i = np.clip(np.floor(x + 1e-9).astype(int), 0, n)
            frac = np.clip(x - i, 0.0, 1.0)
            j = np.minimum(i + 1, n)
            return (1.0 - frac)[:, None, None] * values[i] + frac[:, None, None] * values[j]

        return fn
    raise ScenarioError(f"unknown matrix kind {kind!r} (expected one of {_SIGNAL_KINDS})", field=path)
