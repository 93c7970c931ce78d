"""Deterministic CSV and JSON writers for trajectories, measurements, reports.

All floats are written with repr-faithful 17-significant-digit formatting,
so a fixed (scenario, seed) pair produces byte-identical files across runs
on one platform. Nothing time- or environment-dependent is ever written.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def fmt(x) -> str:
    """Shortest exact decimal for a float (integers stay integral)."""
    x = float(x)
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return f"{x:.17g}"


def write_csv(path, header: list[str], rows) -> None:
    path = Path(path)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def write_json(path, payload: dict) -> None:
    def default(obj):
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        if isinstance(obj, (np.floating, np.integer)):
            return obj.item()
        raise TypeError(f"cannot serialize {type(obj)}")

    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=default) + "\n")


def vector_header(prefix: str, dim: int) -> list[str]:
    return [f"{prefix}{i}" for i in range(dim)]


def write_trajectory_csv(path, times, values, prefix: str = "x") -> None:
    """Columns: t, then vector entries in index order."""
    values = np.atleast_2d(values)
    header = ["t"] + vector_header(prefix, values.shape[1])
    rows = (np.concatenate([[t], v]) for t, v in zip(times, values))
    write_csv(path, header, rows)


def write_pose_csv(path, times, R, v, p) -> None:
    """Columns: t, nine rotation entries row-major, velocity, position."""
    header = (
        ["t"]
        + [f"R{i}{j}" for i in range(3) for j in range(3)]
        + vector_header("v", 3)
        + vector_header("p", 3)
    )
    rows = (
        np.concatenate([[t], Rk.ravel(), vk, pk])
        for t, Rk, vk, pk in zip(times, R, v, p)
    )
    write_csv(path, header, rows)


def write_imu_csv(path, times, omega, accel) -> None:
    """Columns: t, measured body rate, measured specific acceleration."""
    header = ["t"] + vector_header("w", 3) + vector_header("a", 3)
    rows = (np.concatenate([[t], w, a]) for t, w, a in zip(times, omega, accel))
    write_csv(path, header, rows)


def write_landmark_csv(path, times, slots, y) -> None:
    """Columns: t, slot, landmark index, 3 body-frame coordinates."""
    header = ["t", "slot", "landmark", "y0", "y1", "y2"]
    rows = []
    for s_pos, s in enumerate(slots):
        for i in range(y.shape[1]):
            rows.append([times[s_pos], s, i, *y[s_pos, i]])
    write_csv(path, header, rows)
