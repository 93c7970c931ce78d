"""Scenario files: declarative experiment configs with strict validation.

A scenario is a single YAML document with a versioned ``schema`` field.
Unknown keys are errors, not warnings: silently ignored options corrupt
experiments. Validation failures carry the offending field path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ScenarioError
from .grid import TimeGrid
from .ltv import LtvModel, SignalTrajectory
from .manifold.kinematics import GRAVITY, ExtendedPose
from .signals import matrix_fn_from_spec, signal_from_spec
from .so3 import is_rotation, so3_exp

SCHEMA_VERSION = 1

LTV_ESTIMATORS = ("pebo", "pebo_weighted", "preint_batch", "preint_hard", "observer")
RIGID_ESTIMATORS = ("manifold_pebo", "manifold_preint")

_ESTIMATOR_KEYS = {
    "pebo": {"xi0", "gamma"},
    "pebo_weighted": {"xi0"},
    "preint_batch": {"gamma", "gamma_w"},
    "preint_hard": {"gamma"},
    "observer": {"x0_hat", "P0", "Q", "R"},
    "manifold_pebo": {"landmarks", "sigma_y_weight", "max_iter"},
    "manifold_preint": {
        "sigma_R", "sigma_v", "sigma_p", "sigma_y_weight", "landmarks", "hard", "max_iter",
    },
}


def _check_keys(mapping, allowed, path: str):
    if not isinstance(mapping, dict):
        raise ScenarioError("expected a mapping", field=path)
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ScenarioError(f"unknown keys {sorted(unknown)}", field=path)


def _matrix(value, path: str) -> np.ndarray:
    try:
        return np.atleast_2d(np.asarray(value, dtype=float))
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"not a numeric matrix: {exc}", field=path)


def _cov(value, dim: int, path: str) -> np.ndarray:
    """Covariance entry: scalar (times identity) or full matrix."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(dim)
    M = _matrix(value, path)
    if M.shape != (dim, dim):
        raise ScenarioError(f"covariance has shape {M.shape}, expected ({dim}, {dim})", field=path)
    return M


@dataclass
class Scenario:
    """Validated experiment description (system, grid, noise, estimators)."""

    name: str
    kind: str                    # "ltv" | "rigid"
    grid: TimeGrid
    noise: dict
    seed: int
    estimators: dict = field(default_factory=dict)
    # ltv systems
    model: LtvModel | None = None
    x0: np.ndarray | None = None
    input_signal: SignalTrajectory | None = None
    # rigid systems
    omega_signal: SignalTrajectory | None = None
    accel_signal: SignalTrajectory | None = None
    pose0: ExtendedPose | None = None
    landmarks: np.ndarray | None = None
    bias_omega: np.ndarray | None = None
    bias_accel: np.ndarray | None = None
    gravity: np.ndarray | None = None


def _build_grid(cfg, path="grid") -> TimeGrid:
    _check_keys(cfg, {"t0", "dt", "duration", "keyframes"}, path)
    for key in ("dt", "duration", "keyframes"):
        if key not in cfg:
            raise ScenarioError("missing required key", field=f"{path}.{key}")
    t0 = float(cfg.get("t0", 0.0))
    dt = float(cfg["dt"])
    duration = float(cfg["duration"])
    kf = cfg["keyframes"]
    _check_keys(kf, {"count", "times"}, f"{path}.keyframes")
    if ("count" in kf) == ("times" in kf):
        raise ScenarioError("specify exactly one of 'count' or 'times'", field=f"{path}.keyframes")
    if "count" in kf:
        return TimeGrid.regular(t0, dt, duration, int(kf["count"]))
    n_steps = int(round(duration / dt))
    return TimeGrid.from_keyframe_times(t0, dt, n_steps, kf["times"])


def _build_ltv(cfg, grid, path="system") -> tuple[LtvModel, np.ndarray, SignalTrajectory]:
    _check_keys(cfg, {"A", "B", "C", "D", "x0", "input"}, path)
    for key in ("A", "B", "C", "x0", "input"):
        if key not in cfg:
            raise ScenarioError("missing required key", field=f"{path}.{key}")
    x0 = np.atleast_1d(np.asarray(cfg["x0"], dtype=float))
    n = x0.shape[0]

    def probe_cols(spec, path_):
        # the first defined matrix of the family fixes the column count
        if spec["kind"] == "constant":
            return _matrix(spec["value"], path_).shape
        if spec["kind"] == "sinusoidal":
            ref = spec.get("offset", spec.get("terms", [{}])[0].get("amplitude"))
            return _matrix(ref, path_).shape
        if spec["kind"] == "piecewise":
            return _matrix(spec["values"][0], path_).shape
        return np.asarray(spec["values"], dtype=float).shape[1:]

    B_shape = probe_cols(cfg["B"], f"{path}.B")
    m = B_shape[1] if len(B_shape) == 2 else 1
    C_shape = probe_cols(cfg["C"], f"{path}.C")
    p = C_shape[0]

    A = matrix_fn_from_spec(cfg["A"], n, n, f"{path}.A", grid)
    B = matrix_fn_from_spec(cfg["B"], n, m, f"{path}.B", grid)
    C = matrix_fn_from_spec(cfg["C"], p, n, f"{path}.C", grid)
    if "D" in cfg:
        D = matrix_fn_from_spec(cfg["D"], p, m, f"{path}.D", grid)
    else:
        D = np.zeros((p, m))
    model = LtvModel.from_matrices(A, B, C, D) if not callable(D) else None
    if model is None:
        model = LtvModel(n=n, m=m, p=p, A=A, B=B, C=C, D=D)
    u = signal_from_spec(cfg["input"], grid, m, f"{path}.input")
    return model, x0, u


def _build_rigid(cfg, grid, path="system"):
    _check_keys(
        cfg,
        {"omega", "accel", "R0", "v0", "p0", "landmarks", "bias_omega", "bias_accel", "gravity"},
        path,
    )
    for key in ("omega", "accel", "landmarks"):
        if key not in cfg:
            raise ScenarioError("missing required key", field=f"{path}.{key}")
    omega = signal_from_spec(cfg["omega"], grid, 3, f"{path}.omega")
    accel = signal_from_spec(cfg["accel"], grid, 3, f"{path}.accel")
    R0_cfg = cfg.get("R0", {"rotvec": [0.0, 0.0, 0.0]})
    if isinstance(R0_cfg, dict):
        _check_keys(R0_cfg, {"rotvec"}, f"{path}.R0")
        R0 = so3_exp(np.asarray(R0_cfg["rotvec"], dtype=float))
    else:
        R0 = _matrix(R0_cfg, f"{path}.R0")
        if not is_rotation(R0, tol=1e-6):
            raise ScenarioError("R0 is not a rotation matrix", field=f"{path}.R0")
    pose0 = ExtendedPose(
        R0,
        np.asarray(cfg.get("v0", [0.0, 0.0, 0.0]), dtype=float),
        np.asarray(cfg.get("p0", [0.0, 0.0, 0.0]), dtype=float),
    )
    landmarks = np.asarray(cfg["landmarks"], dtype=float)
    if landmarks.ndim != 2 or landmarks.shape[1] != 3 or landmarks.shape[0] < 1:
        raise ScenarioError("landmarks must be a list of 3-vectors", field=f"{path}.landmarks")
    return dict(
        omega_signal=omega,
        accel_signal=accel,
        pose0=pose0,
        landmarks=landmarks,
        bias_omega=np.asarray(cfg.get("bias_omega", [0.0, 0.0, 0.0]), dtype=float),
        bias_accel=np.asarray(cfg.get("bias_accel", [0.0, 0.0, 0.0]), dtype=float),
        gravity=np.asarray(cfg.get("gravity", GRAVITY), dtype=float),
    )


def scenario_from_dict(cfg: dict, default_name: str = "scenario") -> Scenario:
    _check_keys(cfg, {"schema", "name", "kind", "grid", "system", "noise", "estimators"}, "<root>")
    if cfg.get("schema") != SCHEMA_VERSION:
        raise ScenarioError(
            f"unsupported schema {cfg.get('schema')!r} (this version reads {SCHEMA_VERSION})",
            field="schema",
        )
    kind = cfg.get("kind")
    if kind not in ("ltv", "rigid"):
        raise ScenarioError("kind must be 'ltv' or 'rigid'", field="kind")
    name = str(cfg.get("name", default_name))
    grid = _build_grid(cfg.get("grid", {}))

    noise_cfg = cfg.get("noise", {}) or {}
    if kind == "ltv":
        model, x0, u = _build_ltv(cfg.get("system", {}), grid)
        _check_keys(noise_cfg, {"sigma_u", "sigma_y", "seed"}, "noise")
        noise = {
            "sigma_u": _cov(noise_cfg.get("sigma_u", 0.0), model.m, "noise.sigma_u"),
            "sigma_y": _cov(noise_cfg.get("sigma_y", 0.0), model.p, "noise.sigma_y"),
        }
        extra = {}
    else:
        extra = _build_rigid(cfg.get("system", {}), grid)
        model, x0, u = None, None, None
        _check_keys(noise_cfg, {"sigma_omega", "sigma_accel", "sigma_y", "seed"}, "noise")
        noise = {
            "sigma_omega": _cov(noise_cfg.get("sigma_omega", 0.0), 3, "noise.sigma_omega"),
            "sigma_accel": _cov(noise_cfg.get("sigma_accel", 0.0), 3, "noise.sigma_accel"),
            "sigma_y": _cov(noise_cfg.get("sigma_y", 0.0), 3, "noise.sigma_y"),
        }

    noisy = any(np.max(np.abs(v)) > 0 for v in noise.values())
    if noisy and "seed" not in noise_cfg:
        raise ScenarioError("a seed is required whenever noise is nonzero", field="noise.seed")
    seed = int(noise_cfg.get("seed", 0))

    est_cfg = cfg.get("estimators", {}) or {}
    valid = LTV_ESTIMATORS if kind == "ltv" else RIGID_ESTIMATORS
    estimators = {}
    for est_name, opts in est_cfg.items():
        if est_name not in valid:
            raise ScenarioError(
                f"unknown estimator {est_name!r} (valid for {kind}: {', '.join(valid)})",
                field=f"estimators.{est_name}",
            )
        opts = opts or {}
        _check_keys(opts, _ESTIMATOR_KEYS[est_name], f"estimators.{est_name}")
        estimators[est_name] = opts

    return Scenario(
        name=name, kind=kind, grid=grid, noise=noise, seed=seed,
        estimators=estimators, model=model, x0=x0, input_signal=u, **extra,
    )


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario YAML file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file: {exc}")
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"invalid YAML: {exc}")
    if not isinstance(cfg, dict):
        raise ScenarioError("scenario file must contain a mapping")
    return scenario_from_dict(cfg, default_name=path.stem)


def gamma_weights(spec, N: int, path: str = "gamma") -> np.ndarray:
    """Per-keyframe weights: scalar, explicit list, or forgetting factors.

    A mapping {forgetting: lambda} yields gamma_k = lambda^(N-1-k), the
    usual exponential forgetting profile for online estimators.
    """
    if spec is None:
        return np.ones(N)
    if isinstance(spec, dict):
        _check_keys(spec, {"forgetting"}, path)
        lam = float(spec["forgetting"])
        if not (0.0 < lam <= 1.0):
            raise ScenarioError("forgetting factor must be in (0, 1]", field=path)
        return lam ** np.arange(N - 1, -1, -1, dtype=float)
    arr = np.atleast_1d(np.asarray(spec, dtype=float))
    if arr.shape == (1,):
        return np.full(N, arr[0])
    if arr.shape != (N,):
        raise ScenarioError(f"need {N} weights, got {arr.shape[0]}", field=path)
    return arr
