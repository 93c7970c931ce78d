"""Registry of cross-module equivalence checks.

Each check numerically verifies one identity tying preintegration to the
dynamic-extension observer (or the sampled observer) on a self-simulated
system: the keyframe transition product, intra-interval transition and
forced-response identities, the equality of the reconstructed trajectory
with the hard-constrained batch estimate, the discrete observer transition,
the rotation chain on SO(3), and the weight-sweep limit tying the two
manifold estimators together. The same registry drives both the test suite
and the command-line verification table, so there is a single source of
truth for what "the identities hold" means.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .grid import TimeGrid
from .ltv import LtvModel, SignalTrajectory, sample_measurements, simulate
from .manifold import (
    ExtendedPose,
    imu_preintegrate_all,
    run_manifold_extension,
    sample_landmarks,
    simulate_rigid_body,
    solve_manifold_pebo,
    solve_manifold_preintegration,
)
from .pebo import build_regressor, estimate_theta, reconstruct_state, run_extension
from .preintegration import preintegrate_all, preintegrate_segment, solve_batch_hard
from .scenario import Scenario
from .so3 import rotation_distance, so3_exp


@dataclass(frozen=True)
class CheckResult:
    name: str
    deviation: float
    tolerance: float
    passed: bool
    detail: str = ""


@dataclass(frozen=True)
class Check:
    name: str
    tolerance: float
    run: Callable  # (ctx, tolerance) -> CheckResult


class VerifyContext:
    """Noise-free data shared by the checks, built from a scenario when it fits.

    An LTV scenario supplies the system for the Euclidean checks; a rigid
    scenario supplies the trajectory for the rotation-chain and sweep
    checks. Whatever the scenario does not provide comes from bundled
    defaults, so every check always runs.
    """

    def __init__(self, scenario: Scenario | None = None):
        self.scenario = scenario
        self._ltv = None
        self._rigid = None

    # -- Euclidean pieces ---------------------------------------------------

    def ltv(self):
        if self._ltv is not None:
            return self._ltv
        sc = self.scenario
        if sc is not None and sc.kind == "ltv":
            model, grid, x0, u = sc.model, sc.grid, sc.x0, sc.input_signal
        else:
            model, grid, x0, u = _default_ltv()
        x = simulate(model, grid, x0, u)
        meas = sample_measurements(
            model, grid, x, u, np.zeros((model.m,) * 2), np.zeros((model.p,) * 2), seed=0
        )
        segments = preintegrate_all(model, meas.u_bar, grid)
        ext = run_extension(model, meas.u_bar, np.zeros(model.n))
        out = dict(model=model, grid=grid, x0=x0, u=u, x=x, meas=meas,
                   segments=segments, ext=ext)
        self._ltv = out
        return out

    # -- rigid-body pieces ----------------------------------------------------

    def rigid(self):
        if self._rigid is not None:
            return self._rigid
        sc = self.scenario
        if sc is not None and sc.kind == "rigid":
            grid = sc.grid
            truth, stream = simulate_rigid_body(
                sc.omega_signal.values, sc.accel_signal.values, sc.pose0, grid,
                bias_omega=sc.bias_omega, bias_accel=sc.bias_accel, gravity=sc.gravity,
            )
            landmarks = sc.landmarks
            seed = sc.seed
        else:
            grid, truth, stream, landmarks, seed = _default_rigid()
        ext = run_manifold_extension(stream)
        pres = imu_preintegrate_all(stream)
        out = dict(grid=grid, truth=truth, stream=stream, landmarks=landmarks,
                   ext=ext, pres=pres, seed=seed)
        self._rigid = out
        return out


def _default_ltv():
    rng = np.random.default_rng(2024)
    n, m, p = 3, 2, 2
    W0 = rng.standard_normal((n, n))
    W1 = rng.standard_normal((n, n))

    def A(ts):
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        out = np.empty((len(ts), n, n))
        s1, s2 = np.sin(ts), np.cos(1.7 * ts)
        for i in range(len(ts)):
            M = W0 * s1[i] + W1 * s2[i]
            out[i] = 0.5 * (M - M.T) + 0.1 * (M + M.T)
        return out

    B = rng.standard_normal((n, m))
    C = rng.standard_normal((p, n))
    model = LtvModel.from_matrices(A, B, C)
    grid = TimeGrid.regular(0.0, 1e-3, 5.0, 11)
    u = SignalTrajectory.from_function(grid, lambda t: [np.sin(2 * t), np.cos(t)])
    x0 = rng.standard_normal(n)
    return model, grid, x0, u


def _default_rigid():
    grid = TimeGrid.regular(0.0, 1e-3, 4.0, 9)

    def omega(t):
        return np.array([0.6 * np.sin(1.3 * t), 0.4 * np.cos(0.7 * t), 0.5 * np.sin(t) + 0.2])

    def accel(t):
        return np.array([0.3 * np.cos(t), 0.5 * np.sin(0.8 * t), 0.2 * np.sin(1.7 * t)])

    pose0 = ExtendedPose(so3_exp([0.2, -0.1, 0.4]), [0.3, -0.2, 0.1], [1.0, 2.0, 0.5])
    truth, stream = simulate_rigid_body(
        omega, accel, pose0, grid,
        bias_omega=[0.01, -0.02, 0.005], bias_accel=[0.05, 0.02, -0.03],
    )
    landmarks = np.array([
        [3.0, 1.0, 0.5], [-1.0, 2.5, 1.5], [0.5, -2.0, 2.0],
        [2.0, 2.0, -1.0], [-2.0, -1.0, 0.0],
    ])
    return grid, truth, stream, landmarks, 2024


# ---------------------------------------------------------------------------
# the checks
# ---------------------------------------------------------------------------


def _check_transition_product(ctx: VerifyContext, tol: float) -> CheckResult:
    d = ctx.ltv()
    kf = list(d["grid"].keyframe_indices)
    P = np.eye(d["model"].n)
    worst = 0.0
    for k, seg in enumerate(d["segments"]):
        P = seg.F @ P
        Om = d["ext"].Omega[kf[k + 1]]
        worst = max(worst, np.linalg.norm(Om - P) / np.linalg.norm(Om))
    return CheckResult("transition-product", worst, tol, worst <= tol,
                       "keyframe transition equals the product of interval transitions")


def _check_intra_interval(ctx: VerifyContext, tol: float) -> CheckResult:
    d = ctx.ltv()
    grid, model = d["grid"], d["model"]
    kf = list(grid.keyframe_indices)
    worst = 0.0
    for k in range(len(kf) - 1):
        mid = (kf[k] + kf[k + 1]) // 2
        if mid == kf[k]:
            continue
        seg = preintegrate_segment(
            model, d["meas"].u_bar, grid.time_of(kf[k]), grid.time_of(mid)
        )
        Om_mid = d["ext"].Omega[mid]
        pred = seg.F @ d["ext"].Omega[kf[k]]
        worst = max(worst, np.linalg.norm(Om_mid - pred) / np.linalg.norm(Om_mid))
    return CheckResult("intra-interval-transition", worst, tol, worst <= tol,
                       "transition restarted at a keyframe matches the running one mid-interval")


def _check_forced_response(ctx: VerifyContext, tol: float) -> CheckResult:
    d = ctx.ltv()
    grid, model, ext = d["grid"], d["model"], d["ext"]
    kf = list(grid.keyframe_indices)
    worst = 0.0
    for k in range(len(kf) - 1):
        mid = (kf[k] + kf[k + 1]) // 2
        if mid == kf[k]:
            continue
        seg = preintegrate_segment(
            model, d["meas"].u_bar, grid.time_of(kf[k]), grid.time_of(mid)
        )
        rhs = ext.xi[mid] - ext.Omega[mid] @ np.linalg.solve(ext.Omega[kf[k]], ext.xi[kf[k]])
        worst = max(
            worst, np.linalg.norm(seg.v - rhs) / (1.0 + np.linalg.norm(seg.v))
        )
    return CheckResult("forced-response-identity", worst, tol, worst <= tol,
                       "interval forced response equals the extension minus its propagated start")


def _check_pebo_equals_hard(ctx: VerifyContext, tol: float) -> CheckResult:
    d = ctx.ltv()
    reg = build_regressor(d["meas"], d["ext"], d["model"])
    theta = estimate_theta(reg, 1.0)
    _, x_pebo = reconstruct_state(d["ext"], theta)
    est = solve_batch_hard(d["segments"], d["meas"], d["model"], 1.0)
    worst = float(np.max(np.linalg.norm(x_pebo - est.x_hat, axis=1)))
    return CheckResult("pebo-equals-hard-batch", worst, tol, worst <= tol,
                       "reconstructed trajectory equals the hard-constrained batch estimate")


def _check_observer_transition(ctx: VerifyContext, tol: float) -> CheckResult:
    d = ctx.ltv()
    kf = list(d["grid"].keyframe_indices)
    ext = d["ext"]
    worst = 0.0
    for k, seg in enumerate(d["segments"]):
        pred = ext.Omega[kf[k + 1]] @ np.linalg.inv(ext.Omega[kf[k]])
        worst = max(worst, np.linalg.norm(seg.F - pred) / np.linalg.norm(pred))
    return CheckResult("observer-transition", worst, tol, worst <= tol,
                       "interval transition equals the fundamental-matrix quotient")


def _check_rotation_chain(ctx: VerifyContext, tol: float) -> CheckResult:
    d = ctx.rigid()
    kf = list(d["grid"].keyframe_indices)
    ext = d["ext"]
    P = np.eye(3)
    worst = 0.0
    for k, pre in enumerate(d["pres"]):
        P = P @ pre.DR
        worst = max(worst, rotation_distance(ext.Q[kf[0]].T @ ext.Q[kf[k + 1]], P))
    return CheckResult("rotation-chain", worst, tol, worst <= tol,
                       "extension rotation relative to start equals the chained interval rotations")


def _check_weight_sweep(ctx: VerifyContext, tol: float) -> CheckResult:
    d = ctx.rigid()
    meas = sample_landmarks(d["truth"], d["landmarks"], 1e-4, seed=d["seed"])
    ext, pres = d["ext"], d["pres"]
    pebo = solve_manifold_pebo(ext, meas, landmarks=d["landmarks"], sigma_y=1.0)
    pairs = []
    for s2 in (1e-2, 1e-4, 1e-6):
        kest = solve_manifold_preintegration(
            pres, meas, s2, s2, s2, landmarks=d["landmarks"], sigma_y=1.0
        )
        pairs.append((s2, float(np.max(np.abs(kest.p - pebo.p)))))
    monotone = all(b[1] < a[1] for a, b in zip(pairs, pairs[1:]))
    final = pairs[-1][1]
    detail = "; ".join(f"sigma2={s2:g}: {dev:.3e}" for s2, dev in pairs)
    detail += " (noisy landmarks, noise-free inertial data)"
    passed = monotone and final <= tol
    return CheckResult("weight-sweep-limit", final, tol, passed, detail)


CHECKS: list[Check] = [
    Check("transition-product", 1e-8, _check_transition_product),
    Check("intra-interval-transition", 1e-8, _check_intra_interval),
    Check("forced-response-identity", 1e-8, _check_forced_response),
    Check("pebo-equals-hard-batch", 1e-8, _check_pebo_equals_hard),
    Check("observer-transition", 1e-8, _check_observer_transition),
    Check("rotation-chain", 1e-7, _check_rotation_chain),
    Check("weight-sweep-limit", 1e-4, _check_weight_sweep),
]


def run_verify(
    scenario: Scenario | None = None,
    tolerance: float | None = None,
    names: list[str] | None = None,
) -> list[CheckResult]:
    """Run every registered identity check (optionally a subset by name).

    ``tolerance`` overrides each check's own tolerance, which is mainly
    useful as a negative control (an absurdly small value must fail).
    """
    ctx = VerifyContext(scenario)
    results = []
    for check in CHECKS:
        if names is not None and check.name not in names:
            continue
        tol = check.tolerance if tolerance is None else tolerance
        results.append(check.run(ctx, tol))
    return results


def format_table(results: list[CheckResult]) -> str:
    name_w = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(name_w)}  {'max deviation':>14}  {'tolerance':>10}  result"]
    for r in results:
        status = "pass" if r.passed else "FAIL"
        lines.append(
            f"{r.name.ljust(name_w)}  {r.deviation:>14.3e}  {r.tolerance:>10.1e}  {status}"
        )
    return "\n".join(lines)
