"""Body-frame dynamic extension for rigid-body PEBO.

The observer state is carried in the body-fixed frame: the extension
integrates a rotation copy Q (Q' = Q hat(w)), a 9-dimensional state copy
xi and its 9x9 fundamental matrix Omega for the linear body-frame dynamics
of (v_B, p_B, g_c), where v_B = R'v, p_B = R'p and g_c is the gravity
vector seen in the (constant) frame Q_c = R Q'. Because R Q' is constant
along the motion, the true body-frame state is xi + Omega (theta - xi0)
for a constant 9-vector theta, and attitude is recovered as R = Q_c Q.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import IntegrationDivergedError
from ..grid import TimeGrid
from ..so3 import hat, project_so3
from .kinematics import PROJECT_EVERY, ImuStream


@dataclass(frozen=True)
class ManifoldPeboExtension:
    """Fine-grid trajectories of (Q, xi, Omega) with Omega(t0) = I_9."""

    grid: TimeGrid
    xi0: np.ndarray     # (9,)
    Q: np.ndarray       # (n_points, 3, 3)
    xi: np.ndarray      # (n_points, 9)
    Omega: np.ndarray   # (n_points, 9, 9)
    gravity: np.ndarray  # (3,)

    def at_keyframes(self):
        kf = list(self.grid.keyframe_indices)
        return self.Q[kf], self.xi[kf], self.Omega[kf]


_I3 = np.eye(3)


def _assemble_A(A: np.ndarray, what: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Fill the 9x9 body-frame system matrix in place and return it.

        [ -hat(w)   0      Q' ]
        [  I      -hat(w)  0  ]
        [  0        0      0  ]

    The I coupling realizes p_B' = v_B - hat(w) p_B for p_B = R'p.
    """
    A[0:3, 0:3] = -what
    A[0:3, 6:9] = Q.T
    A[3:6, 0:3] = _I3
    A[3:6, 3:6] = -what
    return A


def run_manifold_extension(
    stream: ImuStream, xi0=None, Q0=None
) -> ManifoldPeboExtension:
    """Integrate the dynamic extension (Q, xi, Omega) over the full horizon.

    xi0 defaults to zero and Q0 to the identity; any Q0 is valid since only
    the product of the constant frame with Q matters downstream.
    """
    grid = stream.grid
    xi0 = np.zeros(9) if xi0 is None else np.asarray(xi0, dtype=float).reshape(9)
    Q = np.eye(3) if Q0 is None else np.array(Q0, dtype=float)
    w_half, a_half = stream.corrected_half_tables()
    dt = grid.dt
    kf = set(grid.keyframe_indices)

    n_pts = grid.n_points
    Q_out = np.empty((n_pts, 3, 3))
    xi_out = np.empty((n_pts, 9))
    Om_out = np.empty((n_pts, 9, 9))
    xi = xi0.copy()
    Om = np.eye(9)
    Q_out[0], xi_out[0], Om_out[0] = Q, xi, Om

    A1 = np.zeros((9, 9))
    A2 = np.zeros((9, 9))
    A4 = np.zeros((9, 9))
    B = np.zeros(9)

    for j in range(grid.n_steps):
        h = 2 * j
        w1, w2, w4 = hat(w_half[h]), hat(w_half[h + 1]), hat(w_half[h + 2])

        # stage 1 at t
        _assemble_A(A1, w1, Q)
        B[0:3] = a_half[h]
        kQ1 = Q @ w1
        kx1 = A1 @ xi + B
        kO1 = A1 @ Om

        # stages 2 and 3 at t + dt/2 (A depends on the staged Q)
        Q2 = Q + 0.5 * dt * kQ1
        _assemble_A(A2, w2, Q2)
        B[0:3] = a_half[h + 1]
        kQ2 = Q2 @ w2
        kx2 = A2 @ (xi + 0.5 * dt * kx1) + B
        kO2 = A2 @ (Om + 0.5 * dt * kO1)

        Q3 = Q + 0.5 * dt * kQ2
        _assemble_A(A2, w2, Q3)
        kQ3 = Q3 @ w2
        kx3 = A2 @ (xi + 0.5 * dt * kx2) + B
        kO3 = A2 @ (Om + 0.5 * dt * kO2)

        # stage 4 at t + dt
        Q4 = Q + dt * kQ3
        _assemble_A(A4, w4, Q4)
        B[0:3] = a_half[h + 2]
        kQ4 = Q4 @ w4
        kx4 = A4 @ (xi + dt * kx3) + B
        kO4 = A4 @ (Om + dt * kO3)

        Q = Q + (dt / 6.0) * (kQ1 + 2.0 * kQ2 + 2.0 * kQ3 + kQ4)
        xi = xi + (dt / 6.0) * (kx1 + 2.0 * kx2 + 2.0 * kx3 + kx4)
        Om = Om + (dt / 6.0) * (kO1 + 2.0 * kO2 + 2.0 * kO3 + kO4)

        i = j + 1
        if i % PROJECT_EVERY == 0 or i in kf:
            Q = project_so3(Q)
        if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(xi)) and np.all(np.isfinite(Om))):
            raise IntegrationDivergedError(step=i, t=grid.time_of(i))
        Q_out[i], xi_out[i], Om_out[i] = Q, xi, Om

    return ManifoldPeboExtension(
        grid=grid, xi0=xi0, Q=Q_out, xi=xi_out, Omega=Om_out, gravity=stream.gravity
    )


@dataclass(frozen=True)
class ManifoldReconstruction:
    """Keyframe poses recovered from (Q_c, theta)."""

    times: np.ndarray
    R: np.ndarray       # (K, 3, 3)
    v: np.ndarray       # (K, 3) inertial
    p: np.ndarray       # (K, 3) inertial
    v_body: np.ndarray  # (K, 3)
    p_body: np.ndarray  # (K, 3)
    g_c: np.ndarray     # (K, 3) should be constant over k


def reconstruct_manifold_state(
    ext: ManifoldPeboExtension, Q_c, theta, *, fine: bool = False
) -> ManifoldReconstruction:
    """Recover keyframe poses: R = Q_c Q_t, body state from xi/Omega/theta.

    theta stacks (v_B(t0), p_B(t0), g_c); inertial velocity and position
    are R v_B and R p_B. The xi0 term cancels, so the reconstruction is
    independent of the extension's initial condition.
    """
    Q_c = np.asarray(Q_c, dtype=float)
    theta = np.asarray(theta, dtype=float).reshape(9)
    if fine:
        idx = np.arange(ext.grid.n_points)
        times = ext.grid.times()
    else:
        idx = np.asarray(ext.grid.keyframe_indices, dtype=int)
        times = ext.grid.keyframe_times()
    eta = ext.xi[idx] + np.einsum("kij,j->ki", ext.Omega[idx], theta - ext.xi0)
    R = np.einsum("ij,kjl->kil", Q_c, ext.Q[idx])
    v_body = eta[:, 0:3]
    p_body = eta[:, 3:6]
    return ManifoldReconstruction(
        times=times,
        R=R,
        v=np.einsum("kij,kj->ki", R, v_body),
        p=np.einsum("kij,kj->ki", R, p_body),
        v_body=v_body,
        p_body=p_body,
        g_c=eta[:, 6:9],
    )
