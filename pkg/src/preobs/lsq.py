"""Dense linear least squares with explicit rank handling.

Solves are done by orthogonal factorization of the stacked residual system
(never by forming normal equations): the stacked systems arising from
unstable dynamics can be severely ill-conditioned.
"""

from __future__ import annotations

import numpy as np

from .errors import RankDeficientError

# singular values below RCOND * largest are treated as zero
RCOND = 1e-10


def solve_stacked(
    A: np.ndarray,
    b: np.ndarray,
    *,
    allow_deficient: bool = False,
    label: str = "least-squares system",
) -> np.ndarray:
    """Minimize ||A z - b|| for a dense stacked system.

    Raises RankDeficientError (reporting the nullspace dimension) when the
    system does not determine z, unless ``allow_deficient`` is set, in
    which case the minimum-norm solution is returned.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    if A.ndim != 2 or A.shape[0] != b.shape[0]:
        raise ValueError(f"incompatible shapes {A.shape} vs {b.shape}")
    z, _, rank, _ = np.linalg.lstsq(A, b, rcond=RCOND)
    if rank < A.shape[1] and not allow_deficient:
        raise RankDeficientError(A.shape[1] - rank, f"{label} is rank deficient")
    return z
