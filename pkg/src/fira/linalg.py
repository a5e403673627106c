"""Dense matrix primitives and a deterministic truncated SVD.

All heavy data is carried as C-contiguous float64 numpy arrays.  The
SVD is a cyclic one-sided Jacobi on the side with fewer columns: the
gradient matrices handled here stay small (a few hundred rows at most)
and Jacobi gives singular vectors that are reproducible to the last bit
across runs, which the rest of the package relies on for byte-identical
outputs.
"""

from dataclasses import dataclass

import numpy as np

from fira import backend

# Jacobi stops once every column pair has |cos angle| below this, or
# raises ConvergenceError after MAX_SWEEPS full sweeps.
JACOBI_TOL = 1e-12
MAX_SWEEPS = 60


class ConvergenceError(RuntimeError):
    """Iterative routine failed to reach its tolerance.

    ``off_diagonal`` carries the worst remaining column correlation so
    callers can report how far from convergence the sweep stopped.
    """

    def __init__(self, message: str, off_diagonal: float):
        super().__init__(message)
        self.off_diagonal = off_diagonal


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Validate and convert ``data`` to a 2-D C-contiguous float64 array.

    Raises ValueError for non-2-D input or non-finite entries.
    """
    arr = np.array(data, dtype=np.float64, order="C")
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size and not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def frobenius_norm(m: np.ndarray) -> float:
    """Frobenius norm of a matrix (or Euclidean norm of a vector)."""
    return float(np.linalg.norm(m))


def column_norms(m: np.ndarray) -> np.ndarray:
    """Euclidean norm of each column, as a 1-D array of length cols."""
    return np.linalg.norm(m, axis=0)


def orthonormality_defect(p: np.ndarray) -> float:
    """Frobenius distance of P^T P from the identity."""
    r = p.shape[1]
    return float(np.linalg.norm(p.T @ p - np.eye(r)))


@dataclass(frozen=True)
class SvdResult:
    """Truncated singular value decomposition g ~ U diag(s) V^T.

    left_vectors: (m, k) orthonormal columns.
    singular_values: (k,) non-negative, non-increasing.
    right_vectors: (n, k) orthonormal columns.
    """

    left_vectors: np.ndarray
    singular_values: np.ndarray
    right_vectors: np.ndarray


def _fix_signs(u: np.ndarray, v: np.ndarray) -> None:
    """Flip (u_k, v_k) pairs so each u column leads with a non-negative
    component.  "First nonzero" is judged against a relative threshold
    so roundoff-sized entries do not decide the sign."""
    for k in range(u.shape[1]):
        col = u[:, k]
        cutoff = 1e-12 * np.abs(col).max()
        idx = np.flatnonzero(np.abs(col) > cutoff)
        if idx.size and col[idx[0]] < 0.0:
            u[:, k] = -col
            v[:, k] = -v[:, k]


def _complete_columns(u: np.ndarray, start: int) -> None:
    """Replace columns start.. of ``u`` with unit vectors orthogonal to
    the preceding columns, chosen deterministically from the standard
    basis (needed when the input was rank-deficient)."""
    p = u.shape[0]
    cand = 0
    for k in range(start, u.shape[1]):
        while True:
            if cand >= p:
                raise ConvergenceError(
                    "could not complete an orthonormal basis", 0.0
                )
            e = np.zeros(p)
            e[cand] = 1.0
            cand += 1
            e -= u[:, :k] @ (u[:, :k].T @ e)
            norm = np.linalg.norm(e)
            if norm > 0.5:
                u[:, k] = e / norm
                break


def jacobi_svd(g: np.ndarray) -> SvdResult:
    """Full thin SVD of ``g`` via cyclic one-sided Jacobi.

    The sweep runs on whichever of g / g^T has fewer columns, so the
    rotation count scales with min(m, n).  Singular values come back
    sorted descending; vector signs follow a fixed convention so the
    decomposition of a given matrix is always the same.

    Raises ConvergenceError if the sweeps do not reach JACOBI_TOL.
    """
    g = as_matrix(g, "g")
    m, n = g.shape
    if m == 0 or n == 0:
        raise ValueError(f"g must be non-empty, got shape {g.shape}")
    transposed = m < n
    work = np.array(g.T if transposed else g, dtype=np.float64, order="C")
    q = work.shape[1]
    rotations = np.eye(q, order="C")
    sweeps, off = backend.jacobi_sweeps(work, rotations, JACOBI_TOL, MAX_SWEEPS)
    if off > JACOBI_TOL:
        raise ConvergenceError(
            f"Jacobi SVD did not converge in {sweeps} sweeps "
            f"(off-diagonal correlation {off:.3e})",
            float(off),
        )
    sigma = column_norms(work)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    rotations = rotations[:, order]

    # Columns of the worked matrix normalize to the left singular
    # vectors of the worked side; zero singular values leave them
    # undefined, so those columns are completed from the standard basis.
    cutoff = sigma[0] * max(work.shape) * np.finfo(np.float64).eps
    keep = int(np.sum(sigma > cutoff))
    u_work = np.zeros_like(work)
    if keep:
        u_work[:, :keep] = work[:, :keep] / sigma[:keep]
    _complete_columns(u_work, keep)

    if transposed:
        u, v = rotations, u_work
    else:
        u, v = u_work, rotations
    _fix_signs(u, v)
    return SvdResult(
        left_vectors=np.ascontiguousarray(u),
        singular_values=sigma,
        right_vectors=np.ascontiguousarray(v),
    )


def truncated_svd(g: np.ndarray, r: int) -> SvdResult:
    """Top-``r`` singular triplets of ``g``.

    Computes the full Jacobi SVD and slices it; the matrices this
    package handles are small enough that the simplicity is worth more
    than a Lanczos-style partial solve.
    """
    g = as_matrix(g, "g")
    if not 1 <= r <= min(g.shape):
        raise ValueError(
            f"rank must satisfy 1 <= r <= min{g.shape}, got {r}"
        )
    full = jacobi_svd(g)
    return SvdResult(
        left_vectors=np.ascontiguousarray(full.left_vectors[:, :r]),
        singular_values=full.singular_values[:r].copy(),
        right_vectors=np.ascontiguousarray(full.right_vectors[:, :r]),
    )
