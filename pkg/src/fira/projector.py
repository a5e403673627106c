"""Low-rank gradient projectors.

A projector pins down the rank-r subspace used by the projected
optimizers for one weight matrix.  The basis comes from the truncated
SVD of a recent gradient and is refreshed every ``switch_period``
steps.  Orientation follows the matrix shape: wide-or-square matrices
(m <= n) project from the left with the top left singular vectors,
tall matrices from the right.  Internally the tall case is handled by
transposing, running the left pipeline, and transposing back, so there
is a single code path.
"""

import enum
from dataclasses import dataclass

import numpy as np

from fira import linalg


class Orientation(enum.Enum):
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class GradProjector:
    """Frozen snapshot of one weight matrix's projection subspace.

    basis: (min(m, n), r) orthonormal columns.
    weight_shape: shape of the gradients this projector accepts.
    """

    basis: np.ndarray
    rank: int
    switch_period: int
    last_refresh_step: int
    orientation: Orientation
    weight_shape: tuple[int, int]


def refresh(g: np.ndarray, r: int, step: int, period: int) -> GradProjector:
    """Build a fresh projector from the current gradient.

    Tall gradients (rows > cols) get a right-side basis computed on the
    transpose; everything else projects from the left.
    """
    g = linalg.as_matrix(g, "g")
    m, n = g.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank must satisfy 1 <= r <= min{g.shape}, got {r}")
    if period < 1:
        raise ValueError(f"switch period must be >= 1, got {period}")
    if m <= n:
        orientation = Orientation.LEFT
        basis = linalg.truncated_svd(g, r).left_vectors
    else:
        orientation = Orientation.RIGHT
        basis = linalg.truncated_svd(g.T, r).left_vectors
    return GradProjector(
        basis=basis,
        rank=r,
        switch_period=period,
        last_refresh_step=step,
        orientation=orientation,
        weight_shape=(m, n),
    )


def maybe_refresh(proj: GradProjector, g: np.ndarray, step: int) -> GradProjector:
    """Refresh on schedule: a new basis whenever step is a multiple of
    the switch period, the same projector object otherwise."""
    if step % proj.switch_period == 0:
        return refresh(g, proj.rank, step, proj.switch_period)
    return proj


def _check_shape(proj: GradProjector, g: np.ndarray) -> None:
    if g.shape != proj.weight_shape:
        raise ValueError(
            f"gradient shape {g.shape} does not match projector shape "
            f"{proj.weight_shape}"
        )


def project(proj: GradProjector, g: np.ndarray) -> np.ndarray:
    """Low-rank image of the gradient: P^T g (left) or g P (right)."""
    _check_shape(proj, g)
    if proj.orientation is Orientation.LEFT:
        return proj.basis.T @ g
    return g @ proj.basis


def residual(proj: GradProjector, g: np.ndarray, r_mat: np.ndarray) -> np.ndarray:
    """Part of the gradient outside the subspace: g - back-projection
    of ``r_mat``, where ``r_mat`` must be project(proj, g)."""
    _check_shape(proj, g)
    return g - project_back(proj, r_mat)


def project_back(proj: GradProjector, r_mat: np.ndarray) -> np.ndarray:
    """Map a low-rank matrix back to full weight shape."""
    m, n = proj.weight_shape
    if proj.orientation is Orientation.LEFT:
        if r_mat.shape != (proj.rank, n):
            raise ValueError(
                f"low-rank matrix shape {r_mat.shape} does not match "
                f"({proj.rank}, {n})"
            )
        return proj.basis @ r_mat
    if r_mat.shape != (m, proj.rank):
        raise ValueError(
            f"low-rank matrix shape {r_mat.shape} does not match "
            f"({m}, {proj.rank})"
        )
    return r_mat @ proj.basis.T
