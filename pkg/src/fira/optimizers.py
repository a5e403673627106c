"""Optimizer update rules.

Plain SGD and Adam operate on full matrices.  The projected family
(GaLore, GaLore with raw residual added back, and Fira) keeps Adam
moments only for the low-rank image of the gradient.  Fira additionally
applies the full-rank residual after rescaling it by the per-column
ratio Adam produced inside the subspace, then bounds its step-to-step
norm growth:

    R = project(G)                    low-rank image
    N = bias-corrected Adam step on R
    S = G - back(R)                   residual
    S <- S * ||N_col|| / (||R_col|| + eps)        per column
    S <- S * gamma / max(||S|| / (prev + eps), gamma)
    W <- W - lr * alpha * (back(N) + S)

All step functions are pure: they return new arrays and new state
objects and never mutate their inputs.
"""

import enum
import io
from dataclasses import dataclass, replace

import numpy as np

from fira import backend, linalg, projector


class ScalingMode(enum.Enum):
    NONE = "none"
    MATRIX = "matrix"
    COLUMN = "column"


class SmoothingMode(enum.Enum):
    NONE = "none"
    LIMITER = "limiter"
    CLIP = "clip"


@dataclass(frozen=True)
class Hyperparams:
    """Shared optimizer settings.

    galore_scale is the alpha multiplier applied to projected updates,
    limiter_threshold the gamma bound on residual norm growth.  rank
    and switch_period only matter for the projected optimizers; rank
    may stay None for full-rank use.  alpha_on_residual controls
    whether the residual term of galore_add_step is scaled by alpha
    like the projected term (the default) or applied unscaled.
    """

    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    galore_scale: float = 0.25
    limiter_threshold: float = 1.01
    clip_threshold: float = 1.0
    rank: int | None = None
    switch_period: int = 200
    alpha_on_residual: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.beta1 < 1:
            raise ValueError(f"beta1 must be in [0, 1), got {self.beta1}")
        if not 0 <= self.beta2 < 1:
            raise ValueError(f"beta2 must be in [0, 1), got {self.beta2}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.galore_scale > 0:
            raise ValueError(f"galore_scale must be > 0, got {self.galore_scale}")
        if not self.limiter_threshold > 1:
            raise ValueError(
                f"limiter_threshold must be > 1, got {self.limiter_threshold}"
            )
        if not self.clip_threshold > 0:
            raise ValueError(
                f"clip_threshold must be > 0, got {self.clip_threshold}"
            )
        if self.rank is not None and self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.switch_period < 1:
            raise ValueError(
                f"switch_period must be >= 1, got {self.switch_period}"
            )


@dataclass(frozen=True)
class AdamMoments:
    """First and second moment estimates plus the update count.

    step_count is the number of updates already folded in; bias
    correction at the next update uses step_count + 1.
    """

    m_first: np.ndarray
    v_second: np.ndarray
    step_count: int

    @classmethod
    def zeros(cls, shape) -> "AdamMoments":
        return cls(np.zeros(shape), np.zeros(shape), 0)


@dataclass(frozen=True)
class FiraState:
    """Per-matrix state for fira_step.

    moments may be None before the first step (they are created lazily
    once the low-rank shape is known).  prev_residual_norm holds the
    post-smoothing residual norm of the previous step and is None until
    one step has run; the limiter passes the first step through
    unchanged and only starts bounding from the second.
    """

    moments: AdamMoments | None = None
    prev_residual_norm: float | None = None
    scaling: ScalingMode = ScalingMode.COLUMN
    smoothing: SmoothingMode = SmoothingMode.LIMITER


def sgd_step(
    w: np.ndarray, g: np.ndarray, hp: Hyperparams
) -> np.ndarray:
    """Plain gradient descent: w - lr * g."""
    if w.shape != g.shape:
        raise ValueError(f"shape mismatch: w {w.shape} vs g {g.shape}")
    return w - hp.learning_rate * g


def adam_correct(
    g: np.ndarray, moments: AdamMoments, hp: Hyperparams
) -> tuple[np.ndarray, AdamMoments]:
    """One Adam moment update plus bias correction.

    Returns the update direction sqrt(1-beta2^t)/(1-beta1^t) *
    M/(sqrt(V)+eps) and the advanced moments, where t counts this
    update (the first call on fresh moments uses t = 1).
    """
    if g.shape != moments.m_first.shape:
        raise ValueError(
            f"shape mismatch: g {g.shape} vs moments {moments.m_first.shape}"
        )
    m = moments.m_first.copy()
    v = moments.v_second.copy()
    t = moments.step_count + 1
    n_corr = backend.adam_update(m, v, g, hp.beta1, hp.beta2, hp.epsilon, t)
    return np.asarray(n_corr), AdamMoments(m, v, t)


def corrected_direction(moments: AdamMoments, hp: Hyperparams) -> np.ndarray:
    """Recompute the direction adam_correct returned for the stored
    moments, without advancing them.  Requires step_count >= 1."""
    if moments.step_count < 1:
        raise ValueError("moments hold no update yet")
    t = moments.step_count
    correction = np.sqrt(1.0 - hp.beta2**t) / (1.0 - hp.beta1**t)
    return correction * (moments.m_first / (np.sqrt(moments.v_second) + hp.epsilon))


def adam_step(
    w: np.ndarray, g: np.ndarray, moments: AdamMoments, hp: Hyperparams
) -> tuple[np.ndarray, AdamMoments]:
    """Full-rank Adam: w - lr * corrected direction."""
    if w.shape != g.shape:
        raise ValueError(f"shape mismatch: w {w.shape} vs g {g.shape}")
    n_corr, moments = adam_correct(g, moments, hp)
    return w - hp.learning_rate * n_corr, moments


def _advance(proj, g, hp, step):
    """Shared head of the projected optimizers: refresh the projector
    on schedule (or build it if absent) and project the gradient."""
    if proj is None:
        if hp.rank is None:
            raise ValueError("projected optimizers need hp.rank")
        proj = projector.refresh(g, hp.rank, step, hp.switch_period)
    else:
        proj = projector.maybe_refresh(proj, g, step)
    return proj, projector.project(proj, g)


def galore_step(
    w: np.ndarray,
    g: np.ndarray,
    proj: projector.GradProjector | None,
    moments: AdamMoments | None,
    hp: Hyperparams,
    step: int,
) -> tuple[np.ndarray, AdamMoments, projector.GradProjector]:
    """Low-rank Adam: the update is the back-projected corrected
    low-rank gradient only; the residual is dropped."""
    g = linalg.as_matrix(g, "g")
    proj, r_mat = _advance(proj, g, hp, step)
    if moments is None:
        moments = AdamMoments.zeros(r_mat.shape)
    n_corr, moments = adam_correct(r_mat, moments, hp)
    update = hp.galore_scale * projector.project_back(proj, n_corr)
    return w - hp.learning_rate * update, moments, proj


def galore_add_step(
    w: np.ndarray,
    g: np.ndarray,
    proj: projector.GradProjector | None,
    moments: AdamMoments | None,
    hp: Hyperparams,
    step: int,
) -> tuple[np.ndarray, AdamMoments, projector.GradProjector]:
    """Low-rank Adam plus the raw residual, with no rescaling.

    With alpha_on_residual (default) the update is
    alpha * (back(N) + S); otherwise alpha * back(N) + S.
    """
    g = linalg.as_matrix(g, "g")
    proj, r_mat = _advance(proj, g, hp, step)
    if moments is None:
        moments = AdamMoments.zeros(r_mat.shape)
    n_corr, moments = adam_correct(r_mat, moments, hp)
    s = projector.residual(proj, g, r_mat)
    back = projector.project_back(proj, n_corr)
    if hp.alpha_on_residual:
        update = hp.galore_scale * (back + s)
    else:
        update = hp.galore_scale * back + s
    return w - hp.learning_rate * update, moments, proj


def scaling_factor_matrix(
    n_corr: np.ndarray, r_mat: np.ndarray, eps: float
) -> float:
    """Whole-matrix ratio ||N|| / (||R|| + eps)."""
    return linalg.frobenius_norm(n_corr) / (linalg.frobenius_norm(r_mat) + eps)


def scaling_factor_columns(
    n_corr: np.ndarray, r_mat: np.ndarray, eps: float
) -> np.ndarray:
    """Per-column ratios ||N_col|| / (||R_col|| + eps)."""
    if n_corr.shape != r_mat.shape:
        raise ValueError(
            f"shape mismatch: n {n_corr.shape} vs r {r_mat.shape}"
        )
    return linalg.column_norms(n_corr) / (linalg.column_norms(r_mat) + eps)


def apply_column_scaling(s: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Scale column i of ``s`` by k[i]."""
    if k.shape != (s.shape[1],):
        raise ValueError(
            f"scaling vector length {k.shape} does not match columns "
            f"{s.shape[1]}"
        )
    return s * k


def norm_growth_limit(
    s: np.ndarray, prev_norm: float | None, gamma: float, eps: float
) -> tuple[np.ndarray, float]:
    """Bound step-to-step residual norm growth.

    Multiplies ``s`` by gamma / max(||s|| / (prev_norm + eps), gamma),
    which is 1 while the growth ratio stays at or below gamma and
    shrinks the norm to exactly gamma * (prev_norm + eps) otherwise.
    The first step (prev_norm None) passes through unchanged.

    Returns the adjusted matrix and its norm (the next prev_norm).
    """
    norm = linalg.frobenius_norm(s)
    if prev_norm is None:
        return s.copy(), norm
    ratio = norm / (prev_norm + eps)
    factor = gamma / max(ratio, gamma)
    adjusted = s * factor
    return adjusted, linalg.frobenius_norm(adjusted)


def gradient_clip(s: np.ndarray, threshold: float) -> np.ndarray:
    """Classic norm clip: rescale to ||s|| == threshold when above."""
    norm = linalg.frobenius_norm(s)
    if norm > threshold:
        return s * (threshold / norm)
    return s.copy()


def fira_step(
    w: np.ndarray,
    g: np.ndarray,
    proj: projector.GradProjector | None,
    state: FiraState,
    hp: Hyperparams,
    step: int,
) -> tuple[np.ndarray, FiraState, projector.GradProjector]:
    """One update with norm-scaled residual and growth limiting.

    Column scaling follows the projector orientation: left-projected
    matrices scale the n residual columns by the low-rank column
    ratios, right-projected (tall) matrices scale rows, which is the
    same operation on the transposed problem.
    """
    g = linalg.as_matrix(g, "g")
    proj, r_mat = _advance(proj, g, hp, step)
    moments = state.moments
    if moments is None:
        moments = AdamMoments.zeros(r_mat.shape)
    n_corr, moments = adam_correct(r_mat, moments, hp)
    s = projector.residual(proj, g, r_mat)

    if state.scaling is ScalingMode.COLUMN:
        if proj.orientation is projector.Orientation.LEFT:
            k = scaling_factor_columns(n_corr, r_mat, hp.epsilon)
            s = apply_column_scaling(s, k)
        else:
            k = scaling_factor_columns(n_corr.T, r_mat.T, hp.epsilon)
            s = apply_column_scaling(s.T, k).T
    elif state.scaling is ScalingMode.MATRIX:
        s = scaling_factor_matrix(n_corr, r_mat, hp.epsilon) * s

    if state.smoothing is SmoothingMode.LIMITER:
        s, prev = norm_growth_limit(
            s, state.prev_residual_norm, hp.limiter_threshold, hp.epsilon
        )
    elif state.smoothing is SmoothingMode.CLIP:
        s = gradient_clip(s, hp.clip_threshold)
        prev = linalg.frobenius_norm(s)
    else:
        prev = linalg.frobenius_norm(s)

    update = hp.galore_scale * (projector.project_back(proj, n_corr) + s)
    new_state = replace(state, moments=moments, prev_residual_norm=prev)
    return w - hp.learning_rate * update, new_state, proj


# ---------------------------------------------------------------------------
# Textual checkpoints.
#
# Optimizer state serializes to a line-oriented text format so resumed
# runs reproduce uninterrupted ones exactly: floats are written with
# repr(), which round-trips float64.  Entries live in a flat
# name -> value mapping; values may be int, float, str, None, or a
# 1-D/2-D float64 array.

_FORMAT_HEADER = "fira-optstate 1"


def save_optimizer_state(f, entries: dict) -> None:
    """Write a flat state mapping to an open text file."""
    if isinstance(f, str):
        with open(f, "w", encoding="ascii", newline="\n") as fh:
            save_optimizer_state(fh, entries)
            return
    f.write(_FORMAT_HEADER + "\n")
    f.write(f"count {len(entries)}\n")
    for name, value in entries.items():
        if " " in name:
            raise ValueError(f"state names must not contain spaces: {name!r}")
        if value is None:
            f.write(f"none {name}\n")
        elif isinstance(value, bool):
            raise ValueError(f"unsupported state value for {name!r}")
        elif isinstance(value, int):
            f.write(f"int {name} {value}\n")
        elif isinstance(value, float):
            f.write(f"float {name} {float(value)!r}\n")
        elif isinstance(value, str):
            if " " in value or "\n" in value:
                raise ValueError(
                    f"state strings must not contain whitespace: {value!r}"
                )
            f.write(f"str {name} {value}\n")
        elif isinstance(value, np.ndarray) and value.ndim == 1:
            f.write(f"vector {name} {value.shape[0]}\n")
            f.write(" ".join(repr(float(x)) for x in value) + "\n")
        elif isinstance(value, np.ndarray) and value.ndim == 2:
            f.write(f"matrix {name} {value.shape[0]} {value.shape[1]}\n")
            for row in value:
                f.write(" ".join(repr(float(x)) for x in row) + "\n")
        else:
            raise ValueError(f"unsupported state value for {name!r}")


def load_optimizer_state(f) -> dict:
    """Read back a mapping written by save_optimizer_state."""
    if isinstance(f, str):
        with open(f, "r", encoding="ascii") as fh:
            return load_optimizer_state(fh)
    header = f.readline().strip()
    if header != _FORMAT_HEADER:
        raise ValueError(f"not an optimizer state file (header {header!r})")
    count_line = f.readline().split()
    if len(count_line) != 2 or count_line[0] != "count":
        raise ValueError("malformed state file: missing count line")
    entries: dict = {}
    for _ in range(int(count_line[1])):
        parts = f.readline().split()
        if not parts:
            raise ValueError("malformed state file: truncated")
        kind = parts[0]
        if kind == "none":
            entries[parts[1]] = None
        elif kind == "int":
            entries[parts[1]] = int(parts[2])
        elif kind == "float":
            entries[parts[1]] = float(parts[2])
        elif kind == "str":
            entries[parts[1]] = parts[2]
        elif kind == "vector":
            n = int(parts[2])
            row = [float(x) for x in f.readline().split()]
            if len(row) != n:
                raise ValueError(f"bad vector length for {parts[1]!r}")
            entries[parts[1]] = np.array(row)
        elif kind == "matrix":
            rows, cols = int(parts[2]), int(parts[3])
            mat = np.empty((rows, cols))
            for i in range(rows):
                row = [float(x) for x in f.readline().split()]
                if len(row) != cols:
                    raise ValueError(f"bad row length for {parts[1]!r}")
                mat[i] = row
            entries[parts[1]] = mat
        else:
            raise ValueError(f"unknown state entry kind {kind!r}")
    return entries


def dumps_optimizer_state(entries: dict) -> str:
    """save_optimizer_state to a string."""
    buf = io.StringIO()
    save_optimizer_state(buf, entries)
    return buf.getvalue()


def loads_optimizer_state(text: str) -> dict:
    """load_optimizer_state from a string."""
    return load_optimizer_state(io.StringIO(text))
