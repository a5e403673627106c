"""Rank correlation and scaling-factor variance tools.

Two jobs live here.  First, comparing how different training setups
rank their weight matrices by average scaling factor: Kendall tau and
Spearman rho over rank permutations, with an exact Kendall null
distribution for the small matrix counts that occur in practice.
Second, a Monte-Carlo study of how the variance of the matrix-level
scaling factor phi shrinks against the per-element Adam factor psi as
the number of averaged columns grows.
"""

from dataclasses import dataclass

import numpy as np
from scipy import special

from fira import models

# Largest n for which the Kendall p-value uses the exact null
# distribution of discordant-pair counts; beyond that the usual normal
# approximation takes over.
KENDALL_EXACT_LIMIT = 12

# Per-matrix scaling-factor rankings measured on three reference
# training setups of the same ten-matrix model (full-rank Adam and two
# low-rank runs).  These are the built-in inputs of the rank-sim
# command.
REFERENCE_RANKINGS = {
    "r1": (7, 6, 1, 2, 4, 8, 5, 10, 9, 3),
    "r2": (7, 8, 2, 1, 5, 4, 6, 10, 9, 3),
    "r3": (6, 8, 2, 1, 5, 4, 7, 10, 9, 3),
}


def as_ranking(values) -> np.ndarray:
    """Validate a rank sequence: a permutation of 1..n as an int array."""
    arr = np.asarray(values)
    if arr.ndim != 1 or arr.shape[0] < 2:
        raise ValueError("a ranking needs at least two entries in 1-D")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == np.floor(arr)):
            raise ValueError("rankings must be integers")
        arr = arr.astype(np.int64)
    n = arr.shape[0]
    if sorted(arr.tolist()) != list(range(1, n + 1)):
        raise ValueError(f"rankings must be a permutation of 1..{n}")
    return arr.astype(np.int64)


@dataclass(frozen=True)
class CorrelationResult:
    coefficient: float
    p_value: float
    method: str


def _inversion_counts(n: int) -> np.ndarray:
    """Number of permutations of n items with k inversions, k = 0..max.

    Built by convolving uniform blocks; counts stay far below 2**53 for
    the sizes the exact Kendall test handles, so float64 is exact.
    """
    counts = np.ones(1)
    for i in range(2, n + 1):
        counts = np.convolve(counts, np.ones(i))
    return counts


def kendall_tau(a, b) -> CorrelationResult:
    """Kendall rank correlation with a two-sided p-value.

    tau = (concordant - discordant) / (n(n-1)/2) over all index pairs.
    For n <= KENDALL_EXACT_LIMIT the p-value sums the exact null
    distribution of discordant counts (permutation inversions);
    otherwise it uses the normal approximation of tau.
    """
    a = as_ranking(a)
    b = as_ranking(b)
    if a.shape != b.shape:
        raise ValueError("rankings must have equal length")
    n = a.shape[0]
    concordant = discordant = 0
    for i in range(n - 1):
        for j in range(i + 1, n):
            s = (a[i] - a[j]) * (b[i] - b[j])
            if s > 0:
                concordant += 1
            elif s < 0:
                discordant += 1
    pairs = n * (n - 1) // 2
    tau = (concordant - discordant) / pairs

    if n <= KENDALL_EXACT_LIMIT:
        counts = _inversion_counts(n)
        total = counts.sum()
        low = counts[: discordant + 1].sum() / total
        high = counts[discordant:].sum() / total
        p = min(1.0, 2.0 * min(low, high))
    else:
        z = 3.0 * tau * np.sqrt(n * (n - 1)) / np.sqrt(2.0 * (2 * n + 5))
        p = 2.0 * special.ndtr(-abs(z))
    return CorrelationResult(float(tau), float(p), "kendall")


def spearman_rho(a, b) -> CorrelationResult:
    """Spearman rank correlation with a two-sided p-value.

    rho = 1 - 6 sum(d^2) / (n(n^2-1)); the p-value comes from the
    t-statistic rho * sqrt((n-2)/(1-rho^2)) with n-2 degrees of
    freedom.  |rho| = 1 maps to p = 0, and n = 2 (no degrees of
    freedom) to p = 1.
    """
    a = as_ranking(a)
    b = as_ranking(b)
    if a.shape != b.shape:
        raise ValueError("rankings must have equal length")
    n = a.shape[0]
    d = a.astype(np.float64) - b.astype(np.float64)
    rho = 1.0 - 6.0 * float(d @ d) / (n * (n * n - 1))
    if n <= 2:
        p = 1.0
    elif 1.0 - rho * rho < 1e-15:
        p = 0.0
    else:
        t = rho * np.sqrt((n - 2) / (1.0 - rho * rho))
        p = 2.0 * float(special.stdtr(n - 2, -abs(t)))
    return CorrelationResult(float(rho), float(p), "spearman")


def average_phi(record: models.TrainRecord) -> np.ndarray:
    """Mean scaling factor of each weight matrix over a run."""
    if not record.steps:
        raise ValueError("record holds no steps")
    return np.array([
        float(np.mean([row.phis[i] for row in record.steps]))
        for i in range(len(record.matrix_names))
    ])


def trace_to_ranking(averages) -> np.ndarray:
    """Rank matrices by average scaling factor, 1 = largest.

    Ties break toward the lower matrix index.  For averages
    [0.3, 0.1, 0.2] the result is [1, 3, 2].
    """
    arr = np.asarray(averages, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 2:
        raise ValueError("need at least two averages in 1-D")
    if not np.isfinite(arr).all():
        raise ValueError("averages must be finite")
    order = np.argsort(-arr, kind="stable")
    ranks = np.empty(arr.shape[0], dtype=np.int64)
    ranks[order] = np.arange(1, arr.shape[0] + 1)
    return ranks


# ---------------------------------------------------------------------------
# Scaling-factor variance simulation.


@dataclass(frozen=True)
class VarianceSimConfig:
    """Monte-Carlo setup for the phi-vs-psi variance comparison.

    Each trial draws ``rank`` independent gradient histories of length
    ``steps``; psi is the per-history second-moment correction factor
    and phi aggregates the final gradients across histories.  With
    exclude_current the final gradient is left out of each psi history,
    which makes the weights and the psi factors independent.
    """

    rank: int
    steps: int = 100
    trials: int = 100_000
    beta2: float = 0.999
    sigma: float = 1.0
    seed: int = 42
    exclude_current: bool = True

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.steps < 2:
            raise ValueError(f"steps must be >= 2, got {self.steps}")
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if not 0 < self.beta2 < 1:
            raise ValueError(f"beta2 must be in (0, 1), got {self.beta2}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")


@dataclass(frozen=True)
class VarianceResult:
    var_phi: float
    var_psi: float
    var_phi_sq: float
    var_psi_sq: float

    @property
    def sq_ratio(self) -> float:
        """var(phi^2) / var(psi^2), the quantity expected near 3/(n+2)."""
        return self.var_phi_sq / self.var_psi_sq


def simulate_variance(cfg: VarianceSimConfig) -> VarianceResult:
    """Empirical variances of phi, psi and their squares.

    psi_i^2 = (1 - beta2^t) / ((1 - beta2) * sum_j beta2^(t-j) g_ij^2)
    with the sum over the history (excluding the final gradient when
    exclude_current is set), and phi^2 averages the psi_i^2 with
    weights proportional to the squared final gradients.

    Each trial draws from its own counter-based stream keyed by
    (seed, trial), so results do not depend on scheduling or batching.
    Degenerate draws (a zero denominator, impossible in practice) are
    re-sampled from the same stream.
    """
    t = cfg.steps
    hist = t - 1 if cfg.exclude_current else t
    # weights beta2^(t-j) for j = 1..hist
    w_hist = cfg.beta2 ** np.arange(t - 1, t - 1 - hist, -1, dtype=np.float64)
    numerator = 1.0 - cfg.beta2**t
    one_minus = 1.0 - cfg.beta2

    psi_sq_all = np.empty((cfg.trials, cfg.rank))
    phi_sq_all = np.empty(cfg.trials)
    for trial in range(cfg.trials):
        key = np.array([cfg.seed, trial], dtype=np.uint64)
        rng = np.random.Generator(np.random.Philox(key=key))
        while True:
            g = cfg.sigma * rng.standard_normal((cfg.rank, t))
            denom = one_minus * ((g[:, :hist] * g[:, :hist]) @ w_hist)
            final_sq = g[:, -1] * g[:, -1]
            total = final_sq.sum()
            if total > 0.0 and denom.min() > 0.0:
                break
        psi_sq = numerator / denom
        psi_sq_all[trial] = psi_sq
        if cfg.rank == 1:
            # phi == psi exactly when there is nothing to average
            phi_sq_all[trial] = psi_sq[0]
        else:
            phi_sq_all[trial] = float((psi_sq * final_sq).sum() / total)

    psi_sq_flat = psi_sq_all.reshape(-1)
    return VarianceResult(
        var_phi=float(np.var(np.sqrt(phi_sq_all), ddof=1)),
        var_psi=float(np.var(np.sqrt(psi_sq_flat), ddof=1)),
        var_phi_sq=float(np.var(phi_sq_all, ddof=1)),
        var_psi_sq=float(np.var(psi_sq_flat, ddof=1)),
    )
