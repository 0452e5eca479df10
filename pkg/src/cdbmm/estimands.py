"""Groups from the two arms' partitions and their posterior causal summaries.

Group membership is fixed by the point-estimate partitions; posterior
uncertainty in GATE, GARR and ATE comes only from the imputed potential
outcomes across stored draws.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import gaussian_kde

from .model import Dataset
from .partition import Partition, canonical_labels

SMALL_GROUP = 5
GARR_ZERO_TOL = 1e-12


def _as_labels(p) -> np.ndarray:
    return p.labels if isinstance(p, Partition) else np.asarray(p).ravel()


def form_groups(partition0, partition1) -> np.ndarray:
    """Cartesian-product groups, labelled 1..G in order of first appearance."""
    a, b = _as_labels(partition0), _as_labels(partition1)
    if a.size != b.size:
        raise ValueError(f"partitions have different sizes: {a.size} vs {b.size}")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    key = ia.ravel().astype(np.int64) * (ib.max() + 1 if ib.size else 1) + ib.ravel()
    return canonical_labels(key) + 1


def _membership(groups: np.ndarray) -> np.ndarray:
    """(n, G) indicator matrix scaled so each column averages over its group."""
    groups = np.asarray(groups).ravel()
    G = int(groups.max())
    M = np.zeros((groups.size, G))
    M[np.arange(groups.size), groups - 1] = 1.0
    sizes = M.sum(axis=0)
    if np.any(sizes == 0):
        raise ValueError("group labels must be contiguous from 1")
    return M / sizes


@dataclass
class Summary:
    """Posterior mean, median and central 95% interval per column of ``samples``."""

    samples: np.ndarray
    mean: np.ndarray
    median: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @classmethod
    def of(cls, samples: np.ndarray) -> Summary:
        samples = np.asarray(samples, dtype=float)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns summarize to NaN
            lo, med, hi = np.nanquantile(samples, [0.025, 0.5, 0.975], axis=0)
            mean = np.nanmean(samples, axis=0)
        return cls(samples, mean, med, lo, hi)

    def squeeze(self) -> Summary:
        """Scalar summary of a single-column sample."""
        return Summary(self.samples[:, 0], *(float(v[0]) for v in (self.mean, self.median, self.lower, self.upper)))


def _potential_outcomes(draws) -> tuple[np.ndarray, np.ndarray]:
    y = draws.y_imp if hasattr(draws, "y_imp") else np.asarray(draws)
    return y[:, 0, :], y[:, 1, :]


def gate_posterior(draws, groups) -> Summary:
    """GATE_g at every draw: group mean of y(1) - y(0)."""
    y0, y1 = _potential_outcomes(draws)
    groups = np.asarray(groups).ravel()
    if groups.size != y0.shape[1]:
        raise ValueError("groups and draws cover different numbers of units")
    return Summary.of((y1 - y0) @ _membership(groups))


@dataclass
class GarrSummary(Summary):
    undefined_draws: np.ndarray | None = None  # per group count of near-zero denominators

    @property
    def defined(self) -> np.ndarray:
        return self.undefined_draws == 0


def garr_posterior(draws, groups) -> GarrSummary:
    """GARR_g at every draw: mean y(1) over mean y(0) within the group.

    Draws whose control-arm group mean is within ``GARR_ZERO_TOL`` of zero
    are counted; a group with any such draw is reported undefined (NaN).
    """
    y0, y1 = _potential_outcomes(draws)
    M = _membership(np.asarray(groups).ravel())
    num, den = y1 @ M, y0 @ M
    bad = np.abs(den) <= GARR_ZERO_TOL
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = num / den
    counts = bad.sum(axis=0)
    ratio[:, counts > 0] = np.nan
    s = Summary.of(ratio)
    return GarrSummary(s.samples, s.mean, s.median, s.lower, s.upper, counts)


def ate_posterior(draws) -> Summary:
    y0, y1 = _potential_outcomes(draws)
    return Summary.of((y1 - y0).mean(axis=1, keepdims=True)).squeeze()


def bias(estimate: float, truth: float) -> float:
    return float(estimate - truth)


def mse(estimates, truth: float) -> float:
    e = np.asarray(estimates, dtype=float)
    return float(np.mean((e - truth) ** 2))


def group_profiles(groups, data: Dataset) -> tuple[np.ndarray, list]:
    """Within-group covariate means (G x p) and the modal level of flagged categorical columns.

    The mode list has one entry per group: a dict from column name to its
    most frequent encoded level (smallest level on ties).
    """
    groups = np.asarray(groups).ravel()
    if groups.size != data.n:
        raise ValueError("groups and dataset cover different numbers of units")
    means = _membership(groups).T @ data.X
    modes = []
    for g in range(1, int(groups.max()) + 1):
        rows = data.X[groups == g]
        m = {}
        for j, (name, cat) in enumerate(zip(data.columns, data.categorical)):
            if cat:
                levels, counts = np.unique(rows[:, j], return_counts=True)
                m[name] = float(levels[np.argmax(counts)])
        modes.append(m)
    return means, modes


@dataclass
class GroupResult:
    partitions: tuple[Partition, Partition]
    groups: np.ndarray
    gate: Summary
    garr: GarrSummary
    ate: Summary
    sizes: np.ndarray
    profile_means: np.ndarray
    profile_modes: list
    min_size: int = SMALL_GROUP

    @property
    def n_groups(self) -> int:
        return self.sizes.size

    @property
    def small(self) -> np.ndarray:
        """Low-reliability flag for groups under ``min_size`` units."""
        return self.sizes < self.min_size


def summarize_groups(draws, partition0, partition1, data: Dataset, min_size: int = SMALL_GROUP) -> GroupResult:
    groups = form_groups(partition0, partition1)
    means, modes = group_profiles(groups, data)
    return GroupResult(
        partitions=(Partition(_as_labels(partition0)), Partition(_as_labels(partition1))),
        groups=groups,
        gate=gate_posterior(draws, groups),
        garr=garr_posterior(draws, groups),
        ate=ate_posterior(draws),
        sizes=np.bincount(groups)[1:],
        profile_means=means,
        profile_modes=modes,
        min_size=min_size,
    )


def density_grid(samples: np.ndarray, n_points: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-kernel density of each column on a shared grid.

    Columns with no spread, or with NaNs, get a zero density.
    """
    samples = np.asarray(samples, dtype=float)
    finite = samples[np.isfinite(samples)]
    if finite.size == 0:
        return np.zeros(n_points), np.zeros((n_points, samples.shape[1]))
    lo, hi = finite.min(), finite.max()
    pad = 0.1 * (hi - lo) if hi > lo else 1.0
    grid = np.linspace(lo - pad, hi + pad, n_points)
    dens = np.zeros((n_points, samples.shape[1]))
    for g in range(samples.shape[1]):
        col = samples[:, g]
        if np.all(np.isfinite(col)) and np.ptp(col) > 0:
            dens[:, g] = gaussian_kde(col)(grid)
    return grid, dens
