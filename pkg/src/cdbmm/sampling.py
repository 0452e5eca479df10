"""Random variate generators used by the Gibbs sampler.

Every draw goes through a :class:`numpy.random.Generator` backed by the
counter-based Philox bit generator, so a chain is reproducible from a single
integer seed and independent streams can be split off for replicates.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.random import Generator, Philox, SeedSequence
from scipy.linalg import lapack
from scipy.special import log_ndtr, ndtr, ndtri, ndtri_exp

RngHandle = Generator

# Standardized lower bound beyond which the exponential-proposal sampler is
# used instead of the inverse CDF.
TAIL_THRESHOLD = 5.0


def make_rng(seed: int | SeedSequence) -> Generator:
    """Return a Philox-backed generator for a 64-bit seed."""
    if not isinstance(seed, SeedSequence):
        seed = SeedSequence(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    return Generator(Philox(seed))


def split_seeds(seed: int, k: int) -> list[SeedSequence]:
    """Spawn ``k`` independent child seed sequences from a master seed.

    Child ``j`` depends only on ``(seed, j)``, so replicate ``j`` gets the same
    stream whatever the number of workers.
    """
    return SeedSequence(int(seed) & 0xFFFF_FFFF_FFFF_FFFF).spawn(k)


def split_rng(seed: int, k: int) -> list[Generator]:
    return [make_rng(s) for s in split_seeds(seed, k)]


def _check_finite(**values: float) -> None:
    for name, v in values.items():
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{name} must be finite, got {v!r}")


# --------------------------------------------------------------------------
# truncated normal
# --------------------------------------------------------------------------


def _std_tail_exponential(rng: Generator, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard normal restricted to (a, b) with a >= TAIL_THRESHOLD.

    Exponential proposal shifted to ``a`` with the optimal rate
    ``(a + sqrt(a^2 + 4)) / 2``; proposals past ``b`` are rejected too.  For
    narrow intervals a uniform proposal on (a, b) is used instead, which
    accepts with probability at least ``exp(-a (b - a) - (b - a)^2 / 2)``.
    """
    out = np.empty_like(a)
    todo = np.arange(a.size)
    lam = 0.5 * (a + np.sqrt(a * a + 4.0))
    narrow = (b - a) < 1.0 / a
    while todo.size:
        aa, bb, ll, nn = a[todo], b[todo], lam[todo], narrow[todo]
        u = rng.random(todo.size)
        e = rng.standard_exponential(todo.size)
        z = np.where(nn, aa + (bb - aa) * rng.random(todo.size), aa + e / ll)
        log_acc = np.where(nn, 0.5 * (aa * aa - z * z), -0.5 * (z - ll) ** 2)
        ok = (np.log1p(-u) < log_acc) & (z > aa) & (z < bb)
        out[todo[ok]] = z[ok]
        todo = todo[~ok]
    return out


def _std_upper_region(rng: Generator, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Standard normal restricted to (a, b) with 0 <= a < b <= inf."""
    out = np.empty_like(a)
    tail = a >= TAIL_THRESHOLD
    body = ~tail
    if body.any():
        aa, bb = a[body], b[body]
        # survival-function inversion in log space: P(X > x) = Phi(-x)
        log_sa = log_ndtr(-aa)
        log_sb = log_ndtr(-bb)
        u = rng.random(aa.size)
        log_q = log_sa + np.log1p(-u * -np.expm1(log_sb - log_sa))
        x = -ndtri_exp(log_q)
        out[body] = np.clip(x, np.nextafter(aa, np.inf), np.nextafter(bb, -np.inf))
    if tail.any():
        out[tail] = _std_tail_exponential(rng, a[tail], b[tail])
    return out


def truncated_normal(
    rng: Generator,
    mean: np.ndarray | float,
    sd: np.ndarray | float,
    lower: np.ndarray | float,
    upper: np.ndarray | float,
) -> np.ndarray:
    """Vectorized draws from N(mean, sd^2) restricted to the open interval (lower, upper).

    Intervals straddling the mode use the inverse CDF directly; intervals in a
    tail are reflected to the upper side and drawn by log-space survival
    inversion, or by exponential-proposal rejection once the bound is more
    than ``TAIL_THRESHOLD`` standard deviations out.
    """
    mean, sd, lower, upper = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (mean, sd, lower, upper))
    )
    shape = mean.shape
    mean, sd, lower, upper = (v.ravel() for v in (mean, sd, lower, upper))
    a = (lower - mean) / sd
    b = (upper - mean) / sd

    z = np.empty_like(a)
    upper_side = a >= 0
    lower_side = b <= 0
    middle = ~(upper_side | lower_side)
    if upper_side.any():
        z[upper_side] = _std_upper_region(rng, a[upper_side], b[upper_side])
    if lower_side.any():
        z[lower_side] = -_std_upper_region(rng, -b[lower_side], -a[lower_side])
    if middle.any():
        pa, pb = ndtr(a[middle]), ndtr(b[middle])
        u = rng.random(pa.size)
        z[middle] = ndtri(pa + u * (pb - pa))
        z[middle] = np.clip(z[middle], np.nextafter(a[middle], np.inf), np.nextafter(b[middle], -np.inf))

    x = mean + sd * z
    # guard the open interval after the affine map
    x = np.minimum(np.maximum(x, np.nextafter(lower, np.inf)), np.nextafter(upper, -np.inf))
    return x.reshape(shape)


def truncated_normal_above(rng: Generator, mean: float, sd: float, lower: float) -> float:
    """Scalar N(mean, sd^2) restricted to (lower, inf); same algorithm as above."""
    if lower == -math.inf:
        return mean + sd * rng.standard_normal()
    a = (lower - mean) / sd
    if a < -8.0:
        # excluded mass < 1e-15, plain rejection accepts almost surely
        while True:
            x = mean + sd * rng.standard_normal()
            if x > lower:
                return x
    if a < 0.0:
        pa = ndtr(a)
        z = ndtri(pa + rng.random() * (1.0 - pa))
    elif a < TAIL_THRESHOLD:
        z = -ndtri_exp(log_ndtr(-a) + math.log1p(-rng.random()))
    else:
        lam = 0.5 * (a + math.sqrt(a * a + 4.0))
        while True:
            z = a + rng.standard_exponential() / lam
            if math.log1p(-rng.random()) < -0.5 * (z - lam) ** 2:
                break
    x = mean + sd * float(z)
    return x if x > lower else math.nextafter(lower, math.inf)


def _std_upper_scalar(rng: Generator, a: float, b: float) -> float:
    """Standard normal on (a, b) with 0 <= a < b; scalar twin of ``_std_upper_region``."""
    if a < TAIL_THRESHOLD:
        log_sa = log_ndtr(-a)
        log_sb = log_ndtr(-b)
        log_q = log_sa + math.log1p(-rng.random() * -math.expm1(log_sb - log_sa))
        return float(min(max(-ndtri_exp(log_q), math.nextafter(a, math.inf)), math.nextafter(b, -math.inf)))
    lam = 0.5 * (a + math.sqrt(a * a + 4.0))
    narrow = (b - a) < 1.0 / a
    while True:
        if narrow:
            z = a + (b - a) * rng.random()
            log_acc = 0.5 * (a * a - z * z)
        else:
            z = a + rng.standard_exponential() / lam
            log_acc = -0.5 * (z - lam) ** 2
        if math.log1p(-rng.random()) < log_acc and a < z < b:
            return z


def truncated_normal_scalar(rng: Generator, mean: float, sd: float, lower: float, upper: float) -> float:
    """Scalar N(mean, sd^2) restricted to (lower, upper), same algorithms as the vector version."""
    if upper == math.inf:
        return truncated_normal_above(rng, mean, sd, lower)
    a = (lower - mean) / sd
    b = (upper - mean) / sd
    if a >= 0.0:
        z = _std_upper_scalar(rng, a, b)
    elif b <= 0.0:
        z = -_std_upper_scalar(rng, -b, -a)
    else:
        pa, pb = ndtr(a), ndtr(b)
        z = float(ndtri(pa + rng.random() * (pb - pa)))
    x = mean + sd * z
    return min(max(x, math.nextafter(lower, math.inf)), math.nextafter(upper, -math.inf))


def draw_truncated_normal(
    rng: Generator, mean: float, variance: float, lower: float = -math.inf, upper: float = math.inf
) -> float:
    _check_finite(mean=mean, variance=variance)
    if variance <= 0:
        raise ValueError(f"variance must be positive, got {variance}")
    if not lower < upper:
        raise ValueError(f"empty truncation interval ({lower}, {upper})")
    return float(truncated_normal(rng, mean, math.sqrt(variance), lower, upper))


# --------------------------------------------------------------------------
# inverse gamma, categorical, multivariate normal
# --------------------------------------------------------------------------


def draw_inverse_gamma(rng: Generator, shape, scale, size=None):
    """InvGamma(shape, scale) drawn as 1 / Gamma(shape, rate=scale).

    With this convention the mean is ``scale / (shape - 1)`` for shape > 1.
    """
    shape = np.asarray(shape, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if np.any(~np.isfinite(shape)) or np.any(~np.isfinite(scale)) or np.any(shape <= 0) or np.any(scale <= 0):
        raise ValueError("inverse-gamma shape and scale must be finite and positive")
    out = 1.0 / rng.gamma(shape, 1.0 / scale, size=size)
    return float(out) if np.ndim(out) == 0 else out


def draw_categorical(rng: Generator, weights) -> int:
    """Index (0-based) drawn with probability proportional to ``weights``."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty vector")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be non-negative with at least one positive entry")
    c = np.cumsum(w)
    idx = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    # zero-weight trailing entries can never be selected
    return min(idx, int(np.flatnonzero(w > 0)[-1]))


def categorical_from_log(rng: Generator, log_w: np.ndarray) -> np.ndarray:
    """Row-wise categorical draws from unnormalized log-weights (n x K)."""
    m = log_w.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise FloatingPointError("all categorical weights are zero for some row")
    p = np.exp(log_w - m)
    c = np.cumsum(p, axis=1)
    u = rng.random(log_w.shape[0])[:, None] * c[:, -1:]
    idx = (c <= u).sum(axis=1)
    return np.minimum(idx, log_w.shape[1] - 1)


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, pivot: int):
        super().__init__(f"matrix is not positive definite: leading minor of order {pivot} fails")
        self.pivot = pivot


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; raises with the failing pivot on failure."""
    c, info = lapack.dpotrf(np.asarray(a, dtype=float), lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(info)
    if info < 0:
        raise ValueError(f"invalid argument {-info} to dpotrf")
    return c


def draw_mv_normal(rng: Generator, mean, covariance, size=None) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(covariance, dtype=float)
    if cov.shape != (mean.size, mean.size):
        raise ValueError("covariance shape does not match mean")
    if not np.allclose(cov, cov.T):
        raise ValueError("covariance must be symmetric")
    chol = cholesky(cov)
    shape = (mean.size,) if size is None else (size, mean.size)
    z = rng.standard_normal(shape)
    return mean + z @ chol.T
