"""Model types and the probit stick-breaking mixture densities."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from functools import cached_property

import numpy as np
from scipy.special import log_ndtr, ndtr

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class Dataset:
    """Observed tuples (y_i, t_i, x_i).

    ``X`` must already be numeric; categorical covariates are encoded upstream.
    ``categorical`` flags columns whose group profile reports a modal level.
    """

    y: np.ndarray
    t: np.ndarray
    X: np.ndarray
    columns: list[str] = field(default_factory=list)
    categorical: list[bool] = field(default_factory=list)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.t = np.asarray(self.t).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(self.y.size, -1)
        self.X = X
        n = self.y.size
        if self.t.size != n or self.X.shape[0] != n:
            raise ValueError(f"y, t and X must share length n={n}")
        if not np.all(np.isin(self.t, (0, 1))):
            raise ValueError("treatment must be coded 0/1")
        self.t = self.t.astype(np.int8)
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.X))):
            raise ValueError("dataset contains missing or non-finite entries")
        if n and (self.t.sum() == 0 or self.t.sum() == n):
            raise ValueError("both treatment arms must be non-empty")
        if not self.columns:
            self.columns = [f"X{j + 1}" for j in range(self.p)]
        if len(self.columns) != self.p:
            raise ValueError("number of column names does not match X")
        if not self.categorical:
            self.categorical = [False] * self.p
        if len(self.categorical) != self.p:
            raise ValueError("categorical flags do not match X")

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @cached_property
    def unique_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct covariate rows and the row index of every unit."""
        Xu, inv = np.unique(self.X, axis=0, return_inverse=True)
        return Xu, inv.ravel()

    @cached_property
    def design_outer(self) -> np.ndarray:
        """Row-wise outer products of [1, x_i], flattened to (n, (p+1)^2)."""
        Xt = np.column_stack([np.ones(self.n), self.X])
        return (Xt[:, :, None] * Xt[:, None, :]).reshape(self.n, -1)

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.t[idx], self.X[idx], list(self.columns), list(self.categorical))


@dataclass
class Hyperparams:
    """Prior constants and truncation level.

    Defaults are the non-informative settings used in the simulation study:
    slopes/intercepts N(0, 20), atoms N(0, 10), variances InvGamma(5, 1), L = 20.
    """

    mu_beta: float = 0.0
    sigma2_beta: float = 20.0
    mu_eta: float = 0.0
    sigma2_eta: float = 10.0
    gamma1: float = 5.0
    gamma2: float = 1.0
    L: int = 20

    def __post_init__(self):
        for name in ("sigma2_beta", "sigma2_eta", "gamma1", "gamma2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive finite number, got {v}")
        if int(self.L) != self.L or self.L < 2:
            raise ValueError(f"truncation L must be an integer >= 2, got {self.L}")
        self.L = int(self.L)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> Hyperparams:
        known = {f.name for f in fields(cls)}
        unknown = set(d or {}) - known
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**(d or {}))


@dataclass
class ArmParams:
    """Cluster atoms and weight-regression coefficients for one treatment arm."""

    eta: np.ndarray  # (L,) strictly increasing
    sigma2: np.ndarray  # (L,)
    beta0: np.ndarray  # (L-1,)
    beta: np.ndarray  # (L-1, p)

    @property
    def L(self) -> int:
        return self.eta.size

    def validate(self) -> None:
        L = self.eta.size
        if self.sigma2.shape != (L,) or self.beta0.shape != (L - 1,) or self.beta.shape[0] != L - 1:
            raise ValueError("inconsistent ArmParams shapes")
        if np.any(np.diff(self.eta) <= 0):
            raise ValueError("eta must be strictly increasing")
        if np.any(self.sigma2 <= 0):
            raise ValueError("sigma2 must be positive")

    def copy(self) -> ArmParams:
        return ArmParams(self.eta.copy(), self.sigma2.copy(), self.beta0.copy(), self.beta.copy())


def compute_alpha(x, beta0_l: float, beta_l) -> float:
    """Linear predictor beta0_l + x' beta_l of one stick."""
    x = np.asarray(x, dtype=float)
    beta_l = np.asarray(beta_l, dtype=float)
    if x.shape != beta_l.shape:
        raise ValueError(f"dimension mismatch: x {x.shape} vs beta {beta_l.shape}")
    return float(beta0_l + x @ beta_l)


def alpha_matrix(X: np.ndarray, arm: ArmParams) -> np.ndarray:
    """Linear predictors for every unit and stick, shape (n, L-1)."""
    return arm.beta0[None, :] + X @ arm.beta.T


def log_stick_weights(alphas: np.ndarray) -> np.ndarray:
    """Log mixture weights from probit sticks along the last axis.

    ``log w_l = log Phi(a_l) + sum_{r<l} log Phi(-a_r)``; the final component
    takes the remaining stick.  Working with ``log_ndtr(-a)`` rather than
    ``log(1 - Phi(a))`` keeps saturated sticks exact.
    """
    alphas = np.asarray(alphas, dtype=float)
    log_v = log_ndtr(alphas)
    log_1mv = log_ndtr(-alphas)
    rest = np.cumsum(log_1mv, axis=-1)
    before = np.concatenate([np.zeros(alphas.shape[:-1] + (1,)), rest], axis=-1)
    return np.concatenate([log_v, np.zeros(alphas.shape[:-1] + (1,))], axis=-1) + before


def compute_stick_weights(alphas) -> np.ndarray:
    """Mixture weights (length L) from L-1 probit sticks."""
    alphas = np.asarray(alphas, dtype=float)
    if not np.all(np.isfinite(alphas)):
        raise ValueError("alphas must be finite")
    v = ndtr(alphas)
    one_minus = ndtr(-alphas)
    rest = np.cumprod(one_minus, axis=-1)
    before = np.concatenate([np.ones(alphas.shape[:-1] + (1,)), rest], axis=-1)
    return np.concatenate([v, np.ones(alphas.shape[:-1] + (1,))], axis=-1) * before


def normal_logpdf(y, mean, var):
    return -0.5 * (LOG_2PI + np.log(var) + (y - mean) ** 2 / var)


def conditional_outcome_density(y, x, arm: ArmParams) -> np.ndarray | float:
    """Mixture density f(y | x) = sum_l w_l(x) N(y; eta_l, sigma2_l)."""
    x = np.asarray(x, dtype=float)
    w = compute_stick_weights(arm.beta0 + arm.beta @ x)
    y = np.asarray(y, dtype=float)
    dens = np.exp(normal_logpdf(y[..., None], arm.eta, arm.sigma2)) @ w
    return float(dens) if dens.ndim == 0 else dens
