"""Blocked Gibbs sampler for the confounder-dependent mixture.

One iteration sweeps arm 0 then arm 1 (weights, allocations, atoms and
variances, augmentation, weight regression) and finally re-imputes the
missing potential outcomes.  Cluster labels are 0-based internally.

Allocations for units observed under the *other* arm use the current
imputed outcome in the likelihood term; the imputation step runs after both
arms so each sweep sees the previous iteration's imputations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator

from .model import ArmParams, Dataset, Hyperparams, alpha_matrix, log_stick_weights, normal_logpdf
from .sampling import (
    categorical_from_log,
    draw_inverse_gamma,
    make_rng,
    truncated_normal,
    truncated_normal_above,
    truncated_normal_scalar,
)

log = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-3
N_INIT_BINS = 5


class ChainError(RuntimeError):
    """A sub-step failed; the message carries iteration and arm."""


@dataclass
class ChainState:
    arms: list[ArmParams]
    S: np.ndarray  # (2, n) cluster allocations
    y_imp: np.ndarray  # (2, n) potential outcomes, observed entries exact
    Z: list[np.ndarray] = field(default_factory=list)  # per arm (n, L-1), NaN where not drawn

    def copy(self) -> ChainState:
        return ChainState(
            [a.copy() for a in self.arms], self.S.copy(), self.y_imp.copy(), [z.copy() for z in self.Z]
        )


@dataclass
class PosteriorDraws:
    """Thinned post-burn-in trace.  Leading axis indexes stored draws, second axis the arm."""

    S: np.ndarray  # (R, 2, n)
    y_imp: np.ndarray  # (R, 2, n)
    eta: np.ndarray  # (R, 2, L)
    sigma2: np.ndarray  # (R, 2, L)
    beta0: np.ndarray  # (R, 2, L-1)
    beta: np.ndarray  # (R, 2, L-1, p)
    iterations: np.ndarray  # (R,) 0-based sweep index of each stored draw
    n_iter: int
    burn_in: int
    thin: int
    seed: int
    hyper: Hyperparams

    @property
    def n_draws(self) -> int:
        return self.S.shape[0]


def n_stored(n_iter: int, burn_in: int, thin: int) -> int:
    return (n_iter - burn_in) // thin


# --------------------------------------------------------------------------
# full-conditional samplers on plain arrays
# --------------------------------------------------------------------------


def sample_allocations(rng: Generator, y: np.ndarray, log_w: np.ndarray, eta, sigma2) -> np.ndarray:
    """S_i ~ Cat(w_l(x_i) N(y_i; eta_l, sigma2_l)), computed in log space."""
    log_p = log_w + normal_logpdf(y[:, None], eta[None, :], sigma2[None, :])
    return categorical_from_log(rng, log_p)


def eta_conditional(y, S, sigma2, hyper: Hyperparams):
    """Conjugate normal mean and variance of every atom given allocations."""
    L = sigma2.size
    counts = np.bincount(S, minlength=L)
    sums = np.bincount(S, weights=y, minlength=L)
    prec = counts / sigma2 + 1.0 / hyper.sigma2_eta
    mean = (sums / sigma2 + hyper.mu_eta / hyper.sigma2_eta) / prec
    return mean, 1.0 / prec


def sample_eta(rng: Generator, y, S, sigma2, hyper: Hyperparams, eta_prev=None) -> np.ndarray:
    """Atoms drawn in order l = 0..L-1 under the ordering constraint.

    Atom l is truncated below at the freshly drawn atom l-1 and, when
    ``eta_prev`` is given, above at the current atom l+1, which makes each
    draw the exact full conditional under the ordered prior.  Without
    ``eta_prev`` only the lower bound is applied.
    """
    mean, var = eta_conditional(y, S, sigma2, hyper)
    sd = np.sqrt(var)
    L = mean.size
    eta = np.empty_like(mean)
    lower = -math.inf
    for l in range(L):
        upper = math.inf if eta_prev is None or l == L - 1 else float(eta_prev[l + 1])
        eta[l] = truncated_normal_scalar(rng, float(mean[l]), float(sd[l]), lower, upper)
        lower = eta[l]
    return eta


def sigma2_conditional(y, S, eta, hyper: Hyperparams):
    """InvGamma shape and scale of every cluster variance given atoms."""
    L = eta.size
    counts = np.bincount(S, minlength=L)
    ss = np.bincount(S, weights=(y - eta[S]) ** 2, minlength=L)
    return hyper.gamma1 + 0.5 * counts, hyper.gamma2 + 0.5 * ss


def sample_sigma2(rng: Generator, y, S, eta, hyper: Hyperparams) -> np.ndarray:
    shape, scale = sigma2_conditional(y, S, eta, hyper)
    return draw_inverse_gamma(rng, shape, scale)


def augmentation_masks(S: np.ndarray, L: int):
    """(drawn, positive) masks of shape (n, L-1) for the latent probit scores.

    Unit i carries Z_l for every stick l <= S_i; it is positive on its own
    stick and negative on the sticks it passed.
    """
    levels = np.arange(L - 1)[None, :]
    drawn = levels <= S[:, None]
    positive = levels == S[:, None]
    return drawn, positive


def sample_augmentation(rng: Generator, alpha: np.ndarray, S: np.ndarray) -> np.ndarray:
    n, Lm1 = alpha.shape
    drawn, positive = augmentation_masks(S, Lm1 + 1)
    Z = np.full((n, Lm1), np.nan)
    pos = positive[drawn]
    lower = np.where(pos, 0.0, -np.inf)
    upper = np.where(pos, np.inf, 0.0)
    Z[drawn] = truncated_normal(rng, alpha[drawn], 1.0, lower, upper)
    return Z


def beta_conditional(X: np.ndarray, Z: np.ndarray, hyper: Hyperparams, outer: np.ndarray | None = None):
    """Precision matrices and means of (intercept, slopes) for every stick.

    Level l regresses Z_l on [1, x] over the units that carry a Z_l.
    ``outer`` optionally supplies the precomputed row outer products.
    """
    n, Lm1 = Z.shape
    Xt = np.column_stack([np.ones(n), X])
    q = Xt.shape[1]
    if outer is None:
        outer = (Xt[:, :, None] * Xt[:, None, :]).reshape(n, -1)
    drawn = ~np.isnan(Z)
    Zf = np.where(drawn, Z, 0.0)
    XtX = (drawn.T.astype(float) @ outer).reshape(Lm1, q, q)
    XtZ = Zf.T @ Xt
    prec = XtX + np.eye(q)[None] / hyper.sigma2_beta
    rhs = XtZ + hyper.mu_beta / hyper.sigma2_beta
    mean = np.linalg.solve(prec, rhs[..., None])[..., 0]
    return prec, mean


def sample_beta(rng: Generator, X: np.ndarray, Z: np.ndarray, hyper: Hyperparams, outer=None):
    prec, mean = beta_conditional(X, Z, hyper, outer)
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as e:  # pragma: no cover - prec >= I / sigma2_beta
        raise FloatingPointError(f"weight-regression precision not positive definite: {e}") from e
    z = rng.standard_normal(mean.shape)
    # x = mean + L^{-T} z has covariance prec^{-1}
    noise = np.linalg.solve(np.swapaxes(chol, -1, -2), z[..., None])[..., 0]
    draw = mean + noise
    return draw[:, 0].copy(), draw[:, 1:].copy()


def unit_log_weights(data: Dataset, arm: ArmParams) -> np.ndarray:
    """(n, L) log mixture weights, evaluated once per distinct covariate row."""
    Xu, inv = data.unique_rows
    return log_stick_weights(alpha_matrix(Xu, arm))[inv]


# --------------------------------------------------------------------------
# sweep steps on a ChainState
# --------------------------------------------------------------------------


def _units(data: Dataset, t: int, units) -> np.ndarray | slice:
    return slice(None) if units is None else units


def step_cluster_allocations(state: ChainState, data: Dataset, t: int, rng: Generator, units=None) -> np.ndarray:
    """Redraw S^(t) for ``units`` (all units by default) given the current y_imputed[t]."""
    arm = state.arms[t]
    u = _units(data, t, units)
    log_w = unit_log_weights(data, arm)[u]
    state.S[t, u] = sample_allocations(rng, state.y_imp[t, u], log_w, arm.eta, arm.sigma2)
    return state.S[t]


def step_cluster_params(state: ChainState, data: Dataset, t: int, hyper: Hyperparams, rng: Generator, units=None):
    arm = state.arms[t]
    u = _units(data, t, units)
    y, S = state.y_imp[t, u], state.S[t, u]
    arm.eta = sample_eta(rng, y, S, arm.sigma2, hyper, arm.eta)
    arm.sigma2 = sample_sigma2(rng, y, S, arm.eta, hyper)
    return arm.eta, arm.sigma2


def step_augmentation(state: ChainState, data: Dataset, t: int, rng: Generator, units=None) -> np.ndarray:
    """Latent probit scores; units outside ``units`` carry none (all NaN rows)."""
    Z = sample_augmentation(rng, alpha_matrix(data.X, state.arms[t]), state.S[t])
    if units is not None:
        Z[~units] = np.nan
    if len(state.Z) < 2:
        state.Z = [np.empty((0, 0)), np.empty((0, 0))]
    state.Z[t] = Z
    return Z


def step_beta(state: ChainState, data: Dataset, t: int, hyper: Hyperparams, rng: Generator):
    arm = state.arms[t]
    arm.beta0, arm.beta = sample_beta(rng, data.X, state.Z[t], hyper, data.design_outer)
    return arm.beta0, arm.beta


def step_impute_missing(state: ChainState, data: Dataset, rng: Generator, set_allocations: bool = False) -> np.ndarray:
    """Draw each unit's unobserved potential outcome from that arm's mixture at x_i.

    With ``set_allocations`` the component each value came from becomes the
    unit's allocation in that arm.
    """
    for t in (0, 1):
        off = data.t != t
        arm = state.arms[t]
        log_w = unit_log_weights(data, arm)[off]
        if log_w.shape[0] == 0:
            continue
        l = categorical_from_log(rng, log_w)
        state.y_imp[t, off] = arm.eta[l] + np.sqrt(arm.sigma2[l]) * rng.standard_normal(l.size)
        if set_allocations:
            state.S[t, off] = l
    return state.y_imp


MISSING_MODES = ("augment", "collapse")


def sweep(state: ChainState, data: Dataset, hyper: Hyperparams, rng: Generator, missing: str = "augment") -> None:
    """One full iteration.

    ``augment`` treats imputed outcomes as data in every block.  ``collapse``
    updates each arm's parameters from the units observed in that arm only
    and then draws (allocation, outcome) pairs for the other units from the
    mixture; both leave the same joint posterior invariant.
    """
    if missing not in MISSING_MODES:
        raise ValueError(f"unknown missing-outcome mode {missing!r}; expected one of {MISSING_MODES}")
    for t in (0, 1):
        units = None if missing == "augment" else data.t == t
        try:
            step_cluster_allocations(state, data, t, rng, units)
            step_cluster_params(state, data, t, hyper, rng, units)
            step_augmentation(state, data, t, rng, units)
            step_beta(state, data, t, hyper, rng)
        except Exception as e:
            raise ChainError(f"arm {t}: {e}") from e
    try:
        step_impute_missing(state, data, rng, set_allocations=missing == "collapse")
    except Exception as e:
        raise ChainError(f"imputation: {e}") from e


# --------------------------------------------------------------------------
# initialization and driver
# --------------------------------------------------------------------------


def initial_state(data: Dataset, hyper: Hyperparams, rng: Generator) -> ChainState:
    """Quantile-bin start: up to five bins of the observed outcome per arm."""
    n, p, L = data.n, data.p, hyper.L
    y_imp = np.vstack([data.y, data.y]).astype(float)
    S = np.zeros((2, n), dtype=np.int64)
    arms = []
    for t in (0, 1):
        obs = data.y[data.t == t]
        k = min(N_INIT_BINS, L)
        edges = np.unique(np.quantile(obs, np.linspace(0, 1, k + 1)[1:-1]))
        raw = np.searchsorted(edges, y_imp[t], side="right")
        used, S[t] = np.unique(raw, return_inverse=True)
        K = used.size
        means = np.bincount(S[t], weights=y_imp[t], minlength=K) / np.bincount(S[t], minlength=K)
        vars_ = np.array([max(y_imp[t][S[t] == b].var(), SIGMA2_FLOOR) for b in range(K)])

        eta = np.empty(L)
        sigma2 = np.empty(L)
        eta[:K] = np.maximum.accumulate(means)
        for l in range(1, K):
            if eta[l] <= eta[l - 1]:
                eta[l] = np.nextafter(eta[l - 1], np.inf)
        sigma2[:K] = vars_
        sd_eta = math.sqrt(hyper.sigma2_eta)
        for l in range(K, L):
            eta[l] = truncated_normal_above(rng, hyper.mu_eta, sd_eta, eta[l - 1])
        sigma2[K:] = draw_inverse_gamma(rng, hyper.gamma1, hyper.gamma2, size=L - K)
        arms.append(ArmParams(eta, sigma2, np.zeros(L - 1), np.zeros((L - 1, p))))
    return ChainState(arms, S, y_imp, [np.full((n, L - 1), np.nan), np.full((n, L - 1), np.nan)])


def run_chain(
    data: Dataset,
    hyper: Hyperparams | None = None,
    n_iter: int = 3000,
    burn_in: int = 1000,
    thin: int = 2,
    seed: int = 0,
    progress_every: int = 0,
    missing: str = "augment",
) -> PosteriorDraws:
    """Run one chain and keep every ``thin``-th post-burn-in state."""
    hyper = hyper or Hyperparams()
    if not (n_iter > burn_in >= 0):
        raise ValueError(f"need n_iter > burn_in >= 0, got n_iter={n_iter}, burn_in={burn_in}")
    if thin < 1:
        raise ValueError(f"thin must be >= 1, got {thin}")
    if missing not in MISSING_MODES:
        raise ValueError(f"unknown missing-outcome mode {missing!r}; expected one of {MISSING_MODES}")
    n, p, L = data.n, data.p, hyper.L
    R = n_stored(n_iter, burn_in, thin)
    rng = make_rng(seed)
    state = initial_state(data, hyper, rng)

    S_store = np.empty((R, 2, n), dtype=np.int16 if L < 2**15 else np.int64)
    y_store = np.empty((R, 2, n))
    eta_store = np.empty((R, 2, L))
    s2_store = np.empty((R, 2, L))
    b0_store = np.empty((R, 2, L - 1))
    b_store = np.empty((R, 2, L - 1, p))
    iters = np.empty(R, dtype=np.int64)

    k = 0
    for r in range(n_iter):
        try:
            sweep(state, data, hyper, rng, missing)
        except Exception as e:
            raise ChainError(f"iteration {r}: {e}") from e

        if r >= burn_in and (r - burn_in + 1) % thin == 0:
            S_store[k] = state.S
            y_store[k] = state.y_imp
            for a in (0, 1):
                arm = state.arms[a]
                eta_store[k, a] = arm.eta
                s2_store[k, a] = arm.sigma2
                b0_store[k, a] = arm.beta0
                b_store[k, a] = arm.beta
            iters[k] = r
            k += 1
        if progress_every and (r + 1) % progress_every == 0:
            log.info("iteration %d/%d", r + 1, n_iter)

    assert k == R
    return PosteriorDraws(
        S=S_store,
        y_imp=y_store,
        eta=eta_store,
        sigma2=s2_store,
        beta0=b0_store,
        beta=b_store,
        iterations=iters,
        n_iter=n_iter,
        burn_in=burn_in,
        thin=thin,
        seed=seed,
        hyper=hyper,
    )
