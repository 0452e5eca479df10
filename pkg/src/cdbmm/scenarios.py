"""The seven simulation designs, replicate studies and the prior-scale sensitivity grid."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from .estimands import ate_posterior, form_groups, gate_posterior
from .gibbs import run_chain
from .model import Dataset, Hyperparams
from .partition import Partition, adjusted_rand_index, build_psm, point_estimate_partition
from .sampling import make_rng, split_seeds

log = logging.getLogger(__name__)

BERNOULLI_P = (0.4, 0.6, 0.3, 0.5, 0.2)


def _rule_three(X):
    x1, x2 = X[:, 0], X[:, 1]
    # g=1: X1=X2=0, g=2: X1=1, g=3: X1=0 and X2=1
    return np.where(x1 == 1, 1, np.where(x2 == 1, 2, 0))


def _rule_four(X):
    x1, x2 = X[:, 0], X[:, 1]
    g = np.empty(X.shape[0], dtype=int)
    g[(x1 == 0) & (x2 == 1)] = 0
    g[(x1 == 0) & (x2 == 0)] = 1
    g[(x1 == 1) & (x2 == 1)] = 2
    g[(x1 == 1) & (x2 == 0)] = 3
    return g


def _rule_five(X):
    x1, x2, x3, x4 = X[:, 0], X[:, 1], X[:, 2], X[:, 3]
    g = np.full(X.shape[0], 4)
    g[(x1 == 0) & (x3 == 0) & (x4 == 0)] = 3
    g[(x1 == 0) & (x3 == 0) & (x4 == 1)] = 2
    g[(x1 == 0) & (x3 == 1)] = 1
    g[(x1 == 1) & (x2 == 1)] = 0
    return g


def _rule_one(X):
    return np.zeros(X.shape[0], dtype=int)


# id -> (eta0, eta1, sd0, sd1, rule, number of covariates)
SCENARIOS: dict[int, tuple] = {
    1: ((2, 4, 6), (0, 3, 6), (0.3,) * 3, (0.3,) * 3, _rule_three, 2),
    2: ((0, 2.2, 4.4), (0, 0, 0), (0.2,) * 3, (0.2,) * 3, _rule_three, 2),
    3: ((1, 2, 3), (0, 1.5, 3), (0.2, 0.25, 0.25), (0.25, 0.3, 0.2), _rule_three, 2),
    4: ((1, 2, 3, 3), (0, 1.5, 3, 4.5), (0.2,) * 4, (0.2,) * 4, _rule_four, 2),
    5: ((2, 2, 3, 4.5, 6.5), (0, 1, 2.5, 5, 7.5), (0.2,) * 5, (0.2,) * 5, _rule_five, 5),
    6: ((1.5, 2, 2.5), (1, 1.75, 2.5), (0.3,) * 3, (0.3,) * 3, _rule_three, 2),
    7: ((2,), (3,), (0.5,), (0.5,), _rule_one, 2),
}


@dataclass
class ScenarioSpec:
    """Which design to draw and how.  ``sd0``/``sd1`` are standard deviations."""

    id: int
    n: int = 500
    seed: int = 0
    eta0: tuple | None = None
    eta1: tuple | None = None
    sd0: tuple | None = None
    sd1: tuple | None = None
    rule: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.id not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.id}; expected 1..7")
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"n must be an integer >= 2, got {self.n}")
        k = len(SCENARIOS[self.id][0])
        for name in ("eta0", "eta1", "sd0", "sd1"):
            v = getattr(self, name)
            if v is None:
                continue
            v = tuple(float(x) for x in np.atleast_1d(v))
            if len(v) != k or not all(math.isfinite(x) for x in v):
                raise ValueError(f"override {name} must hold {k} finite values")
            if name.startswith("sd") and min(v) <= 0:
                raise ValueError(f"override {name} must be positive")
            setattr(self, name, v)

    def params(self):
        eta0, eta1, sd0, sd1, rule, p = SCENARIOS[self.id]
        return (
            np.array(self.eta0 or eta0, float),
            np.array(self.eta1 or eta1, float),
            np.array(self.sd0 or sd0, float),
            np.array(self.sd1 or sd1, float),
            self.rule or rule,
            p,
        )


@dataclass
class SyntheticDataset:
    data: Dataset
    groups: np.ndarray  # true group, 0-based
    y0: np.ndarray
    y1: np.ndarray
    gate: np.ndarray  # true GATE per group
    ate: float  # population ATE under the covariate law
    spec: ScenarioSpec | None = None

    @property
    def sample_ate(self) -> float:
        return float(np.mean(self.y1 - self.y0))


def treatment_probability(X5: np.ndarray, scenario: int) -> np.ndarray:
    x1, x2, x3, x4, x5 = X5.T
    lin = 0.4 * x1 + 0.6 * x2
    if scenario == 5:
        lin = lin - 0.3 * x3 + 0.2 * x4 * x5
    return expit(lin)


def group_probabilities(spec: ScenarioSpec) -> np.ndarray:
    """Exact group probabilities under the independent Bernoulli covariate law."""
    *_, rule, p = spec.params()
    k = len(spec.params()[0])
    probs = np.zeros(k)
    for bits in itertools.product((0, 1), repeat=p):
        x = np.array(bits, float)
        w = np.prod([BERNOULLI_P[j] if b else 1 - BERNOULLI_P[j] for j, b in enumerate(bits)])
        probs[rule(x[None, :])[0]] += w
    return probs


def simulate_scenario(spec: ScenarioSpec) -> SyntheticDataset:
    eta0, eta1, sd0, sd1, rule, p = spec.params()
    rng = make_rng(spec.seed)
    n = spec.n
    X5 = (rng.random((n, 5)) < np.array(BERNOULLI_P)).astype(float)
    t = (rng.random(n) < treatment_probability(X5, spec.id)).astype(np.int8)
    X = X5[:, :p]
    g = np.asarray(rule(X), dtype=int)
    if g.shape != (n,) or g.min() < 0 or g.max() >= eta0.size:
        raise ValueError("group rule must return one label in 0..k-1 per unit")
    y0 = eta0[g] + sd0[g] * rng.standard_normal(n)
    y1 = eta1[g] + sd1[g] * rng.standard_normal(n)
    y = np.where(t == 1, y1, y0)
    if t.min() == t.max():
        raise ValueError("simulated sample has an empty treatment arm; use a larger n")
    gate = eta1 - eta0
    ate = float(group_probabilities(spec) @ gate)
    data = Dataset(y, t, X, [f"X{j + 1}" for j in range(p)], [True] * p)
    return SyntheticDataset(data, g, y0, y1, gate, ate, spec)


# --------------------------------------------------------------------------
# replicate studies
# --------------------------------------------------------------------------


@dataclass
class ChainConfig:
    n_iter: int = 3000
    burn_in: int = 1000
    thin: int = 2
    missing: str = "augment"


@dataclass
class FitSummary:
    """Everything a replicate study needs from one fitted dataset."""

    partitions: tuple[Partition, Partition]
    groups: np.ndarray  # 1-based estimated groups
    gate_mean: np.ndarray
    ate_mean: float


def fit_and_summarize(data: Dataset, hyper: Hyperparams, chain: ChainConfig, seed, loss: str = "vi") -> FitSummary:
    draws = run_chain(data, hyper, chain.n_iter, chain.burn_in, chain.thin, seed, missing=chain.missing)
    parts = tuple(point_estimate_partition(build_psm(draws.S[:, t]), draws.S[:, t], loss) for t in (0, 1))
    groups = form_groups(*parts)
    gate = gate_posterior(draws, groups)
    ate = ate_posterior(draws)
    return FitSummary(parts, groups, gate.mean, float(ate.mean))


def match_groups(est: np.ndarray, truth: np.ndarray) -> dict[int, int]:
    """Maximum-overlap assignment of estimated groups to true groups."""
    est_ids, ei = np.unique(est, return_inverse=True)
    true_ids, ti = np.unique(truth, return_inverse=True)
    overlap = np.zeros((est_ids.size, true_ids.size))
    np.add.at(overlap, (ei.ravel(), ti.ravel()), 1)
    rows, cols = linear_sum_assignment(-overlap)
    return {int(est_ids[r]): int(true_ids[c]) for r, c in zip(rows, cols)}


@dataclass
class ReplicateResult:
    replicate: int
    seed: int
    ari: float
    ate_hat: float
    ate_true: float
    n_clusters: tuple[int, int]
    n_groups: int
    gate_error: np.ndarray  # per true group, NaN if unmatched

    @property
    def ate_bias(self) -> float:
        return self.ate_hat - self.ate_true

    @property
    def ate_sq_error(self) -> float:
        return self.ate_bias**2


@dataclass
class StudyReport:
    scenario: int
    n: int
    hyper: Hyperparams
    chain: ChainConfig
    loss: str
    replicates: list[ReplicateResult] = field(default_factory=list)

    def _arr(self, attr):
        return np.array([getattr(r, attr) for r in self.replicates], dtype=float)

    @property
    def ari_mean(self) -> float:
        return float(self._arr("ari").mean())

    @property
    def ari_sd(self) -> float:
        a = self._arr("ari")
        return float(a.std(ddof=1)) if a.size > 1 else 0.0

    @property
    def bias_mean(self) -> float:
        return float(self._arr("ate_bias").mean())

    @property
    def mse(self) -> float:
        return float(self._arr("ate_sq_error").mean())

    def gate_errors(self) -> np.ndarray:
        return np.array([r.gate_error for r in self.replicates])

    def summary_row(self) -> dict:
        ge = self.gate_errors()
        return {
            "scenario": self.scenario,
            "sigma2_beta": self.hyper.sigma2_beta,
            "reps": len(self.replicates),
            "ari_mean": self.ari_mean,
            "ari_sd": self.ari_sd,
            "ate_bias_mean": self.bias_mean,
            "ate_bias_sd": float(self._arr("ate_bias").std(ddof=1)) if len(self.replicates) > 1 else 0.0,
            "ate_mse": self.mse,
            "gate_abs_error_max": float(np.nanmax(np.abs(ge))) if ge.size else math.nan,
        }


def run_replicate(
    spec: ScenarioSpec, rep: int, seed_seq, hyper: Hyperparams, chain: ChainConfig, loss: str
) -> ReplicateResult:
    data_seed, chain_seed = seed_seq.spawn(2)
    sim_seed = int(data_seed.generate_state(1, np.uint64)[0])
    fit_seed = int(chain_seed.generate_state(1, np.uint64)[0])
    sim = simulate_scenario(replace(spec, seed=sim_seed))
    try:
        fit = fit_and_summarize(sim.data, hyper, chain, fit_seed, loss)
    except Exception as e:
        raise RuntimeError(f"replicate {rep} failed: {e}") from e
    mapping = match_groups(fit.groups, sim.groups)
    gate_err = np.full(sim.gate.size, np.nan)
    for est_g, true_g in mapping.items():
        gate_err[true_g] = fit.gate_mean[est_g - 1] - sim.gate[true_g]
    return ReplicateResult(
        replicate=rep,
        seed=sim_seed,
        ari=adjusted_rand_index(fit.groups, sim.groups),
        ate_hat=fit.ate_mean,
        ate_true=sim.ate,
        n_clusters=(fit.partitions[0].n_clusters, fit.partitions[1].n_clusters),
        n_groups=int(fit.groups.max()),
        gate_error=gate_err,
    )


def _replicate_task(args):
    return run_replicate(*args)


def replicate_study(
    spec: ScenarioSpec,
    n_reps: int = 10,
    hyper: Hyperparams | None = None,
    chain: ChainConfig | None = None,
    loss: str = "vi",
    workers: int = 1,
) -> StudyReport:
    """Simulate, fit and score ``n_reps`` independent replicates.

    Replicate ``j`` is seeded from child ``j`` of ``spec.seed`` so results do
    not depend on ``workers``.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    hyper = hyper or Hyperparams()
    chain = chain or ChainConfig()
    seeds = split_seeds(spec.seed, n_reps)
    tasks = [(spec, j, seeds[j], hyper, chain, loss) for j in range(n_reps)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_replicate_task, tasks))
    else:
        results = []
        for task in tasks:
            results.append(_replicate_task(task))
            log.info("scenario %d replicate %d: ARI %.4f", spec.id, task[1], results[-1].ari)
    return StudyReport(spec.id, spec.n, hyper, chain, loss, results)


def sensitivity_grid(
    spec: ScenarioSpec,
    sigma2_beta_values=(1.0, 20.0, 100.0),
    n_reps: int = 5,
    hyper: Hyperparams | None = None,
    chain: ChainConfig | None = None,
    loss: str = "vi",
    workers: int = 1,
) -> list[StudyReport]:
    hyper = hyper or Hyperparams()
    if any(v <= 0 for v in sigma2_beta_values):
        raise ValueError("sigma2_beta values must be positive")
    return [
        replicate_study(spec, n_reps, replace(hyper, sigma2_beta=float(v)), chain, loss, workers)
        for v in sigma2_beta_values
    ]
