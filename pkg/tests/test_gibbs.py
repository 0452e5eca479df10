from __future__ import annotations

import math

import numpy as np
import pytest

import block_oracles
from cdbmm.gibbs import (
    ChainError,
    ChainState,
    beta_conditional,
    initial_state,
    n_stored,
    run_chain,
    sample_allocations,
    sample_augmentation,
    sample_beta,
    sample_eta,
    step_cluster_params,
    step_impute_missing,
)
from cdbmm.model import ArmParams, Dataset, Hyperparams
from cdbmm.partition import build_psm, point_estimate_partition
from cdbmm.sampling import make_rng
from cdbmm.scenarios import ScenarioSpec, simulate_scenario


def _tiny_data(n=30, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 2, (n, 2)).astype(float)
    t = np.arange(n) % 2
    y = 1.0 + 2.0 * X[:, 0] + t + rng.normal(0, 0.3, n)
    return Dataset(y, t, X)


@pytest.mark.parametrize("block", list(block_oracles.ALL_BLOCKS))
def test_block_matches_full_conditional(block):
    checks = block_oracles.ALL_BLOCKS[block]()
    bad = [f"{c.name}: {c.estimate:.5g} vs {c.expected:.5g} ({c.z:.2f} se)" for c in checks if not c.ok()]
    assert not bad, bad


# ---- allocations ----------------------------------------------------------------


def test_allocation_follows_likelihood():
    rng = make_rng(1)
    n = 20_000
    log_w = np.log(np.full((n, 2), 0.5))
    S = sample_allocations(rng, np.full(n, 10.0), log_w, np.array([0.0, 10.0]), np.ones(2))
    assert np.mean(S == 1) > 0.999


def test_allocation_degenerate_weights():
    rng = make_rng(2)
    log_w = np.full((1000, 3), -np.inf)
    log_w[:, 0] = 0.0
    S = sample_allocations(rng, np.linspace(-50, 50, 1000), log_w, np.array([0.0, 1.0, 2.0]), np.ones(3))
    assert np.all(S == 0)


def test_allocation_equal_kernels_follow_weights():
    rng = make_rng(3)
    n = 200_000
    w = np.array([0.2, 0.5, 0.3])
    S = sample_allocations(rng, np.zeros(n), np.log(np.tile(w, (n, 1))), np.zeros(3), np.ones(3))
    freq = np.bincount(S, minlength=3) / n
    assert np.all(np.abs(freq - w) < 4 * np.sqrt(w * (1 - w) / n))


# ---- atoms and variances -----------------------------------------------------


def test_single_cluster_atom_matches_conjugate_posterior():
    hyper = Hyperparams()
    rng0 = np.random.default_rng(4)
    y = rng0.normal(3.0, 1.0, 5000)
    S = np.zeros(y.size, dtype=int)
    sigma2 = np.ones(3)
    prec = y.size + 1 / hyper.sigma2_eta
    m = y.sum() / prec
    rng = make_rng(5)
    eta = np.array([0.0, 5.0, 6.0])
    draws = []
    for _ in range(4000):
        eta = sample_eta(rng, y, S, sigma2, hyper, eta)
        draws.append(eta[0])
    assert abs(np.mean(draws) - m) < 4 * math.sqrt(1 / prec / len(draws))
    assert abs(m - y.mean()) < 1e-3


def test_empty_cluster_variance_reduces_to_prior():
    hyper = Hyperparams()
    y = np.array([0.0, 0.1])
    t = np.array([0, 1])
    data = Dataset(y, t, np.zeros((2, 1)))
    L = 3
    arm = ArmParams(np.array([0.0, 1.0, 2.0]), np.ones(L), np.zeros(L - 1), np.zeros((L - 1, 1)))
    state = ChainState([arm, arm.copy()], np.zeros((2, 2), int), np.vstack([y, y]))
    rng = make_rng(6)
    s2 = np.array([step_cluster_params(state, data, 0, hyper, rng)[1][2] for _ in range(40_000)])
    assert abs(s2.mean() - 0.25) < 4 * math.sqrt((1 / 48) / s2.size)


def test_atoms_strictly_increasing_even_with_coincident_data():
    hyper = Hyperparams(L=6)
    y = np.full(50, 2.0)
    S = np.repeat(np.arange(5), 10)
    rng = make_rng(7)
    eta = np.arange(6.0)
    for _ in range(500):
        eta = sample_eta(rng, y, S, np.full(6, 1e-4), hyper, eta)
        assert np.all(np.diff(eta) > 0)


def test_one_sided_truncation_misses_ordered_prior():
    # without the upper neighbour the empty pair drifts away from the order-statistic law
    hyper = Hyperparams()
    rng = make_rng(8)
    out = np.empty((20_000, 2))
    eta = np.array([-1.0, 1.0])
    for r in range(out.shape[0]):
        eta = sample_eta(rng, np.empty(0), np.empty(0, int), np.ones(2), hyper)
        out[r] = eta
    assert out[:, 0].mean() > -0.5  # the correct value is -sqrt(10/pi) = -1.78


# ---- augmentation ----------------------------------------------------------------


def test_augmentation_first_cluster_single_positive():
    Z = sample_augmentation(make_rng(9), np.zeros((500, 4)), np.zeros(500, dtype=int))
    assert np.all(Z[:, 0] > 0)
    assert np.all(np.isnan(Z[:, 1:]))


def test_augmentation_last_cluster_all_negative():
    L = 5
    Z = sample_augmentation(make_rng(10), np.zeros((500, L - 1)), np.full(500, L - 1))
    assert np.all(Z < 0)


def test_augmentation_far_tail_positive():
    alpha = np.full((2000, 3), -10.0)
    Z = sample_augmentation(make_rng(11), alpha, np.ones(2000, dtype=int))
    assert np.all(Z[:, 1] > 0) and Z[:, 1].max() < 1.0
    assert np.all(Z[:, 0] < 0)


# ---- weight regression -------------------------------------------------------------


def test_beta_prior_when_no_rows():
    hyper = Hyperparams(mu_beta=1.5, sigma2_beta=4.0)
    X = np.random.default_rng(12).normal(size=(10, 2))
    Z = np.full((10, 2), np.nan)
    rng = make_rng(13)
    draws = np.array([np.column_stack(sample_beta(rng, X, Z, hyper)) for _ in range(20_000)])
    assert np.allclose(draws.mean(0), 1.5, atol=4 * 2 / math.sqrt(20_000))
    assert np.allclose(draws.var(0), 4.0, atol=0.15)


def test_beta_intercept_only_scalar_formula():
    hyper = Hyperparams(mu_beta=0.2, sigma2_beta=5.0)
    z = np.random.default_rng(14).normal(0.7, 1.0, 25)
    Z = z[:, None]
    prec, mean = beta_conditional(np.empty((25, 0)), Z, hyper)
    w = 1 / hyper.sigma2_beta + z.size
    assert prec[0, 0, 0] == pytest.approx(w)
    assert mean[0, 0] == pytest.approx((z.sum() + hyper.mu_beta / hyper.sigma2_beta) / w)


def test_beta_flat_prior_matches_least_squares():
    hyper = Hyperparams(sigma2_beta=1e8)
    rng0 = np.random.default_rng(15)
    X = rng0.normal(size=(3000, 2))
    Z = (0.3 + X @ np.array([1.0, -0.5]) + rng0.normal(size=3000))[:, None]
    D = np.column_stack([np.ones(3000), X])
    ls = np.linalg.lstsq(D, Z[:, 0], rcond=None)[0]
    rng = make_rng(16)
    draws = np.array([np.r_[b0, b.ravel()] for b0, b in (sample_beta(rng, X, Z, hyper) for _ in range(3000))])
    se = np.sqrt(np.diag(np.linalg.inv(D.T @ D)) / 3000)
    assert np.all(np.abs(draws.mean(0) - ls) < 4 * se)


# ---- imputation -------------------------------------------------------------------


def _state_for(data, arm):
    return ChainState([arm, arm.copy()], np.zeros((2, data.n), int), np.vstack([data.y, data.y]))


def test_impute_point_mass():
    data = _tiny_data(200)
    L = 3
    arm = ArmParams(np.array([3.0, 5.0, 7.0]), np.array([1e-8, 1, 1]), np.array([40.0, 0.0]), np.zeros((2, 2)))
    state = _state_for(data, arm)
    step_impute_missing(state, data, make_rng(17))
    for t in (0, 1):
        off = data.t != t
        assert np.allclose(state.y_imp[t, off], 3.0, atol=1e-3)
    assert L == arm.L


def test_impute_leaves_observed_untouched():
    data = _tiny_data(100)
    arm = ArmParams(np.array([0.0, 1.0]), np.ones(2), np.zeros(1), np.zeros((1, 2)))
    state = _state_for(data, arm)
    step_impute_missing(state, data, make_rng(18))
    obs = state.y_imp[data.t, np.arange(data.n)]
    assert np.array_equal(obs, data.y)


def test_impute_bimodal_mixture():
    n = 100_000
    t = np.zeros(n, dtype=int)
    t[0] = 1
    data = Dataset(np.zeros(n), t, np.zeros((n, 1)))
    arm = ArmParams(np.array([-5.0, 5.0]), np.ones(2), np.zeros(1), np.zeros((1, 1)))
    state = _state_for(data, arm)
    step_impute_missing(state, data, make_rng(19))
    imp = state.y_imp[1, 1:]
    assert abs(np.mean(imp > 0) - 0.5) < 0.02
    assert abs(imp[imp > 0].mean() - 5) < 0.05 and abs(imp[imp < 0].mean() + 5) < 0.05


# ---- driver --------------------------------------------------------------------------


def test_stored_draw_count():
    data = _tiny_data()
    d = run_chain(data, Hyperparams(L=5), n_iter=11, burn_in=10, thin=1, seed=1)
    assert d.n_draws == 1 and d.iterations.tolist() == [10]
    d = run_chain(data, Hyperparams(L=5), n_iter=37, burn_in=5, thin=3, seed=1)
    assert d.n_draws == n_stored(37, 5, 3) == 10
    assert d.S.shape == (10, 2, data.n) and d.beta.shape == (10, 2, 4, 2)


@pytest.mark.parametrize("kw", [dict(n_iter=5, burn_in=5), dict(n_iter=5, burn_in=-1), dict(n_iter=10, burn_in=1, thin=0)])
def test_run_chain_argument_errors(kw):
    with pytest.raises(ValueError):
        run_chain(_tiny_data(), **kw)


@pytest.mark.parametrize("missing", ["augment", "collapse"])
def test_chain_invariants(missing):
    data = _tiny_data(40, seed=2)
    d = run_chain(data, Hyperparams(L=8), n_iter=200, burn_in=50, thin=1, seed=3, missing=missing)
    assert np.all(np.diff(d.eta, axis=2) > 0)
    assert np.all(d.sigma2 > 0)
    idx = np.arange(data.n)
    for r in range(d.n_draws):
        assert np.array_equal(d.y_imp[r][data.t, idx], data.y)
    assert d.S.min() >= 0 and d.S.max() < 8


def test_seed_determinism():
    data = _tiny_data(25)
    a = run_chain(data, Hyperparams(L=6), n_iter=60, burn_in=10, thin=2, seed=42)
    b = run_chain(data, Hyperparams(L=6), n_iter=60, burn_in=10, thin=2, seed=42)
    c = run_chain(data, Hyperparams(L=6), n_iter=60, burn_in=10, thin=2, seed=43)
    for f in ("S", "y_imp", "eta", "sigma2", "beta0", "beta"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    assert not np.array_equal(a.y_imp, c.y_imp)


def test_errors_carry_iteration_and_arm(monkeypatch):
    import cdbmm.gibbs as g

    calls = {"n": 0}
    real = g.sample_beta

    def flaky(*args, **kw):
        calls["n"] += 1
        if calls["n"] == 7:
            raise FloatingPointError("boom")
        return real(*args, **kw)

    monkeypatch.setattr(g, "sample_beta", flaky)
    with pytest.raises(ChainError, match=r"iteration 3: arm 0: boom"):
        run_chain(_tiny_data(), Hyperparams(L=4), n_iter=10, burn_in=0, thin=1)


def test_unknown_missing_mode():
    with pytest.raises(ValueError):
        run_chain(_tiny_data(), n_iter=2, burn_in=0, missing="drop")


def test_prior_reduction_for_variances():
    # two units and a huge atom prior: almost every cluster is empty, so sigma2 follows InvGamma(5, 1)
    data = Dataset([0.0, 0.5], [0, 1], [[0.0], [1.0]])
    hyper = Hyperparams(sigma2_eta=1e6, L=4)
    d = run_chain(data, hyper, n_iter=20_000, burn_in=100, thin=1, seed=4)
    occupied = np.zeros_like(d.sigma2, dtype=bool)
    for r in range(d.n_draws):
        for t in (0, 1):
            occupied[r, t, np.unique(d.S[r, t])] = True
    s2 = d.sigma2[~occupied]
    assert abs(s2.mean() - 0.25) < 0.01
    assert abs(s2.var() - 1 / 48) < 0.004


def test_initial_state_shapes_and_order():
    data = _tiny_data(50)
    st = initial_state(data, Hyperparams(L=7), make_rng(0))
    for arm in st.arms:
        arm.validate()
        assert arm.L == 7
        assert np.all(arm.beta == 0) and np.all(arm.sigma2 >= 1e-3)
    assert st.S.max() < 5
    assert np.array_equal(st.y_imp[0], data.y) and np.array_equal(st.y_imp[1], data.y)


def test_scenario_one_recovers_three_clusters_per_arm():
    sim = simulate_scenario(ScenarioSpec(1, n=500, seed=31))
    d = run_chain(sim.data, n_iter=3000, burn_in=1000, thin=2, seed=32)
    truth = {0: (2.0, 4.0, 6.0), 1: (0.0, 3.0, 6.0)}
    for t in (0, 1):
        S = d.S[:, t]
        part = point_estimate_partition(build_psm(S), S)
        assert part.n_clusters == 3
        # atom estimate of each cluster: posterior mean of the atom its units sit on
        atoms = d.eta[:, t][np.arange(d.n_draws)[:, None], S]
        est = sorted(atoms[:, part.labels == k].mean() for k in np.unique(part.labels))
        assert np.allclose(est, truth[t], atol=0.15), est


def test_scenario_seven_single_cluster_in_replicates(studies):
    report = studies.get(7, 10)
    single = [r.n_clusters == (1, 1) for r in report.replicates]
    assert np.mean(single) >= 0.95
