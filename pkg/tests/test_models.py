import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from psaem.errors import DegenerateStatsError, DomainError, OptimizerError
from psaem.models import (INITIAL_GUESS, LGSS, SYNTHETIC_TRUTH, BetaBernoulliChains, DiscreteHmm,
                          WaterTank, beta_prior_mstep, beta_prior_suffstats, load_watertank_csv,
                          simulation_rmse, synthetic_inputs)
from psaem.models.beta import beta_loglik

HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


def num_grad(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


# -- LGSS ---------------------------------------------------------------------------

def test_lgss_transition_at_mode():
    m = LGSS()
    assert m.transition_logpdf([0.0], [0.0], [0.0], 1) == pytest.approx(-HALF_LOG_2PI, abs=1e-15)
    assert m.transition_logpdf([0.8], [1.0], [0.8], 1) == pytest.approx(-HALF_LOG_2PI, abs=1e-15)


@pytest.mark.parametrize("x,y", [(0.0, 0.0), (1.0, 1.0)])
def test_lgss_observation_at_mode(x, y):
    assert LGSS().observation_logpdf([0.5], [x], [y]) == pytest.approx(-0.5 * np.log(2 * np.pi * 0.3))


def test_lgss_domain():
    m = LGSS()
    with pytest.raises(DomainError):
        m.check_theta([1.0])
    with pytest.raises(DomainError):
        m.check_theta([0.1, 0.2])
    assert LGSS(theta_bound=np.inf).in_domain([3.0])


def test_lgss_rejects_bad_variances():
    with pytest.raises(ValueError):
        LGSS(sigma_w2=0.0)


def test_lgss_transition_moments(rng):
    n = 100_000
    draws = LGSS().sample_transition([0.0], np.zeros((n, 1)), 1, rng)[:, 0]
    assert abs(draws.mean()) < 4 / np.sqrt(n)
    assert abs(draws.var() - 1) < 4 * np.sqrt(2 / n)


def test_lgss_initial_variance(rng):
    n = 100_000
    draws = LGSS().sample_initial([0.5], n, rng)[:, 0]
    assert abs(draws.var() - 1) < 4 * np.sqrt(2 / n)


def test_lgss_suffstats_components():
    m = LGSS()
    x = np.array([[1.0], [2.0], [-1.0]])
    y = np.array([[2.5], [-1.0]])
    S = m.suffstats(x, y)
    np.testing.assert_allclose(S, [(4 + 1) / 2, (2 - 2) / 2, (1 + 4) / 2, (0.25 + 0) / 2])
    np.testing.assert_array_equal(m.suffstats(np.zeros((4, 1)), np.zeros((3, 1))), np.zeros(4))


def test_lgss_suffstats_length_mismatch():
    with pytest.raises(ValueError):
        LGSS().suffstats(np.zeros((4, 1)), np.zeros((4, 1)))


def test_lgss_mstep_least_squares():
    T = 10
    S = np.array([0.0, 8.0, 10.0, 0.0]) / T
    assert LGSS().mstep(S)[0] == pytest.approx(0.8)
    assert LGSS().mstep(np.array([1.0, 0.0, 1.0, 0.0]))[0] == 0.0


def test_lgss_mstep_degenerate():
    with pytest.raises(DegenerateStatsError):
        LGSS().mstep(np.zeros(4))


def test_lgss_mstep_stationary_with_variances(rng):
    m = LGSS(learn_variances=True)
    x, y = m.simulate([0.7, 0.8, 0.4], 200, rng)
    S = m.suffstats(x, y)
    th = m.mstep(S)
    assert np.linalg.norm(num_grad(lambda t: m.mstep_objective(t, S), th)) < 1e-6


def test_lgss_suffstats_additive(rng):
    m = LGSS()
    x, y = m.simulate([0.9], 30, rng)
    whole = 30 * m.suffstats(x, y)
    parts = 12 * m.suffstats(x[:13], y[:12]) + 18 * m.suffstats(x[12:], y[12:])
    np.testing.assert_allclose(whole, parts, rtol=1e-12)


# -- exponential-family consistency across models --------------------------------------

def _expfam_pairs(model, thetas, x, y):
    T = len(y)
    direct = np.array([model.complete_loglik(t, x, y) for t in thetas])
    S = model.suffstats(x, y)
    viaS = np.array([T * model.expfam_objective(t, S) for t in thetas])
    # the difference must be a theta-free constant
    return direct - viaS


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.lists(st.floats(-0.95, 0.95), min_size=3, max_size=3))
def test_lgss_expfam_identity(seed, thetas):
    m = LGSS(learn_variances=True)
    rng = np.random.default_rng(seed)
    x, y = m.simulate([0.5, 1.0, 0.3], 15, rng)
    th = [[a, 0.5 + abs(a), 0.2 + a * a] for a in thetas]
    d = _expfam_pairs(m, th, x, y)
    np.testing.assert_allclose(d, d[0], atol=1e-9)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.lists(st.floats(0.05, 0.95), min_size=6, max_size=6))
def test_hmm_expfam_identity(seed, p):
    m = DiscreteHmm([0.5, 0.5], n_obs=2)
    rng = np.random.default_rng(seed)
    base = m.pack([[0.7, 0.3], [0.4, 0.6]], [[0.8, 0.2], [0.1, 0.9]])
    x, y = m.simulate(base, 12, rng)
    th = [m.pack([[a, 1 - a], [b, 1 - b]], [[c, 1 - c], [0.3, 0.7]]) for a, b, c in
          (p[:3], p[3:], [p[0], p[4], p[2]])]
    d = _expfam_pairs(m, th, x, y)
    np.testing.assert_allclose(d, d[0], atol=1e-9)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_watertank_expfam_identity(seed):
    rng = np.random.default_rng(seed)
    m = WaterTank(synthetic_inputs(25, rng))
    x, y = m.simulate(SYNTHETIC_TRUTH, 25, rng)
    th = [np.array(SYNTHETIC_TRUTH) * rng.uniform(0.5, 1.5, 9) for _ in range(3)]
    d = _expfam_pairs(m, th, x, y)
    np.testing.assert_allclose(d, d[0], atol=1e-7 * np.abs(d).max())


def test_beta_chains_expfam_identity(rng):
    m = BetaBernoulliChains(3, flip_prob=0.1)
    x, y = m.simulate([0.2, 0.3, 0.4], 20, rng)
    th = [[0.1, 0.5, 0.7], [0.3, 0.3, 0.3], [0.9, 0.2, 0.6]]
    d = _expfam_pairs(m, th, x, y)
    np.testing.assert_allclose(d, d[0], atol=1e-10)


# -- discrete HMM ---------------------------------------------------------------------

def test_hmm_zero_emission_is_minus_inf():
    m = DiscreteHmm([0.5, 0.5], emission=[[1.0, 0.0], [0.5, 0.5]], learn_emissions=False)
    th = m.pack(np.full((2, 2), 0.5))
    assert m.observation_logpdf(th, [0.0], [1]) == -np.inf


def test_hmm_deterministic_row(rng):
    m = DiscreteHmm([0.5, 0.5], emission=np.eye(2), learn_emissions=False)
    th = m.pack([[0.0, 1.0], [0.5, 0.5]])
    assert np.all(m.sample_transition(th, np.zeros((1000, 1)), 1, rng) == 1.0)


def test_hmm_point_mass_initial(rng):
    m = DiscreteHmm([0.0, 1.0], emission=np.eye(2), learn_emissions=False)
    assert np.all(m.sample_initial(m.pack(np.eye(2)), 500, rng) == 1.0)


def test_hmm_rows_are_probability_vectors(rng):
    m = DiscreteHmm([0.3, 0.7], n_obs=3)
    with pytest.raises(DomainError):
        m.pack([[0.5, 0.6], [0.5, 0.5]], np.full((2, 3), 1 / 3))
    th = m.pack([[0.2, 0.8], [0.6, 0.4]], [[0.1, 0.2, 0.7], [0.3, 0.3, 0.4]])
    np.testing.assert_allclose(m.transition_matrix(th).sum(axis=1), 1, atol=1e-12)
    np.testing.assert_allclose(m.emission_matrix(th).sum(axis=1), 1, atol=1e-12)


def test_hmm_mstep_normalizes_counts():
    m = DiscreteHmm([0.5, 0.5], emission=np.eye(2), learn_emissions=False)
    np.testing.assert_allclose(m.mstep([1.0, 3.0, 2.0, 2.0]), [0.25, 0.75, 0.5, 0.5])
    with pytest.raises(DegenerateStatsError):
        m.mstep([0.0, 0.0, 1.0, 1.0])


def test_hmm_suffstats_additive(rng):
    m = DiscreteHmm([0.5, 0.5], n_obs=2)
    th = m.pack([[0.7, 0.3], [0.4, 0.6]], [[0.8, 0.2], [0.1, 0.9]])
    x, y = m.simulate(th, 20, rng)
    np.testing.assert_allclose(20 * m.suffstats(x, y),
                               8 * m.suffstats(x[:9], y[:8]) + 12 * m.suffstats(x[8:], y[8:]))


# -- water tank -----------------------------------------------------------------------

def test_watertank_zero_noise_rejected():
    m = WaterTank(np.zeros(5))
    with pytest.raises(DomainError):
        m.make_theta(**dict(zip(m.param_names, INITIAL_GUESS[:7] + (0.0, 6.0))))
    with pytest.raises(DomainError):
        m.make_theta(**dict(zip(m.param_names, (0.05,) * 6 + (0.0, 0.1, 6.0))))


def test_watertank_empty_tanks_stay_empty(rng):
    m = WaterTank(np.zeros(3))
    th = np.array(INITIAL_GUESS[:7] + (1e-24, 6.0))
    nxt = m.sample_transition(th, np.zeros(2), 1, rng)
    np.testing.assert_allclose(nxt, 0.0, atol=1e-10)


def test_watertank_initial_mean(rng):
    m = WaterTank(np.zeros(3))
    draws = m.sample_initial(INITIAL_GUESS, 100_000, rng)
    assert abs(draws[:, 0].mean() - 6.0) < 4 * np.sqrt(0.1 / 100_000)


def test_watertank_noise_free_round_trip():
    rng = np.random.default_rng(0)
    m = WaterTank(synthetic_inputs(400, rng, low=0.0, high=10.0))
    truth = np.array(SYNTHETIC_TRUTH)
    x, yhat = m.simulate_noise_free(truth)
    assert (x[:, 0] > 10).any(), "the overflow gain needs an overflowing trajectory"
    est = m.mstep(m.suffstats(x, yhat))
    np.testing.assert_allclose(est[:6], truth[:6], atol=1e-6)
    assert est[8] == pytest.approx(truth[8], abs=1e-6)


def test_watertank_mstep_stationary(rng):
    m = WaterTank(synthetic_inputs(300, rng))
    x, y = m.simulate(SYNTHETIC_TRUTH, 300, rng)
    S = m.suffstats(x, y)
    th = m.mstep(S)
    g = num_grad(lambda t: m.mstep_objective(t, S), th, h=1e-7)
    assert np.linalg.norm(g) < 1e-5 * max(1.0, np.abs(th).max())


def test_watertank_singular_stats():
    m = WaterTank(np.zeros(3))
    x = np.zeros((4, 2))
    with pytest.raises(DegenerateStatsError):
        m.mstep(m.suffstats(x, np.zeros(3)))


def test_watertank_suffstats_length_mismatch():
    with pytest.raises(ValueError):
        WaterTank(np.zeros(2)).suffstats(np.zeros((4, 2)), np.zeros(3))


def test_watertank_long_simulation_is_finite():
    rng = np.random.default_rng(1)
    m = WaterTank(synthetic_inputs(1024, rng))
    x, y = m.simulate(INITIAL_GUESS, 1024, rng)
    assert np.all(np.isfinite(x)) and np.all(np.isfinite(y))
    assert np.isfinite(simulation_rmse(m, INITIAL_GUESS, y))


@pytest.mark.parametrize("header", ["", "u,y\n"])
def test_watertank_csv(tmp_path, header):
    p = tmp_path / "d.csv"
    p.write_text(header + "1.5,2.0\n3,4.25\n")
    u, y = load_watertank_csv(p)
    np.testing.assert_array_equal(u, [1.5, 3.0])
    np.testing.assert_array_equal(y[:, 0], [2.0, 4.25])


def test_watertank_csv_rejects_garbage(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1,2\nx,y\n")
    with pytest.raises(ValueError, match=":2:"):
        load_watertank_csv(p)


# -- Beta prior -----------------------------------------------------------------------

def test_beta_suffstats_examples():
    np.testing.assert_allclose(beta_prior_suffstats([0.5]), [1, np.log(0.5), np.log(0.5)])
    np.testing.assert_allclose(beta_prior_suffstats([0.5, 0.5]), [2, 2 * np.log(0.5), 2 * np.log(0.5)])
    np.testing.assert_array_equal(beta_prior_suffstats(np.empty(0)), [0, 0, 0])
    with pytest.raises(DomainError):
        beta_prior_suffstats([0.0, 0.5])


def test_beta_mstep_population_round_trip():
    M = 1.0
    S = [M, special.digamma(2) - special.digamma(7), special.digamma(5) - special.digamma(7)]
    np.testing.assert_allclose(beta_prior_mstep(S), [2.0, 5.0], atol=1e-4)


def test_beta_mstep_gradient_vanishes():
    S = np.array([3.0, -6.0, -1.5])
    eta = beta_prior_mstep(S)
    assert np.linalg.norm(num_grad(lambda e: beta_loglik(e, S), eta, h=1e-6)) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.floats(-5.0, -0.7))
def test_beta_mstep_symmetric(sl):
    a, b = beta_prior_mstep([4.0, 4 * sl, 4 * sl])
    assert a == pytest.approx(b, rel=1e-8)


def test_beta_mstep_uniform_samples(rng):
    th = rng.uniform(size=100_000)
    a, b = beta_prior_mstep(beta_prior_suffstats(th))
    # the MLE's asymptotic sd at (1,1) is about 1.8/sqrt(n)
    assert abs(a - 1) < 0.03 and abs(b - 1) < 0.03


def test_beta_mstep_rejects_empty():
    with pytest.raises((DegenerateStatsError, OptimizerError, ValueError)):
        beta_prior_mstep([0.0, 0.0, 0.0])


def test_beta_chains_pinned_start(rng):
    m = BetaBernoulliChains(2, flip_prob=0.0, x0=[1, 0])
    np.testing.assert_array_equal(m.sample_initial([0.3, 0.3], 4, rng), [[1, 0]] * 4)
    assert m.initial_logpdf([0.3, 0.3], [0.0, 0.0]) == -np.inf
