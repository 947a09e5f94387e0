import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from psaem.errors import StateSpaceTooLarge
from psaem.models import LGSS, DiscreteHmm
from psaem.oracle import (enumerate_posterior, exact_em_step, forward_backward, hmm_loglik,
                          kalman_exact_ml, kalman_filter, kalman_loglik, kalman_ml_search)


def dense_loglik(theta, y, sw2, se2, p0):
    """log N(y; 0, Sigma) with the covariance of y_{1:T} written out entry by entry."""
    T = len(y)
    C = np.empty((T, T))
    for t in range(1, T + 1):
        for s in range(1, T + 1):
            c = theta ** (t + s) * p0
            c += sum(theta ** (t - r) * theta ** (s - r) for r in range(1, min(t, s) + 1)) * sw2
            C[t - 1, s - 1] = c
    C += se2 * np.eye(T)
    return multivariate_normal(np.zeros(T), C).logpdf(y)


def test_kalman_single_step():
    assert kalman_loglik(0.0, [0.0]) == pytest.approx(-0.5 * np.log(2 * np.pi * 1.3), abs=1e-15)


def test_kalman_empty_data():
    assert kalman_loglik(0.7, np.empty(0)) == 0.0


def test_kalman_rejects_bad_variance():
    with pytest.raises(ValueError):
        kalman_loglik(0.5, [1.0], sigma_e2=0.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(-1.5, 1.5), st.integers(1, 8), st.integers(0, 2**31),
       st.floats(0.2, 3.0), st.floats(0.05, 2.0), st.floats(0.1, 5.0))
def test_kalman_matches_dense_gaussian(theta, T, seed, sw2, se2, p0):
    y = np.random.default_rng(seed).normal(size=T) * 2
    assert kalman_loglik(theta, y, sw2, se2, p0) == pytest.approx(dense_loglik(theta, y, sw2, se2, p0),
                                                                  abs=1e-10)


def test_kalman_filter_variances_positive(lgss_data):
    _, y = lgss_data
    res = kalman_filter(0.9, y)
    assert np.all(res.variances > 0)
    assert res.loglik == pytest.approx(kalman_loglik(0.9, y))
    assert len(res.means) == len(y) + 1


def test_kalman_vectorized_over_theta(lgss_data):
    _, y = lgss_data
    g = np.array([-0.3, 0.2, 0.9])
    np.testing.assert_allclose(kalman_loglik(g, y), [kalman_loglik(t, y) for t in g])


def test_kalman_derivative_smooth(lgss_data):
    _, y = lgss_data
    f = lambda t: kalman_loglik(t, y)  # noqa: E731
    h = 1e-3
    five_point = (f(0.6 - 2 * h) - 8 * f(0.6 - h) + 8 * f(0.6 + h) - f(0.6 + 2 * h)) / (12 * h)
    central = (f(0.6 + 1e-5) - f(0.6 - 1e-5)) / 2e-5
    assert central == pytest.approx(five_point, abs=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_ml_near_zero_for_white_latent(seed):
    rng = np.random.default_rng(seed)
    _, y = LGSS().simulate([0.0], 10_000, rng)
    # sd of the estimate is about 0.016 here, so 0.05 is a ~3 sd band
    assert abs(kalman_exact_ml(y)) < 0.05


def test_ml_sign_symmetry(lgss_data):
    _, y = lgss_data
    assert kalman_exact_ml(y) == pytest.approx(kalman_exact_ml(-y), abs=1e-9)


def test_ml_beats_dense_grid(lgss_data):
    _, y = lgss_data
    res = kalman_ml_search(y)
    grid = np.linspace(-1 + 1e-9, 1 - 1e-9, 100_000)
    assert kalman_loglik(grid, y).max() <= res.loglik + 1e-8
    assert res.loglik == pytest.approx(kalman_loglik(res.theta, y))


def test_ml_needs_data():
    with pytest.raises(ValueError):
        kalman_exact_ml(np.empty(0))


# -- enumeration ------------------------------------------------------------------------

def test_enumeration_normalized_and_matches_forward_backward(hmm, hmm_theta):
    y = [0, 1, 1, 0, 1]
    post = enumerate_posterior(hmm, hmm_theta, y)
    assert abs(post.probs.sum() - 1) < 1e-12
    marg, ll = forward_backward(hmm, hmm_theta, y)
    np.testing.assert_allclose(post.marginals(), marg, atol=1e-12)
    assert ll == pytest.approx(post.log_evidence, abs=1e-12)


def test_uninformative_emissions_give_prior_path_law():
    m = DiscreteHmm([0.3, 0.7], emission=np.full((2, 2), 0.5), learn_emissions=False)
    A = np.array([[0.9, 0.1], [0.4, 0.6]])
    post = enumerate_posterior(m, m.pack(A), [1, 0])
    prior = np.array([[0.3, 0.7][p[0]] * A[p[0], p[1]] * A[p[1], p[2]] for p in post.paths])
    np.testing.assert_allclose(post.probs, prior, atol=1e-14)


def test_empty_data_posterior_is_initial(hmm, hmm_theta):
    post = enumerate_posterior(hmm, hmm_theta, np.empty(0))
    np.testing.assert_allclose(post.probs, hmm.init_probs)
    assert post.log_evidence == 0.0


def test_enumeration_refuses_huge_spaces(hmm, hmm_theta):
    with pytest.raises(StateSpaceTooLarge):
        enumerate_posterior(hmm, hmm_theta, np.zeros(20, dtype=int))


def test_index_of_round_trip(hmm, hmm_theta):
    post = enumerate_posterior(hmm, hmm_theta, [0, 1])
    np.testing.assert_array_equal(post.index_of(post.paths), np.arange(len(post.probs)))


# -- exact EM -------------------------------------------------------------------------------

@pytest.fixture
def em_setup():
    m = DiscreteHmm([0.5, 0.5], emission=[[0.85, 0.15], [0.25, 0.75]], learn_emissions=False)
    y = [0, 1, 0, 0, 1, 1, 0, 1, 1, 0]  # interior maximizer
    return m, y


def test_exact_em_monotone_and_fixed_point(em_setup):
    m, y = em_setup
    th = m.pack([[0.5, 0.5], [0.5, 0.5]])
    lls = [hmm_loglik(m, th, y)]
    for _ in range(400):
        th = exact_em_step(m, th, y)
        lls.append(hmm_loglik(m, th, y))
    assert np.all(np.diff(lls) >= -1e-12)
    assert np.abs(exact_em_step(m, th, y) - th).max() < 1e-10


def test_exact_em_fixed_point_has_zero_gradient(em_setup):
    m, y = em_setup
    th = m.pack([[0.6, 0.4], [0.3, 0.7]])
    for _ in range(2000):
        th = exact_em_step(m, th, y)
    A = m.transition_matrix(th)

    def ll(a, b):
        return hmm_loglik(m, m.pack([[a, 1 - a], [b, 1 - b]]), y)

    h = 1e-6
    ga = (ll(A[0, 0] + h, A[1, 0]) - ll(A[0, 0] - h, A[1, 0])) / (2 * h)
    gb = (ll(A[0, 0], A[1, 0] + h) - ll(A[0, 0], A[1, 0] - h)) / (2 * h)
    assert abs(ga) < 1e-5 and abs(gb) < 1e-5
