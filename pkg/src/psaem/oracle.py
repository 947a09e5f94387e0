"""Exact references: scalar Kalman filter and exact ML, brute-force enumeration
and forward-backward for small discrete HMMs, and the exact EM update."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from .errors import StateSpaceTooLarge

log = logging.getLogger(__name__)

MAX_ENUMERATION = 10**6


# -- scalar linear Gaussian model -------------------------------------------------

@dataclass
class KalmanResult:
    loglik: float
    means: np.ndarray  # filtered means, t = 0..T
    variances: np.ndarray


def _check_variances(*vs):
    if any(not v > 0 for v in vs):
        raise ValueError("variances must be positive")


def kalman_filter(theta, y, sigma_w2=1.0, sigma_e2=0.3, prior_var=1.0) -> KalmanResult:
    """Filter x_t = theta x_{t-1} + w_t, y_t = x_t + e_t with x_0 ~ N(0, prior_var)."""
    _check_variances(sigma_w2, sigma_e2, prior_var)
    y = np.asarray(y, dtype=float).reshape(-1)
    m, P = 0.0, float(prior_var)
    means, variances = [m], [P]
    ll = 0.0
    for yt in y:
        mp, Pp = theta * m, theta * theta * P + sigma_w2
        S = Pp + sigma_e2
        v = yt - mp
        ll -= 0.5 * (np.log(2.0 * np.pi * S) + v * v / S)
        K = Pp / S
        m, P = mp + K * v, (1.0 - K) * Pp
        means.append(m)
        variances.append(P)
    return KalmanResult(float(ll), np.array(means), np.array(variances))


def kalman_loglik(theta, y, sigma_w2=1.0, sigma_e2=0.3, prior_var=1.0):
    """Exact log p_theta(y_{1:T}) by prediction-error decomposition; vectorized over theta."""
    _check_variances(sigma_w2, sigma_e2, prior_var)
    th = np.asarray(theta, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    m = np.zeros_like(th)
    P = np.full_like(th, float(prior_var))
    ll = np.zeros_like(th)
    for yt in y:
        mp, Pp = th * m, th * th * P + sigma_w2
        S = Pp + sigma_e2
        v = yt - mp
        ll -= 0.5 * (np.log(2.0 * np.pi * S) + v * v / S)
        K = Pp / S
        m, P = mp + K * v, (1.0 - K) * Pp
    return float(ll) if ll.ndim == 0 else ll


@dataclass
class MLSearch:
    theta: float
    loglik: float
    local_maxima: np.ndarray  # refined local maximizers found from the grid brackets

    @property
    def multimodal(self) -> bool:
        return len(self.local_maxima) > 1


def kalman_ml_search(y, sigma_w2=1.0, sigma_e2=0.3, prior_var=1.0, grid=401, xatol=1e-10) -> MLSearch:
    """Maximize the Kalman log-likelihood over theta in (-1, 1).

    Every local maximum of a coarse grid is refined by bounded Brent search
    inside its bracket; the best refinement wins and all are reported.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(y) < 1:
        raise ValueError("exact ML needs T >= 1")
    g = np.linspace(-1.0, 1.0, grid)
    f = kalman_loglik(g, y, sigma_w2, sigma_e2, prior_var)
    peaks = [i for i in range(grid)
             if (i == 0 or f[i] >= f[i - 1]) and (i == grid - 1 or f[i] >= f[i + 1])]

    def neg(t):
        return -kalman_loglik(t, y, sigma_w2, sigma_e2, prior_var)

    found = []
    for i in peaks:
        lo, hi = g[max(i - 1, 0)], g[min(i + 1, grid - 1)]
        res = optimize.minimize_scalar(neg, bounds=(lo, hi), method="bounded",
                                       options={"xatol": xatol, "maxiter": 500})
        found.append((float(res.x), -float(res.fun)))
    found.sort(key=lambda p: -p[1])
    best = found[0]
    maxima = np.unique(np.round([p[0] for p in found], 8))
    if len(maxima) > 1:
        log.info("likelihood has %d local maxima in (-1, 1): %s", len(maxima), maxima)
    return MLSearch(best[0], best[1], maxima)


def kalman_exact_ml(y, sigma_w2=1.0, sigma_e2=0.3, prior_var=1.0) -> float:
    return kalman_ml_search(y, sigma_w2, sigma_e2, prior_var).theta


# -- discrete HMM ---------------------------------------------------------------------

@dataclass
class EnumeratedPosterior:
    paths: np.ndarray  # (S, T+1) integer state paths, row-major over (x_0, ..., x_T)
    probs: np.ndarray  # (S,)
    log_evidence: float
    n_states: int

    def marginals(self) -> np.ndarray:
        T1 = self.paths.shape[1]
        out = np.zeros((T1, self.n_states))
        for t in range(T1):
            out[t] = np.bincount(self.paths[:, t], weights=self.probs, minlength=self.n_states)
        return out

    def index_of(self, paths) -> np.ndarray:
        """Row index of each integer path (..., T+1) in ``paths``/``probs``."""
        paths = np.asarray(paths).astype(np.intp)
        shape = (self.n_states,) * self.paths.shape[1]
        return np.ravel_multi_index(tuple(np.moveaxis(paths, -1, 0)), shape)

    def sample(self, size, rng) -> np.ndarray:
        idx = rng.choice(len(self.probs), size=size, p=self.probs)
        return self.paths[idx]


def _hmm_tables(hmm, theta):
    A = np.asarray(hmm.transition_matrix(theta), dtype=float)
    B = np.asarray(hmm.emission_matrix(theta), dtype=float)
    return hmm.init_probs, A, B


def _obs_index(hmm, y):
    return hmm.check_observations(y)[:, 0].astype(int)


def enumerate_posterior(hmm, theta, y, max_size=MAX_ENUMERATION) -> EnumeratedPosterior:
    """Exact smoothing distribution over all state paths by exhaustive summation."""
    obs = _obs_index(hmm, y)
    T, n = len(obs), hmm.n_states
    size = n ** (T + 1)
    if size > max_size:
        raise StateSpaceTooLarge(f"{n}^{T + 1} = {size} paths exceeds the limit {max_size}")
    p0, A, B = _hmm_tables(hmm, hmm.check_theta(theta))
    paths = np.indices((n,) * (T + 1)).reshape(T + 1, -1).T
    with np.errstate(divide="ignore"):
        lp0, lA, lB = np.log(p0), np.log(A), np.log(B)
    lj = lp0[paths[:, 0]]
    for t in range(1, T + 1):
        lj = lj + lA[paths[:, t - 1], paths[:, t]] + lB[paths[:, t], obs[t - 1]]
    lz = logsumexp(lj)
    return EnumeratedPosterior(paths, np.exp(lj - lz), float(lz), n)


def forward_backward(hmm, theta, y):
    """Smoothed marginals (T+1, n) and log-likelihood by scaled recursions."""
    obs = _obs_index(hmm, y)
    T = len(obs)
    p0, A, B = _hmm_tables(hmm, hmm.check_theta(theta))
    alpha = np.empty((T + 1, len(p0)))
    alpha[0] = p0
    ll = 0.0
    for t in range(1, T + 1):
        a = (alpha[t - 1] @ A) * B[:, obs[t - 1]]
        c = a.sum()
        ll += np.log(c)
        alpha[t] = a / c
    beta = np.ones_like(alpha)
    for t in range(T - 1, -1, -1):
        b = A @ (B[:, obs[t]] * beta[t + 1])
        beta[t] = b / b.sum()
    post = alpha * beta
    return post / post.sum(axis=1, keepdims=True), float(ll)


def hmm_loglik(hmm, theta, y) -> float:
    return forward_backward(hmm, theta, y)[1]


def expected_suffstats(hmm, theta, y, max_size=MAX_ENUMERATION):
    """Posterior expectation of the model's sufficient statistics, by enumeration."""
    post = enumerate_posterior(hmm, theta, y, max_size)
    S = hmm.suffstats(post.paths[..., None].astype(float), y)
    return post.probs @ S


def exact_em_step(hmm, theta, y, max_size=MAX_ENUMERATION):
    """One EM update with the E-step computed exactly by enumeration."""
    return hmm.mstep(expected_suffstats(hmm, theta, y, max_size))
