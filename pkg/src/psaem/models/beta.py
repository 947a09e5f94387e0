"""Beta-prior empirical Bayes: prior statistics, hyperparameter M-step and a demo model."""

from __future__ import annotations

import numpy as np
from scipy import optimize, special

from ..errors import DegenerateStatsError, DomainError, OptimizerError
from .base import ExpFamilyModel, as_shape

GRAD_TOL = 1e-8


def beta_prior_suffstats(thetas) -> np.ndarray:
    """(M, sum log theta_m, sum log(1 - theta_m)) over the trailing axis."""
    th = np.asarray(thetas, dtype=float)
    if th.ndim == 0:
        th = th[None]
    if np.any((th <= 0) | (th >= 1)) or not np.all(np.isfinite(th)):
        raise DomainError("Beta variables must lie strictly inside (0, 1)")
    M = np.full(th.shape[:-1], float(th.shape[-1]))
    return np.stack([M, np.log(th).sum(axis=-1), np.log1p(-th).sum(axis=-1)], axis=-1)


def beta_loglik(eta, stats):
    """Beta log-likelihood of the statistics, divided by M."""
    a, b = eta
    M, sl, sl1 = stats
    return -special.betaln(a, b) + (a - 1.0) * sl / M + (b - 1.0) * sl1 / M


def _grad(a, b, ml, ml1):
    dab = special.digamma(a + b)
    return np.array([dab - special.digamma(a) + ml, dab - special.digamma(b) + ml1])


def beta_prior_mstep(stats, bounds=(1e-6, 1e6)) -> np.ndarray:
    """Maximize the Beta log-likelihood of (M, sum log theta, sum log(1-theta)).

    A bounded quasi-Newton solve in log-parameters is followed by Newton
    polishing on the (concave) objective until the gradient drops below 1e-8.
    Batched statistics of shape (..., 3) are solved row by row.
    """
    stats = np.asarray(stats, dtype=float)
    if stats.ndim > 1:
        flat = stats.reshape(-1, 3)
        return np.stack([beta_prior_mstep(s, bounds) for s in flat]).reshape(stats.shape[:-1] + (2,))
    M, sl, sl1 = stats
    if not M >= 1:
        raise DegenerateStatsError("Beta M-step needs at least one variable (M >= 1)")
    if not (np.isfinite(sl) and np.isfinite(sl1)):
        raise DegenerateStatsError("Beta M-step: non-finite log statistics")
    ml, ml1 = sl / M, sl1 / M
    # Jensen: log E[theta] + log E[1-theta] >= E log theta + E log(1-theta); equality
    # (all variables equal) sends the maximizer to infinity.
    if np.exp(ml) + np.exp(ml1) >= 1.0:
        raise OptimizerError("Beta M-step: statistics have no finite maximizer (zero spread)")

    def negll(z):
        a, b = np.exp(z)
        return -(-special.betaln(a, b) + (a - 1.0) * ml + (b - 1.0) * ml1)

    def negjac(z):
        a, b = np.exp(z)
        return -_grad(a, b, ml, ml1) * np.array([a, b])

    # Method-of-moments start from the geometric means.
    ga, gb = np.exp(ml), np.exp(ml1)
    z0 = np.log(np.clip([0.5 * ga / (1.0 - ga - gb), 0.5 * gb / (1.0 - ga - gb)], 1e-3, 1e3))
    lb = np.log(bounds[0]), np.log(bounds[1])
    res = optimize.minimize(negll, z0, jac=negjac, method="L-BFGS-B",
                            bounds=[lb, lb], options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 1000})
    a, b = np.exp(res.x)
    for _ in range(50):
        g = _grad(a, b, ml, ml1)
        if np.max(np.abs(g)) < GRAD_TOL * 1e-2:
            break
        t_ab = special.polygamma(1, a + b)
        H = np.array([[t_ab - special.polygamma(1, a), t_ab],
                      [t_ab, t_ab - special.polygamma(1, b)]])
        step = np.linalg.solve(H, -g)
        lam = 1.0
        while lam > 1e-8 and (a + lam * step[0] <= 0 or b + lam * step[1] <= 0):
            lam *= 0.5
        a, b = a + lam * step[0], b + lam * step[1]
    g = _grad(a, b, ml, ml1)
    if not (np.all(np.isfinite([a, b])) and np.max(np.abs(g)) < GRAD_TOL):
        raise OptimizerError(f"Beta M-step did not converge: eta=({a}, {b}), grad={g}")
    if not (bounds[0] <= a <= bounds[1] and bounds[0] <= b <= bounds[1]):
        raise OptimizerError(f"Beta M-step hit the search bounds: eta=({a}, {b})")
    return np.array([a, b])


class BetaPrior:
    """Beta(a, b) prior, applied independently to every component of theta."""

    param_names = ("a", "b")

    def suffstats(self, theta):
        return beta_prior_suffstats(theta)

    def mstep(self, stats):
        return beta_prior_mstep(stats)

    def in_domain(self, eta):
        eta = np.asarray(eta, dtype=float)
        return np.all(np.isfinite(eta) & (eta > 0), axis=-1)

    def sample(self, eta, shape, rng):
        eta = np.asarray(eta, dtype=float)
        return rng.beta(eta[..., 0], eta[..., 1], size=shape)


class BetaBernoulliChains(ExpFamilyModel):
    """M independent two-state chains observed through a binary symmetric channel.

    Chain m switches state with probability theta_m at every step; each
    observed bit is flipped with probability ``flip_prob`` (0 means the
    states are observed exactly).  States start uniformly unless ``x0`` pins
    the initial state.

    Statistics: per-chain switch counts / T, then per-chain stay counts / T.
    """

    name = "beta-chains"

    def __init__(self, n_chains, flip_prob=0.1, x0=None):
        if not 0 <= flip_prob < 0.5:
            raise ValueError("flip_prob must lie in [0, 0.5)")
        self.n_chains = int(n_chains)
        self.x0 = None if x0 is None else np.asarray(x0, dtype=float).reshape(self.n_chains)
        self.flip_prob = float(flip_prob)
        self.dim_x = self.dim_y = self.n_chains
        self.param_names = tuple(f"p{m}" for m in range(self.n_chains))
        self.n_stats = 2 * self.n_chains

    def __repr__(self):
        return f"BetaBernoulliChains(n_chains={self.n_chains}, flip_prob={self.flip_prob})"

    def in_domain(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.all((theta > 0) & (theta < 1), axis=-1)

    def sample_initial(self, theta, shape, rng):
        shape = as_shape(shape) + (self.n_chains,)
        if self.x0 is not None:
            return np.broadcast_to(self.x0, shape).copy()
        return (rng.random(shape) < 0.5).astype(float)

    def initial_logpdf(self, theta, x):
        if self.x0 is not None:
            return np.where(np.all(np.asarray(x) == self.x0, axis=-1), 0.0, -np.inf)
        return np.full(np.shape(x)[:-1], -self.n_chains * np.log(2.0))

    def sample_transition(self, theta, x_prev, t, rng):
        x_prev = np.asarray(x_prev, dtype=float)
        p = np.broadcast_to(np.asarray(theta, dtype=float), np.broadcast_shapes(np.shape(theta), x_prev.shape))
        flip = rng.random(p.shape) < p
        return np.where(flip, 1.0 - x_prev, x_prev)

    def transition_logpdf(self, theta, x_prev, x, t):
        switched = np.asarray(x_prev) != np.asarray(x)
        with np.errstate(divide="ignore"):
            return np.sum(np.where(switched, np.log(theta), np.log1p(-np.asarray(theta))), axis=-1)

    def observation_logpdf(self, theta, x, y_t):
        eps = self.flip_prob
        diff = np.asarray(x) != np.asarray(y_t)
        if eps == 0.0:
            return np.where(np.any(diff, axis=-1), -np.inf, 0.0)
        return np.sum(np.where(diff, np.log(eps), np.log1p(-eps)), axis=-1)

    def sample_observation(self, theta, x, rng):
        x = np.asarray(x, dtype=float)
        flip = rng.random(x.shape) < self.flip_prob
        return np.where(flip, 1.0 - x, x)

    def log_transition_bound(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.sum(np.log(np.maximum(theta, 1.0 - theta)), axis=-1)

    def switch_counts(self, x):
        x = np.asarray(x)
        sw = (x[..., 1:, :] != x[..., :-1, :]).sum(axis=-2)
        return sw, (x.shape[-2] - 1) - sw

    def suffstats(self, x, y):
        y = self.check_observations(y)
        x = self.check_trajectory(x, len(y))
        sw, st = self.switch_counts(x)
        scale = 1.0 / max(len(y), 1)
        return np.concatenate([sw, st], axis=-1) * scale

    def mstep(self, stats):
        stats = np.asarray(stats, dtype=float)
        sw, st = stats[..., : self.n_chains], stats[..., self.n_chains:]
        tot = sw + st
        if np.any(tot <= 0):
            raise DegenerateStatsError("beta-chains: no transitions observed")
        p = sw / tot
        if np.any((p <= 0) | (p >= 1)):
            raise DegenerateStatsError("beta-chains: switching probability on the boundary")
        return p

    def expfam_objective(self, theta, stats):
        theta = np.asarray(theta, dtype=float)
        stats = np.asarray(stats, dtype=float)
        sw, st = stats[..., : self.n_chains], stats[..., self.n_chains:]
        return np.sum(sw * np.log(theta) + st * np.log1p(-theta), axis=-1)
