"""Scalar linear-Gaussian state-space model.

    x_{t+1} = theta * x_t + w_t,   w_t ~ N(0, sigma_w2)
    y_t     = x_t + e_t,           e_t ~ N(0, sigma_e2)
    x_0 ~ N(0, prior_var)
"""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateStatsError
from .base import ExpFamilyModel, as_shape, gaussian_logpdf


class LGSS(ExpFamilyModel):
    """LGSS with known noise variances, or with them learned as well.

    With ``learn_variances=False`` the parameter vector is ``(theta,)``;
    otherwise ``(theta, sigma_w2, sigma_e2)``.  ``theta_bound`` is the open
    interval for theta (1 for the stationary Fisherian problem, ``inf`` for
    Bayesian demos with an unrestricted Gaussian prior).

    Statistics (all divided by T), indices 0..3:
        mean x_t^2, mean x_{t-1} x_t, mean x_{t-1}^2, mean (y_t - x_t)^2
    """

    name = "lgss"
    dim_x = 1
    dim_y = 1
    n_stats = 4

    def __init__(self, sigma_w2=1.0, sigma_e2=0.3, prior_var=1.0,
                 learn_variances=False, theta_bound=1.0):
        for label, v in (("sigma_w2", sigma_w2), ("sigma_e2", sigma_e2), ("prior_var", prior_var)):
            if not v > 0:
                raise ValueError(f"{label} must be positive, got {v}")
        self.sigma_w2 = float(sigma_w2)
        self.sigma_e2 = float(sigma_e2)
        self.prior_var = float(prior_var)
        self.learn_variances = bool(learn_variances)
        self.theta_bound = float(theta_bound)
        self.param_names = ("theta", "sigma_w2", "sigma_e2") if learn_variances else ("theta",)

    def __repr__(self):
        return (f"LGSS(sigma_w2={self.sigma_w2}, sigma_e2={self.sigma_e2}, "
                f"prior_var={self.prior_var}, learn_variances={self.learn_variances})")

    def _unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.learn_variances:
            return theta[..., 0], theta[..., 1], theta[..., 2]
        return theta[..., 0], self.sigma_w2, self.sigma_e2

    def in_domain(self, theta):
        theta = np.asarray(theta, dtype=float)
        ok = np.all(np.isfinite(theta), axis=-1) & (np.abs(theta[..., 0]) < self.theta_bound)
        if self.learn_variances:
            ok &= (theta[..., 1] > 0) & (theta[..., 2] > 0)
        return ok

    def sample_initial(self, theta, shape, rng):
        return (np.sqrt(self.prior_var) * rng.standard_normal(as_shape(shape)))[..., None]

    def initial_logpdf(self, theta, x):
        return gaussian_logpdf(np.asarray(x)[..., 0], 0.0, self.prior_var)

    def sample_transition(self, theta, x_prev, t, rng):
        a, sw2, _ = self._unpack(theta)
        mean = a * np.asarray(x_prev)[..., 0]
        return (mean + np.sqrt(sw2) * rng.standard_normal(np.shape(mean)))[..., None]

    def transition_logpdf(self, theta, x_prev, x, t):
        a, sw2, _ = self._unpack(theta)
        return gaussian_logpdf(np.asarray(x)[..., 0], a * np.asarray(x_prev)[..., 0], sw2)

    def transition_gaussian(self, theta, x_prev, t):
        a, sw2, _ = self._unpack(theta)
        return np.asarray(a)[..., None] * np.asarray(x_prev), np.broadcast_to(sw2, np.shape(x_prev)[:-1])

    def observation_logpdf(self, theta, x, y_t):
        _, _, se2 = self._unpack(theta)
        return gaussian_logpdf(np.asarray(y_t)[..., 0], np.asarray(x)[..., 0], se2)

    def sample_observation(self, theta, x, rng):
        _, _, se2 = self._unpack(theta)
        xs = np.asarray(x)[..., 0]
        return (xs + np.sqrt(se2) * rng.standard_normal(np.shape(xs)))[..., None]

    def log_transition_bound(self, theta):
        _, sw2, _ = self._unpack(theta)
        return -0.5 * np.log(2.0 * np.pi * np.asarray(sw2, dtype=float))

    # -- exponential family -------------------------------------------------
    def suffstats(self, x, y):
        y = self.check_observations(y)
        T = len(y)
        x = self.check_trajectory(x, T)[..., 0]
        prev, nxt = x[..., :-1], x[..., 1:]
        scale = 1.0 / max(T, 1)
        return np.stack([
            np.sum(nxt * nxt, axis=-1) * scale,
            np.sum(prev * nxt, axis=-1) * scale,
            np.sum(prev * prev, axis=-1) * scale,
            np.sum((y[:, 0] - nxt) ** 2, axis=-1) * scale,
        ], axis=-1)

    def mstep(self, stats):
        stats = np.asarray(stats, dtype=float)
        sxx, scross, sprev, sres = (stats[..., i] for i in range(4))
        if np.any(sprev <= 0):
            raise DegenerateStatsError("lgss: sum of x_{t-1}^2 is zero; theta is not identified")
        a = scross / sprev
        # Least squares may leave (-bound, bound); pull back onto the closure's interior.
        if np.isfinite(self.theta_bound):
            lim = self.theta_bound * (1.0 - 1e-9)
            a = np.clip(a, -lim, lim)
        if not self.learn_variances:
            return a[..., None]
        sw2 = sxx - 2.0 * a * scross + a * a * sprev
        if np.any(sw2 <= 0) or np.any(sres <= 0):
            raise DegenerateStatsError("lgss: zero residual variance in M-step")
        return np.stack([a, sw2, sres], axis=-1)

    def expfam_objective(self, theta, stats):
        a, sw2, se2 = self._unpack(theta)
        stats = np.asarray(stats, dtype=float)
        sxx, scross, sprev, sres = (stats[..., i] for i in range(4))
        quad = sxx - 2.0 * a * scross + a * a * sprev
        return (-0.5 * np.log(2.0 * np.pi * sw2) - 0.5 * quad / sw2
                - 0.5 * np.log(2.0 * np.pi * se2) - 0.5 * sres / se2)
