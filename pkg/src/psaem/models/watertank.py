"""Cascaded water tanks.

Upper level x^u and lower level x^l, pump voltage u_t, sample period Ts:

    x^u_{t+1} = h^u + Ts(-k1 sqrt(h^u) - k2 h^u + k5 u_t) + w^u_t
    x^l_{t+1} = h^l + Ts( k1 sqrt(h^u) + k2 h^u - k3 sqrt(h^l) - k4 h^l
                          + k6 max(x^u_t - 10, 0)) + w^l_t
    y_t       = min(10, x^l_t) + e_t

with h = min(10, x).  The transition is a(x) + k^T b(x, u) + w, which is
linear in k = (k1..k6) given the basis functions, so the M-step is a
regularized least-squares solve.

Time convention: the transition into x_t uses ``u[t-1]`` and ``y[t-1]``
observes x_t, so a dataset with rows (u_i, y_i), i = 0..T-1, pairs each
input with the level it drives.
"""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateStatsError
from .base import ExpFamilyModel, as_shape, gaussian_logpdf

TANK_HEIGHT = 10.0
N_GAINS = 6
# k4 and k6 get a weak N(0, gain_prior_var) penalty; the k6 basis vanishes when
# no trajectory overflows, which would leave the normal equations singular.
PENALIZED_GAINS = (3, 5)

# Layout of the statistic vector.
_T, _RR = 0, 1
_BR = slice(2, 2 + N_GAINS)
_BB = slice(2 + N_GAINS, 2 + N_GAINS + N_GAINS * N_GAINS)
_RES_Y = 2 + N_GAINS + N_GAINS * N_GAINS
_X0U = _RES_Y + 1


# Ad-hoc starting point for learning: k1..k4 = 0.05, k5 = k6 = 0, both variances 0.1, xi0 = 6.
INITIAL_GUESS = (0.05, 0.05, 0.05, 0.05, 0.0, 0.0, 0.1, 0.1, 6.0)

# Parameters used to generate synthetic stand-in data when the benchmark files are absent.
SYNTHETIC_TRUTH = (0.06, 0.004, 0.045, 0.006, 0.03, 0.02, 0.01, 0.002, 5.0)


def synthetic_inputs(T, rng, low=1.0, high=9.0, hold=(10, 50)):
    """Piecewise-constant pump voltages with random levels and hold times."""
    u = np.empty(T)
    i = 0
    while i < T:
        n = int(rng.integers(hold[0], hold[1] + 1))
        u[i:i + n] = rng.uniform(low, high)
        i += n
    return u


class WaterTank(ExpFamilyModel):
    """Water-tank model driven by a fixed input sequence ``u``.

    Parameters are ``(k1, ..., k6, sigma_e2, sigma_w2, xi0)``.  The upper
    initial level is N(xi0, upper_init_var); the lower one is
    N(lower_init_mean, lower_init_var) and is not learned.  ``gain_prior_var``
    is the variance of the Gaussian penalty on k4 and k6 used in the M-step.
    ``var_floor`` bounds variance estimates away from zero.

    Statistics (divided by T where noted):
        T; mean |r_t|^2; mean B_t r_t (6); mean B_t B_t^T (6x6);
        mean (y_t - min(10, x^l_t))^2; x^u_0
    where r_t = x_t - a(x_{t-1}) and B_t = b(x_{t-1}, u_{t-1}) (6x2).
    """

    name = "watertank"
    dim_x = 2
    dim_y = 1
    param_names = ("k1", "k2", "k3", "k4", "k5", "k6", "sigma_e2", "sigma_w2", "xi0")
    initial_depends_on_theta = True
    n_stats = _X0U + 1

    def __init__(self, u, Ts=4.0, upper_init_var=0.1, lower_init_mean=5.0,
                 lower_init_var=1.0, gain_prior_var=1e3, var_floor=1e-12):
        self.u = np.asarray(u, dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.u)):
            raise ValueError("input sequence contains non-finite values")
        self.Ts = float(Ts)
        self.upper_init_var = float(upper_init_var)
        self.lower_init_mean = float(lower_init_mean)
        self.lower_init_var = float(lower_init_var)
        self.gain_prior_var = float(gain_prior_var)
        self.var_floor = float(var_floor)

    def __repr__(self):
        return f"WaterTank(T={len(self.u)}, Ts={self.Ts})"

    def in_domain(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.all(np.isfinite(theta), axis=-1) & (theta[..., 6] > 0) & (theta[..., 7] > 0)

    def _input(self, t):
        if not 1 <= t <= len(self.u):
            raise IndexError(f"no input for transition into t={t} (have {len(self.u)} inputs)")
        return self.u[t - 1]

    # -- basis functions ---------------------------------------------------
    @staticmethod
    def drift(x):
        return np.minimum(TANK_HEIGHT, x)

    def basis(self, x, u_t):
        """b(x, u) with shape (..., 6, 2)."""
        x = np.asarray(x, dtype=float)
        hu = np.minimum(TANK_HEIGHT, x[..., 0])
        hl = np.minimum(TANK_HEIGHT, x[..., 1])
        # Levels can dip below zero under process noise; the root is taken of the clamped level.
        su = np.sqrt(np.maximum(hu, 0.0))
        sl = np.sqrt(np.maximum(hl, 0.0))
        over = np.maximum(x[..., 0] - TANK_HEIGHT, 0.0)
        zero = np.zeros_like(hu)
        uu = np.broadcast_to(np.asarray(u_t, dtype=float), hu.shape)
        up = np.stack([-su, -hu, zero, zero, uu, zero], axis=-1)
        lo = np.stack([su, hu, -sl, -hl, zero, over], axis=-1)
        return self.Ts * np.stack([up, lo], axis=-1)

    def _mean(self, theta, x_prev, t):
        theta = np.asarray(theta, dtype=float)
        B = self.basis(x_prev, self._input(t))
        return self.drift(np.asarray(x_prev, dtype=float)) + np.einsum("...k,...kj->...j", theta[..., :N_GAINS], B)

    # -- densities ---------------------------------------------------------
    def sample_initial(self, theta, shape, rng):
        shape = as_shape(shape)
        xi0 = np.asarray(theta, dtype=float)[..., 8]
        z = rng.standard_normal(shape + (2,))
        out = np.empty(np.broadcast_shapes(shape, np.shape(xi0)) + (2,))
        out[..., 0] = xi0 + np.sqrt(self.upper_init_var) * z[..., 0]
        out[..., 1] = self.lower_init_mean + np.sqrt(self.lower_init_var) * z[..., 1]
        return out

    def initial_logpdf(self, theta, x):
        x = np.asarray(x, dtype=float)
        xi0 = np.asarray(theta, dtype=float)[..., 8]
        return (gaussian_logpdf(x[..., 0], xi0, self.upper_init_var)
                + gaussian_logpdf(x[..., 1], self.lower_init_mean, self.lower_init_var))

    def sample_transition(self, theta, x_prev, t, rng):
        mean = self._mean(theta, x_prev, t)
        sw2 = np.asarray(theta, dtype=float)[..., 7, None]
        return mean + np.sqrt(sw2) * rng.standard_normal(mean.shape)

    def transition_logpdf(self, theta, x_prev, x, t):
        mean = self._mean(theta, x_prev, t)
        sw2 = np.asarray(theta, dtype=float)[..., 7]
        d2 = np.sum((np.asarray(x, dtype=float) - mean) ** 2, axis=-1)
        return -np.log(2.0 * np.pi * sw2) - 0.5 * d2 / sw2

    def transition_gaussian(self, theta, x_prev, t):
        mean = self._mean(theta, x_prev, t)
        return mean, np.broadcast_to(np.asarray(theta, dtype=float)[..., 7], mean.shape[:-1])

    def observation_logpdf(self, theta, x, y_t):
        se2 = np.asarray(theta, dtype=float)[..., 6]
        level = np.minimum(TANK_HEIGHT, np.asarray(x, dtype=float)[..., 1])
        return gaussian_logpdf(np.asarray(y_t, dtype=float)[..., 0], level, se2)

    def sample_observation(self, theta, x, rng):
        se2 = np.asarray(theta, dtype=float)[..., 6]
        level = np.minimum(TANK_HEIGHT, np.asarray(x, dtype=float)[..., 1])
        return (level + np.sqrt(se2) * rng.standard_normal(np.shape(level)))[..., None]

    def log_transition_bound(self, theta):
        return -np.log(2.0 * np.pi * np.asarray(theta, dtype=float)[..., 7])

    def simulate_noise_free(self, theta, x0=None):
        """Deterministic simulation (all noise set to zero); returns (x, y_hat)."""
        theta = np.asarray(theta, dtype=float)
        T = len(self.u)
        x = np.empty((T + 1, 2))
        x[0] = (theta[8], self.lower_init_mean) if x0 is None else x0
        for t in range(1, T + 1):
            x[t] = self._mean(theta, x[t - 1], t)
        return x, np.minimum(TANK_HEIGHT, x[1:, 1])

    # -- exponential family ------------------------------------------------
    def suffstats(self, x, y):
        y = self.check_observations(y)
        T = len(y)
        if T > len(self.u):
            raise ValueError(f"{T} observations but only {len(self.u)} inputs")
        x = self.check_trajectory(x, T)
        prev, nxt = x[..., :-1, :], x[..., 1:, :]
        B = self.basis(prev, self.u[:T])  # (..., T, 6, 2)
        r = nxt - self.drift(prev)
        scale = 1.0 / max(T, 1)
        lead = x.shape[:-2]
        out = np.empty(lead + (self.n_stats,))
        out[..., _T] = T
        out[..., _RR] = np.sum(r * r, axis=(-1, -2)) * scale
        out[..., _BR] = np.einsum("...tkj,...tj->...k", B, r) * scale
        out[..., _BB] = (np.einsum("...tkj,...tlj->...kl", B, B) * scale).reshape(lead + (-1,))
        out[..., _RES_Y] = np.sum((y[:, 0] - np.minimum(TANK_HEIGHT, nxt[..., 1])) ** 2, axis=-1) * scale
        out[..., _X0U] = x[..., 0, 0]
        return out

    def _penalty_weight(self, T):
        w = np.zeros(N_GAINS)
        w[list(PENALIZED_GAINS)] = 1.0 / (self.gain_prior_var * T)
        return w

    def mstep(self, stats, tol=1e-13, max_iter=200):
        stats = np.asarray(stats, dtype=float)
        lead = stats.shape[:-1]
        flat = stats.reshape(-1, self.n_stats)
        out = np.empty((flat.shape[0], self.n_params))
        for i, s in enumerate(flat):
            out[i] = self._mstep_one(s, tol, max_iter)
        return out.reshape(lead + (self.n_params,))

    def _mstep_one(self, s, tol, max_iter):
        T = s[_T]
        if not T >= 1:
            raise DegenerateStatsError("watertank: statistics carry no time steps")
        rr, Br = s[_RR], s[_BR]
        BB = s[_BB].reshape(N_GAINS, N_GAINS)
        pen = self._penalty_weight(T)
        # Coordinate ascent between gains and process variance; the penalty couples them.
        sw2 = max(rr / 2.0, self.var_floor)
        for _ in range(max_iter):
            M = BB + np.diag(sw2 * pen)
            try:
                k = np.linalg.solve(M, Br)
            except np.linalg.LinAlgError as exc:
                raise DegenerateStatsError(f"watertank: singular normal equations ({exc})") from exc
            if np.linalg.cond(M) > 1e14:
                raise DegenerateStatsError("watertank: ill-conditioned normal equations")
            quad = rr - 2.0 * k @ Br + k @ BB @ k
            new = max(quad / 2.0, self.var_floor)
            if abs(new - sw2) <= tol * max(new, 1e-300):
                sw2 = new
                break
            sw2 = new
        M = BB + np.diag(sw2 * pen)
        k = np.linalg.solve(M, Br)
        se2 = max(s[_RES_Y], self.var_floor)
        return np.concatenate([k, [se2, sw2, s[_X0U]]])

    def expfam_objective(self, theta, stats):
        theta = np.asarray(theta, dtype=float)
        s = np.asarray(stats, dtype=float)
        k = theta[..., :N_GAINS]
        se2, sw2, xi0 = theta[..., 6], theta[..., 7], theta[..., 8]
        T = s[..., _T]
        BB = s[..., _BB].reshape(s.shape[:-1] + (N_GAINS, N_GAINS))
        quad = (s[..., _RR] - 2.0 * np.sum(k * s[..., _BR], axis=-1)
                + np.einsum("...k,...kl,...l->...", k, BB, k))
        trans = -np.log(2.0 * np.pi * sw2) - 0.5 * quad / sw2
        obs = -0.5 * np.log(2.0 * np.pi * se2) - 0.5 * s[..., _RES_Y] / se2
        init = (xi0 * s[..., _X0U] - 0.5 * xi0 * xi0) / self.upper_init_var / T
        return trans + obs + init

    def mstep_objective(self, theta, stats):
        theta = np.asarray(theta, dtype=float)
        T = np.asarray(stats, dtype=float)[..., _T]
        k = theta[..., list(PENALIZED_GAINS)]
        return self.expfam_objective(theta, stats) - 0.5 * np.sum(k * k, axis=-1) / self.gain_prior_var / T


def load_watertank_csv(path):
    """Read a two-column (u, y) CSV; a non-numeric first row is treated as a header."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            fields = [f.strip() for f in line.replace(";", ",").split(",")]
            try:
                vals = [float(f) for f in fields[:2]]
            except ValueError:
                if lineno == 0 and not rows:
                    continue
                raise ValueError(f"{path}:{lineno + 1}: non-numeric row {line!r}") from None
            if len(vals) != 2:
                raise ValueError(f"{path}:{lineno + 1}: expected two columns (u, y)")
            rows.append(vals)
    data = np.asarray(rows, dtype=float).reshape(-1, 2)
    return data[:, 0], data[:, 1:2]


def simulation_rmse(model, theta, y):
    """RMSE of the noise-free simulated output against measured ``y``."""
    _, yhat = model.simulate_noise_free(theta)
    y = np.asarray(y, dtype=float).reshape(-1)
    return float(np.sqrt(np.mean((yhat[: len(y)] - y) ** 2)))
