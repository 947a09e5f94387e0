"""Finite-state hidden Markov model used as an exactly solvable test instance."""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateStatsError
from .base import ExpFamilyModel, as_shape

_ROW_TOL = 1e-12


def _gather_last(table, idx):
    """table[..., idx] with idx broadcast against the leading axes of table."""
    idx = np.asarray(idx)[..., None]
    nd = max(table.ndim, idx.ndim)
    table = table.reshape((1,) * (nd - table.ndim) + table.shape)
    idx = idx.reshape((1,) * (nd - idx.ndim) + idx.shape)
    return np.take_along_axis(table, idx, axis=-1)[..., 0]


def _draw_rows(cum, u):
    """Inverse-CDF draw from unnormalized cumulative rows ``cum[..., K]``."""
    k = np.sum(cum <= (u * cum[..., -1])[..., None], axis=-1)
    return np.minimum(k, cum.shape[-1] - 1)


class DiscreteHmm(ExpFamilyModel):
    """HMM on states {0..n-1} with symbols {0..K-1}.

    States are stored as floats in arrays of shape ``(..., 1)`` so they flow
    through the same particle code as continuous models.  The parameter vector
    is the row-major transition matrix, followed by the emission matrix when
    ``learn_emissions`` is true; otherwise the emission matrix is fixed.

    Statistics: transition counts n_ij / T, then (if learned) emission counts
    m_jk / T over t = 1..T.
    """

    name = "hmm"
    dim_x = 1
    dim_y = 1

    def __init__(self, init_probs, emission=None, n_obs=None, learn_emissions=True):
        self.init_probs = np.asarray(init_probs, dtype=float)
        self.n_states = n = len(self.init_probs)
        _check_stochastic(self.init_probs[None], "initial distribution")
        self.learn_emissions = bool(learn_emissions)
        if learn_emissions:
            if n_obs is None:
                raise ValueError("n_obs is required when emissions are learned")
            self.n_obs = int(n_obs)
            self.emission = None
        else:
            self.emission = np.asarray(emission, dtype=float)
            _check_stochastic(self.emission, "emission matrix")
            self.n_obs = self.emission.shape[1]
        K = self.n_obs
        names = [f"A{i}{j}" for i in range(n) for j in range(n)]
        if learn_emissions:
            names += [f"B{i}{k}" for i in range(n) for k in range(K)]
        self.param_names = tuple(names)
        self.n_stats = n * n + (n * K if learn_emissions else 0)

    def __repr__(self):
        return f"DiscreteHmm(n_states={self.n_states}, n_obs={self.n_obs}, learn_emissions={self.learn_emissions})"

    # -- parameter packing -------------------------------------------------
    def pack(self, transition, emission=None):
        parts = [np.asarray(transition, dtype=float).reshape(-1)]
        if self.learn_emissions:
            parts.append(np.asarray(emission, dtype=float).reshape(-1))
        return self.check_theta(np.concatenate(parts))

    def transition_matrix(self, theta):
        theta = np.asarray(theta, dtype=float)
        n = self.n_states
        return theta[..., : n * n].reshape(theta.shape[:-1] + (n, n))

    def emission_matrix(self, theta):
        if not self.learn_emissions:
            return self.emission
        theta = np.asarray(theta, dtype=float)
        n, K = self.n_states, self.n_obs
        return theta[..., n * n:].reshape(theta.shape[:-1] + (n, K))

    def in_domain(self, theta):
        theta = np.asarray(theta, dtype=float)
        A = self.transition_matrix(theta)
        ok = _rows_ok(A)
        if self.learn_emissions:
            ok &= _rows_ok(self.emission_matrix(theta))
        return ok

    # -- densities ---------------------------------------------------------
    def sample_initial(self, theta, shape, rng):
        cum = np.cumsum(self.init_probs)
        u = rng.random(as_shape(shape))
        return _draw_rows(cum, u).astype(float)[..., None]

    def initial_logpdf(self, theta, x):
        with np.errstate(divide="ignore"):
            return np.log(self.init_probs)[np.asarray(x)[..., 0].astype(int)]

    def sample_transition(self, theta, x_prev, t, rng):
        A = self.transition_matrix(theta)
        prev = np.asarray(x_prev)[..., 0].astype(int)
        cum = np.cumsum(A, axis=-1)
        rows = np.take_along_axis(
            *_align(cum, prev[..., None, None]), axis=-2
        )[..., 0, :]
        u = rng.random(rows.shape[:-1])
        return _draw_rows(rows, u).astype(float)[..., None]

    def transition_logpdf(self, theta, x_prev, x, t):
        n = self.n_states
        flat = np.asarray(x_prev)[..., 0].astype(int) * n + np.asarray(x)[..., 0].astype(int)
        with np.errstate(divide="ignore"):
            logA = np.log(np.asarray(theta, dtype=float)[..., : n * n])
        return _gather_last(logA, flat)

    def observation_logpdf(self, theta, x, y_t):
        K = self.n_obs
        flat = np.asarray(x)[..., 0].astype(int) * K + int(np.asarray(y_t).reshape(-1)[0])
        B = np.asarray(self.emission_matrix(theta), dtype=float)
        with np.errstate(divide="ignore"):
            logB = np.log(B.reshape(B.shape[:-2] + (-1,)))
        return _gather_last(logB, flat)

    def sample_observation(self, theta, x, rng):
        B = np.asarray(self.emission_matrix(theta))
        state = np.asarray(x)[..., 0].astype(int)
        cum = np.cumsum(B, axis=-1)
        rows = np.take_along_axis(*_align(cum, state[..., None, None]), axis=-2)[..., 0, :]
        return _draw_rows(rows, rng.random(rows.shape[:-1])).astype(float)[..., None]

    def log_transition_bound(self, theta):
        return np.zeros(np.shape(theta)[:-1])

    # -- exponential family ------------------------------------------------
    def suffstats(self, x, y):
        y = self.check_observations(y)
        T = len(y)
        s = self.check_trajectory(x, T)[..., 0].astype(int)
        n, K = self.n_states, self.n_obs
        scale = 1.0 / max(T, 1)
        flat = s[..., :-1] * n + s[..., 1:]
        trans = (flat[..., None] == np.arange(n * n)).sum(axis=-2) * scale
        if not self.learn_emissions:
            return trans
        eflat = s[..., 1:] * K + y[:, 0].astype(int)
        emis = (eflat[..., None] == np.arange(n * K)).sum(axis=-2) * scale
        return np.concatenate([trans, emis], axis=-1)

    def mstep(self, stats):
        stats = np.asarray(stats, dtype=float)
        n, K = self.n_states, self.n_obs
        A = stats[..., : n * n].reshape(stats.shape[:-1] + (n, n))
        parts = [_normalize_rows(A, "transition").reshape(stats.shape[:-1] + (n * n,))]
        if self.learn_emissions:
            B = stats[..., n * n:].reshape(stats.shape[:-1] + (n, K))
            parts.append(_normalize_rows(B, "emission").reshape(stats.shape[:-1] + (n * K,)))
        return np.concatenate(parts, axis=-1)

    def expfam_objective(self, theta, stats):
        theta = np.asarray(theta, dtype=float)
        stats = np.asarray(stats, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(stats > 0, stats * np.log(theta[..., : self.n_stats]), 0.0)
        return terms.sum(axis=-1)


def _align(table, idx):
    nd = max(table.ndim, idx.ndim)
    table = table.reshape((1,) * (nd - table.ndim) + table.shape)
    idx = idx.reshape((1,) * (nd - idx.ndim) + idx.shape)
    return table, idx


def _rows_ok(M):
    return (np.all((M >= 0) & (M <= 1), axis=(-1, -2))
            & np.all(np.abs(M.sum(axis=-1) - 1.0) <= _ROW_TOL, axis=-1))


def _check_stochastic(M, what):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or not _rows_ok(M):
        raise ValueError(f"{what} must have probability-vector rows")


def _normalize_rows(C, what):
    tot = C.sum(axis=-1, keepdims=True)
    if np.any(tot <= 0):
        raise DegenerateStatsError(f"hmm: a {what} row has zero expected count")
    return C / tot
