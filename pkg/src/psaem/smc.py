"""Bootstrap particle filter, conditional particle filter with ancestor sampling,
trajectory extraction and forward-filter backward-simulation.

Every routine runs R independent replicates at once: parameters of shape
``(R, p)`` give batched outputs with a leading replicate axis, while a single
parameter vector of shape ``(p,)`` gives unbatched outputs.  A batched call
with R = 1 consumes the random stream exactly like the unbatched call.

Particle indices are 0-based; in the conditional filter the pinned particle is
the last one (index N - 1).  Weights are kept as log-weights throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import WeightCollapseError


@dataclass
class ParticleSystem:
    """Particles, log-weights and ancestors of a filter run.

    Arrays always carry a replicate axis (length 1 for an unbatched run):
    ``particles`` is (T+1, R, N, m), ``logweights`` and ``ancestors`` are
    (T+1, R, N) and ``log_normalizer`` is (R,).  ``ancestors[t, r, i]`` is the
    index at time t-1 of the parent of particle i at time t; ``ancestors[0]``
    is the identity.
    """

    particles: np.ndarray
    logweights: np.ndarray
    ancestors: np.ndarray
    log_normalizer: np.ndarray
    batched: bool = True

    @property
    def T(self) -> int:
        return self.particles.shape[0] - 1

    @property
    def N(self) -> int:
        return self.particles.shape[2]

    @property
    def n_replicates(self) -> int:
        return self.particles.shape[1]

    def normalized_weights(self, t: int) -> np.ndarray:
        lw = self.logweights[t]
        w = np.exp(lw - lw.max(axis=-1, keepdims=True))
        return w / w.sum(axis=-1, keepdims=True)


# -- categorical sampling ---------------------------------------------------

class RowSampler:
    """Inverse-CDF sampler for the rows of an (R, N) array of log-weights.

    All rows are searched in one flattened ``searchsorted`` call by shifting
    row r of the normalized CDF to [2r, 2r + 1].  Building the sampler once and
    drawing repeatedly avoids recomputing the CDFs.
    """

    def __init__(self, logw, t=None, what="importance weights"):
        logw = np.asarray(logw, dtype=float)
        self.R, self.N = logw.shape
        if not (logw < np.inf).all():
            raise ValueError(f"non-finite {what} at t={t}")
        mx = logw.max(axis=1, keepdims=True)
        if np.isneginf(mx).any():
            raise WeightCollapseError(t, what)
        self.w = np.exp(logw - mx)
        cum = np.cumsum(self.w, axis=1)
        cum /= cum[:, -1:]
        if self.R > 1:
            cum += 2.0 * np.arange(self.R)[:, None]
        self.flat = cum.ravel()
        self._last = None

    def draw(self, rows, u):
        """Indices for uniforms ``u`` drawn in the given ``rows`` (same shape)."""
        idx = np.searchsorted(self.flat, u + 2.0 * rows, side="right") - self.N * rows
        over = idx >= self.N
        if over.any():
            # Rounding pushed u past the top of a row; fall back to its last positive entry.
            if self._last is None:
                self._last = self.N - 1 - np.argmax(self.w[:, ::-1] > 0, axis=1)
            idx = np.where(over, self._last[rows], idx)
        return idx

    def sample(self, rng, size, sort=False):
        """``size`` draws per row.  ``sort=True`` returns each row's draws in
        increasing order (a faster search), which is harmless whenever the
        slots receiving the draws are exchangeable, as free particles are."""
        rows = np.broadcast_to(np.arange(self.R)[:, None], (self.R, size))
        u = rng.random((self.R, size))
        if sort:
            u.sort(axis=1)
        return self.draw(rows, u)


def sample_logweights(logw, rng, size, t=None, what="importance weights"):
    """Draw ``size`` indices per row of (R, N) log-weights; returns (R, size)."""
    return RowSampler(logw, t, what).sample(rng, size)


def categorical_draw(weights, rng) -> int:
    """Index j drawn with probability weights[j] / sum(weights)."""
    w = np.asarray(weights, dtype=float).reshape(-1)
    if w.size == 0 or not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and nonnegative")
    if not np.any(w > 0):
        raise ValueError("at least one weight must be strictly positive")
    with np.errstate(divide="ignore"):
        return int(sample_logweights(np.log(w)[None], rng, 1)[0, 0])


# -- batching helpers -------------------------------------------------------

def as_batch(model, theta):
    """Validate theta; return (theta with replicate axis, batched flag)."""
    theta = model.check_theta(theta)
    if theta.ndim == 1:
        return theta[None], False
    if theta.ndim != 2:
        raise ValueError("theta must have shape (p,) or (R, p)")
    return theta, True


def batch_trajectory(model, x, R, T, batched):
    x = model.check_trajectory(x, T)
    if x.ndim == 2:
        return np.broadcast_to(x, (R,) + x.shape)
    if not batched or x.shape[0] != R:
        raise ValueError(f"trajectory batch {x.shape} does not match {R} replicates")
    return x


def trace_ancestry(particles, ancestors, index):
    """Follow ancestor indices back from terminal indices ``index`` (R,)."""
    T1, R, _, m = particles.shape
    rows = np.arange(R)
    out = np.empty((R, T1, m))
    idx = np.asarray(index)
    for t in range(T1 - 1, -1, -1):
        out[:, t] = particles[t, rows, idx]
        idx = ancestors[t, rows, idx]
    return out


# -- forward passes -----------------------------------------------------------

def _forward(model, theta, y, N, rng, x_cond=None, allow_collapse=False):
    """Bootstrap forward pass; pins particle N-1 to ``x_cond`` when given (CPF-AS).

    Returns a ParticleSystem with a replicate axis.  With ``allow_collapse``,
    replicates whose weights vanish get log-normalizer -inf instead of raising.
    """
    T = len(y)
    R = theta.shape[0]
    m = model.dim_x
    th = theta[:, None, :]
    n_free = N if x_cond is None else N - 1
    X = np.empty((T + 1, R, N, m))
    A = np.empty((T + 1, R, N), dtype=np.intp)
    LW = np.zeros((T + 1, R, N))
    A[0] = np.arange(N)
    X[0, :, :n_free] = model.sample_initial(th, (R, n_free), rng)
    if x_cond is not None:
        X[0, :, N - 1] = x_cond[:, 0]
    loglik = np.zeros(R)
    dead = np.zeros(R, dtype=bool)
    for t in range(1, T + 1):
        prev_lw = LW[t - 1]
        a = RowSampler(prev_lw, t).sample(rng, n_free, sort=True)
        xp = np.take_along_axis(X[t - 1], a[..., None], axis=1)
        X[t, :, :n_free] = model.sample_transition(th, xp, t, rng)
        A[t, :, :n_free] = a
        if x_cond is not None:
            las = prev_lw + model.transition_logpdf(th, X[t - 1], x_cond[:, None, t], t)
            A[t, :, N - 1] = sample_logweights(las, rng, 1, t, "ancestor-sampling weights")[:, 0]
            X[t, :, N - 1] = x_cond[:, t]
        lw = model.observation_logpdf(th, X[t], y[t - 1])
        lw = np.broadcast_to(lw, (R, N)).astype(float, copy=True)
        top = lw.max(axis=1)
        if np.isneginf(top).any():
            if not allow_collapse:
                raise WeightCollapseError(t)
            bad = np.isneginf(top)
            dead |= bad
            lw[bad] = 0.0
            top = np.where(bad, 0.0, top)
        LW[t] = lw
        loglik += top + np.log(np.exp(lw - top[:, None]).sum(axis=1) / N)
    loglik[dead] = -np.inf
    return ParticleSystem(X, LW, A, loglik)


def bootstrap_pf(model, theta, y, N, rng, *, allow_collapse=False):
    """Bootstrap particle filter with multinomial resampling at every step.

    Returns ``(ParticleSystem, loglik)`` where ``loglik`` is
    sum_t log(mean_i w_t^i), an unbiased estimate of the likelihood on the
    natural scale.  Weight collapse raises ``WeightCollapseError`` naming t
    unless ``allow_collapse`` is set, in which case loglik is -inf.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    theta, batched = as_batch(model, theta)
    y = model.check_observations(y)
    ps = _forward(model, theta, y, int(N), rng, allow_collapse=allow_collapse)
    ps.batched = batched
    return ps, (ps.log_normalizer if batched else float(ps.log_normalizer[0]))


def extract_trajectory(ps: ParticleSystem, rng):
    """Draw a terminal index proportional to the final weights and trace it back."""
    idx = sample_logweights(ps.logweights[-1], rng, 1, ps.T)[:, 0]
    traj = trace_ancestry(ps.particles, ps.ancestors, idx)
    return traj if ps.batched else traj[0]


def cpfas_kernel(model, theta, x_cond, y, N, rng, *, return_system=False):
    """One draw from the PGAS Markov kernel (conditional PF with ancestor sampling).

    Particles 0..N-2 are free; particle N-1 is pinned to ``x_cond``, and its
    ancestor at time t is drawn with probability proportional to
    w_{t-1}^j p_theta(x_cond[t] | x_{t-1}^j).  The output trajectory is traced
    back from a terminal index drawn proportional to w_T.
    """
    if N < 2:
        raise ValueError("the conditional particle filter needs N >= 2")
    theta, batched = as_batch(model, theta)
    y = model.check_observations(y)
    xc = batch_trajectory(model, x_cond, theta.shape[0], len(y), batched)
    ps = _forward(model, theta, y, int(N), rng, x_cond=xc)
    ps.batched = batched
    traj = extract_trajectory(ps, rng)
    return (traj, ps) if return_system else traj


# -- backward simulation -------------------------------------------------------

def ffbsi(ps: ParticleSystem, model, theta, n_paths, rng, *, method="exact", max_rounds=100):
    """Forward-filter backward-simulation smoother.

    Draws ``n_paths`` trajectories; at each t the backward index is sampled
    with probability proportional to w_t^i p_theta(x*_{t+1} | x_t^i).
    ``method="exact"`` evaluates all N backward weights per path (O(N) each);
    ``method="rejection"`` proposes from w_t and accepts with probability
    p(x*_{t+1} | x_t^i) / bound, which samples the same backward kernel and
    costs O(1) expected per path.  Paths still pending after ``max_rounds``
    rejection rounds are completed with the exact draw.

    Returns (n_paths, T+1, m), or (R, n_paths, T+1, m) for batched systems.
    """
    if method not in ("exact", "rejection"):
        raise ValueError(f"unknown FFBSi method {method!r}")
    theta = model.check_theta(theta)
    theta = theta[None] if theta.ndim == 1 else theta
    X, LW = ps.particles, ps.logweights
    T, R, N, m = ps.T, ps.n_replicates, ps.N, X.shape[-1]
    if theta.shape[0] != R:
        theta = np.broadcast_to(theta, (R, theta.shape[-1]))
    P = int(n_paths)
    rows = np.arange(R)[:, None]
    out = np.empty((R, P, T + 1, m))
    J = sample_logweights(LW[T], rng, P, T)
    out[:, :, T] = X[T][rows, J]
    bound = None
    if method == "rejection":
        bound = np.broadcast_to(np.asarray(model.log_transition_bound(theta), dtype=float), (R,))
    for t in range(T - 1, -1, -1):
        xs = out[:, :, t + 1]
        if method == "exact":
            J = _backward_exact(model, theta, X[t], LW[t], xs, t, rng)
        else:
            J = _backward_rejection(model, theta, X[t], LW[t], xs, t, rng, bound, max_rounds)
        out[:, :, t] = X[t][rows, J]
    return out if ps.batched else out[0]


def _backward_exact(model, theta, Xt, LWt, xs, t, rng, subset=None):
    R, P = xs.shape[:2]
    N = Xt.shape[1]
    th = theta[:, None, None, :]
    lb = LWt[:, None, :] + model.transition_logpdf(th, Xt[:, None, :, :], xs[:, :, None, :], t + 1)
    lb = np.broadcast_to(lb, (R, P, N)).reshape(R * P, N)
    return sample_logweights(lb, rng, 1, t, "backward weights")[:, 0].reshape(R, P)


def _backward_rejection(model, theta, Xt, LWt, xs, t, rng, bound, max_rounds):
    R, P, _ = xs.shape
    rows = np.arange(R)[:, None]
    sampler = RowSampler(LWt, t)
    J = sampler.sample(rng, P)
    logp = model.transition_logpdf(theta[:, None, :], Xt[rows, J], xs, t + 1)
    ok = np.log(rng.random((R, P))) < logp - bound[:, None]
    r_idx, p_idx = np.nonzero(~ok)
    rounds = 1
    while r_idx.size and rounds < max_rounds:
        cand = sampler.draw(r_idx, rng.random(r_idx.size))
        lp = model.transition_logpdf(theta[r_idx], Xt[r_idx, cand], xs[r_idx, p_idx], t + 1)
        acc = np.log(rng.random(r_idx.size)) < lp - bound[r_idx]
        J[r_idx[acc], p_idx[acc]] = cand[acc]
        r_idx, p_idx = r_idx[~acc], p_idx[~acc]
        rounds += 1
    if r_idx.size:
        lb = LWt[r_idx] + model.transition_logpdf(theta[r_idx, None, :], Xt[r_idx], xs[r_idx, p_idx][:, None, :], t + 1)
        J[r_idx, p_idx] = sample_logweights(lb, rng, 1, t, "backward weights")[:, 0]
    return J
