"""Maximal couplings and the coupled conditional particle filter.

Two CPF-AS kernels at theta and theta~ are run side by side with every random
choice drawn from a maximal coupling: resampling indices, propagations,
ancestor-sampling indices and the terminal index.  The fraction of runs whose
two outputs coincide estimates the coupling probability, which decays at most
linearly in |theta - theta~|.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .smc import as_batch, batch_trajectory, sample_logweights, trace_ancestry


@dataclass
class CoupledDraw:
    left: object
    right: object
    identical: bool


# -- discrete ------------------------------------------------------------------

def _check_probs(p):
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.size == 0 or not np.all(np.isfinite(p)) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("expected a probability vector")
    return p


def coupled_categorical(logp, logq, rng, size=1):
    """Maximally coupled index pairs for each row of (R, N) log-weights.

    Returns (i, j, overlap) with i, j of shape (R, size) and overlap the exact
    coupling probability sum_k min(p_k, q_k) per row.
    """
    logp = np.asarray(logp, dtype=float)
    logq = np.asarray(logq, dtype=float)
    p = np.exp(logp - logp.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    q = np.exp(logq - logq.max(axis=1, keepdims=True))
    q /= q.sum(axis=1, keepdims=True)
    m = np.minimum(p, q)
    overlap = m.sum(axis=1)
    R = len(p)
    common = np.zeros((R, size), dtype=np.intp)
    i = np.zeros((R, size), dtype=np.intp)
    j = np.zeros((R, size), dtype=np.intp)
    with np.errstate(divide="ignore"):
        has_common = overlap > 0
        if has_common.any():
            common[has_common] = sample_logweights(np.log(m[has_common]), rng, size)
        rp, rq = p - m, q - m
        has_res = (rp.sum(axis=1) > 0) & (rq.sum(axis=1) > 0)
        if has_res.any():
            i[has_res] = sample_logweights(np.log(rp[has_res]), rng, size)
            j[has_res] = sample_logweights(np.log(rq[has_res]), rng, size)
    same = rng.random((R, size)) < overlap[:, None]
    i = np.where(same, common, i)
    j = np.where(same, common, j)
    return i, j, overlap


def maximal_coupling_discrete(p, q, rng) -> CoupledDraw:
    """Draw (I, J) with I ~ p, J ~ q and P(I = J) = sum_k min(p_k, q_k)."""
    p, q = _check_probs(p), _check_probs(q)
    if p.shape != q.shape:
        raise ValueError("p and q must have equal length")
    with np.errstate(divide="ignore"):
        i, j, _ = coupled_categorical(np.log(p)[None], np.log(q)[None], rng)
    i, j = int(i[0, 0]), int(j[0, 0])
    return CoupledDraw(i, j, i == j)


# -- continuous ----------------------------------------------------------------

def maximal_coupling_continuous(logpdf_p, sampler_p, logpdf_q, sampler_q, rng, max_tries=100_000):
    """Maximal coupling of two densities by the two-stage rejection construction.

    Draw X ~ P; with probability min(1, q(X)/p(X)) set Y = X.  Otherwise draw
    Y* ~ Q until U q(Y*) > p(Y*), which samples the residual of Q.
    """
    x = sampler_p(rng)
    lp = float(logpdf_p(x))
    if not np.isfinite(lp):
        raise ValueError("logpdf_p is not finite at its own sample")
    lq = float(logpdf_q(x))
    if np.isnan(lq):
        raise ValueError("logpdf_q returned NaN")
    if np.log(rng.random()) + lp <= lq:
        return CoupledDraw(x, x, True)
    for _ in range(max_tries):
        ys = sampler_q(rng)
        lq_y = float(logpdf_q(ys))
        if not np.isfinite(lq_y):
            raise ValueError("logpdf_q is not finite at its own sample")
        if np.log(rng.random()) + lq_y > float(logpdf_p(ys)):
            return CoupledDraw(x, ys, False)
    raise RuntimeError("residual rejection sampler did not terminate")


def _coupled_states(sample_p, logpdf_p, sample_q, logpdf_q, n, rng, max_rounds=100_000):
    """Batched rejection coupling over n independent pairs.

    ``sample_p(idx)`` draws states for the pairs listed in ``idx`` and
    ``logpdf_p(idx, x)`` evaluates their densities; likewise for q.
    Returns (X, Y, same).
    """
    idx = np.arange(n)
    X = sample_p(idx)
    lp = logpdf_p(idx, X)
    if not np.all(np.isfinite(lp)):
        raise ValueError("non-finite density at a proposal's own sample")
    same = np.log(rng.random(n)) + lp <= logpdf_q(idx, X)
    Y = X.copy()
    pending = idx[~same]
    rounds = 0
    while pending.size:
        ys = sample_q(pending)
        ok = np.log(rng.random(pending.size)) + logpdf_q(pending, ys) > logpdf_p(pending, ys)
        Y[pending[ok]] = ys[ok]
        pending = pending[~ok]
        rounds += 1
        if rounds > max_rounds:
            raise RuntimeError("residual rejection sampler did not terminate")
    return X, Y, same


def _reflection_coupled_gaussians(mu1, mu2, var, rng):
    """Maximal coupling of N(mu1, var I) and N(mu2, var I), row by row.

    X = mu1 + sd * xi.  Y = X with probability min(1, phi(xi + z) / phi(xi)),
    z = (mu1 - mu2) / sd; otherwise Y is mu2 plus sd times xi reflected in
    the hyperplane orthogonal to z.  Constant cost however close the means are.
    """
    sd = np.sqrt(var)[:, None]
    z = (mu1 - mu2) / sd
    xi = rng.standard_normal(mu1.shape)
    X = mu1 + sd * xi
    log_ratio = -0.5 * np.sum((xi + z) ** 2 - xi ** 2, axis=1)
    same = np.log(rng.random(len(X))) <= log_ratio
    norm = np.linalg.norm(z, axis=1, keepdims=True)
    e = np.divide(z, norm, out=np.zeros_like(z), where=norm > 0)
    reflected = mu2 + sd * (xi - 2 * np.sum(e * xi, axis=1, keepdims=True) * e)
    Y = np.where(same[:, None], X, reflected)
    return X, Y, same


def _coupled_transitions(model, th1, th2, f1, f2, t, rng):
    """Maximally coupled propagation of n particle pairs (rows of f1, f2)."""
    n = len(f1)
    g1 = model.transition_gaussian(th1, f1, t)
    g2 = model.transition_gaussian(th2, f2, t) if g1 is not None else None
    refl = np.zeros(n, dtype=bool) if g2 is None else (g1[1] == g2[1])
    X = np.empty_like(f1)
    Y = np.empty_like(f2)
    same = np.empty(n, dtype=bool)
    if refl.any():
        X[refl], Y[refl], same[refl] = _reflection_coupled_gaussians(g1[0][refl], g2[0][refl],
                                                                      g1[1][refl], rng)
    rest = np.flatnonzero(~refl)
    if rest.size:
        h1, h2, r1, r2 = th1[rest], th2[rest], f1[rest], f2[rest]
        X[rest], Y[rest], same[rest] = _coupled_states(
            lambda i: model.sample_transition(h1[i], r1[i], t, rng),
            lambda i, x: model.transition_logpdf(h1[i], r1[i], x, t),
            lambda i: model.sample_transition(h2[i], r2[i], t, rng),
            lambda i, x: model.transition_logpdf(h2[i], r2[i], x, t),
            rest.size, rng)
    return X, Y, same


# -- coupled CPF-AS --------------------------------------------------------------

@dataclass
class CoupledRun:
    left: np.ndarray  # (R, T+1, m)
    right: np.ndarray
    identical: np.ndarray  # (R,) output trajectories equal
    all_stages: np.ndarray  # (R,) every particle, ancestor and the terminal index coupled
    resampling_rate: np.ndarray  # (T, R) exact sum-min of the resampling weights
    ancestor_rate: np.ndarray  # (T, R) exact sum-min of the ancestor-sampling weights
    propagation_rate: np.ndarray  # (T, R) fraction of free particles propagated identically
    terminal_rate: np.ndarray  # (R,) exact sum-min of the final weights


def _coupled_cpfas_batch(model, th1, th2, xc, y, N, rng, independent=False):
    T = len(y)
    R, m = th1.shape[0], model.dim_x
    nf = N - 1
    X1 = np.empty((T + 1, R, N, m))
    X2 = np.empty_like(X1)
    A1 = np.empty((T + 1, R, N), dtype=np.intp)
    A2 = np.empty_like(A1)
    A1[0] = A2[0] = np.arange(N)
    LW1 = np.zeros((T + 1, R, N))
    LW2 = np.zeros_like(LW1)
    t1, t2 = th1[:, None, :], th2[:, None, :]
    flat1 = np.repeat(th1, nf, axis=0)
    flat2 = np.repeat(th2, nf, axis=0)
    all_ok = np.ones(R, dtype=bool)
    res_rate = np.ones((T, R))
    anc_rate = np.ones((T, R))
    prop_rate = np.ones((T, R))

    if independent:
        X1[0, :, :nf] = model.sample_initial(t1, (R, nf), rng)
        X2[0, :, :nf] = model.sample_initial(t2, (R, nf), rng)
    elif model.initial_depends_on_theta:
        x0a, x0b, _ = _coupled_states(
            lambda i: _init_rows(model, flat1[i], rng),
            lambda i, x: model.initial_logpdf(flat1[i], x),
            lambda i: _init_rows(model, flat2[i], rng),
            lambda i, x: model.initial_logpdf(flat2[i], x),
            R * nf, rng)
        X1[0, :, :nf] = x0a.reshape(R, nf, m)
        X2[0, :, :nf] = x0b.reshape(R, nf, m)
    else:
        X1[0, :, :nf] = X2[0, :, :nf] = model.sample_initial(t1, (R, nf), rng)
    X1[0, :, N - 1] = X2[0, :, N - 1] = xc[:, 0]
    all_ok &= np.all(X1[0] == X2[0], axis=(1, 2))

    for t in range(1, T + 1):
        # resampling
        if independent:
            a1 = sample_logweights(LW1[t - 1], rng, nf, t)
            a2 = sample_logweights(LW2[t - 1], rng, nf, t)
        else:
            a1, a2, res_rate[t - 1] = coupled_categorical(LW1[t - 1], LW2[t - 1], rng, nf)
        xp1 = np.take_along_axis(X1[t - 1], a1[..., None], axis=1)
        xp2 = np.take_along_axis(X2[t - 1], a2[..., None], axis=1)
        # propagation
        if independent:
            X1[t, :, :nf] = model.sample_transition(t1, xp1, t, rng)
            X2[t, :, :nf] = model.sample_transition(t2, xp2, t, rng)
        else:
            f1, f2 = xp1.reshape(R * nf, m), xp2.reshape(R * nf, m)
            n1, n2, same = _coupled_transitions(model, flat1, flat2, f1, f2, t, rng)
            X1[t, :, :nf] = n1.reshape(R, nf, m)
            X2[t, :, :nf] = n2.reshape(R, nf, m)
            prop_rate[t - 1] = same.reshape(R, nf).mean(axis=1)
        A1[t, :, :nf], A2[t, :, :nf] = a1, a2
        # ancestor sampling for the conditional particle
        las1 = LW1[t - 1] + model.transition_logpdf(t1, X1[t - 1], xc[:, None, t], t)
        las2 = LW2[t - 1] + model.transition_logpdf(t2, X2[t - 1], xc[:, None, t], t)
        if independent:
            A1[t, :, N - 1] = sample_logweights(las1, rng, 1, t, "ancestor-sampling weights")[:, 0]
            A2[t, :, N - 1] = sample_logweights(las2, rng, 1, t, "ancestor-sampling weights")[:, 0]
        else:
            b1, b2, anc_rate[t - 1] = coupled_categorical(las1, las2, rng)
            A1[t, :, N - 1], A2[t, :, N - 1] = b1[:, 0], b2[:, 0]
        X1[t, :, N - 1] = X2[t, :, N - 1] = xc[:, t]
        LW1[t] = np.broadcast_to(model.observation_logpdf(t1, X1[t], y[t - 1]), (R, N))
        LW2[t] = np.broadcast_to(model.observation_logpdf(t2, X2[t], y[t - 1]), (R, N))
        all_ok &= np.all(A1[t] == A2[t], axis=1) & np.all(X1[t] == X2[t], axis=(1, 2))

    if independent:
        J1 = sample_logweights(LW1[T], rng, 1, T)[:, 0]
        J2 = sample_logweights(LW2[T], rng, 1, T)[:, 0]
        term = np.full(R, np.nan)
    else:
        j1, j2, term = coupled_categorical(LW1[T], LW2[T], rng)
        J1, J2 = j1[:, 0], j2[:, 0]
    all_ok &= J1 == J2
    left = trace_ancestry(X1, A1, J1)
    right = trace_ancestry(X2, A2, J2)
    identical = np.all(left == right, axis=(1, 2))
    return CoupledRun(left, right, identical, all_ok & identical, res_rate, anc_rate, prop_rate, term)


def _init_rows(model, theta_rows, rng):
    return model.sample_initial(theta_rows, (len(theta_rows),), rng)


def coupled_cpfas(model, theta, theta_tilde, x_cond, y, N, rng, *, independent=False, details=False):
    """Coupled CPF-AS kernels at theta and theta_tilde sharing the conditional path.

    Each marginal output is a draw from the single-filter kernel at its own
    parameter.  ``independent=True`` replaces every coupling by independent
    draws (for testing the marginals in isolation).  Batched thetas (R, p)
    run R coupled pairs.  Returns (left, right), or the full ``CoupledRun``
    with ``details=True``.
    """
    if N < 2:
        raise ValueError("the conditional particle filter needs N >= 2")
    th1, batched = as_batch(model, theta)
    th2, batched2 = as_batch(model, theta_tilde)
    R = max(th1.shape[0], th2.shape[0])
    th1 = np.broadcast_to(th1, (R, th1.shape[1]))
    th2 = np.broadcast_to(th2, (R, th2.shape[1]))
    batched = batched or batched2
    y = model.check_observations(y)
    xc = batch_trajectory(model, x_cond, R, len(y), batched)
    run = _coupled_cpfas_batch(model, th1, th2, xc, y, int(N), rng, independent)
    if details:
        return run
    if batched:
        return run.left, run.right
    return run.left[0], run.right[0]


@dataclass
class CouplingReport:
    theta: np.ndarray
    theta_tilde: np.ndarray
    N: int
    reps: int
    identical_fraction: float
    identical_se: float
    all_stages_fraction: float
    all_stages_se: float
    resampling_rate: np.ndarray = field(repr=False)  # (T,) mean exact sum-min per step
    ancestor_rate: np.ndarray = field(repr=False)
    propagation_rate: np.ndarray = field(repr=False)
    terminal_rate: float = 1.0

    @property
    def gap(self) -> float:
        return float(np.linalg.norm(np.asarray(self.theta) - np.asarray(self.theta_tilde)))

    def as_row(self) -> dict:
        def mean_or_one(a):
            return float(np.mean(a)) if np.size(a) else 1.0
        row = {f"theta_{i}": float(v) for i, v in enumerate(np.ravel(self.theta))}
        row.update({f"theta_tilde_{i}": float(v) for i, v in enumerate(np.ravel(self.theta_tilde))})
        row.update(gap=self.gap, N=self.N, reps=self.reps,
                   identical_fraction=self.identical_fraction, identical_se=self.identical_se,
                   all_stages_fraction=self.all_stages_fraction, all_stages_se=self.all_stages_se,
                   resampling_rate=mean_or_one(self.resampling_rate),
                   ancestor_rate=mean_or_one(self.ancestor_rate),
                   propagation_rate=mean_or_one(self.propagation_rate),
                   terminal_rate=self.terminal_rate)
        return row


def coupling_probability(model, theta, theta_tilde, x_cond, y, N, reps, rng, chunk=20_000) -> CouplingReport:
    """Monte Carlo estimate of P(coupled CPF-AS outputs are identical).

    Also reports the stronger all-stages event (every particle, ancestor and
    the terminal index coupled) and per-step mean coupling rates.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    theta = model.check_theta(theta)
    theta_tilde = model.check_theta(theta_tilde)
    y = model.check_observations(y)
    T = len(y)
    n_id = n_all = 0
    res = np.zeros(T)
    anc = np.zeros(T)
    prop = np.zeros(T)
    term = 0.0
    done = 0
    while done < reps:
        r = min(chunk, reps - done)
        run = _coupled_cpfas_batch(model, np.broadcast_to(theta, (r, theta.size)),
                                   np.broadcast_to(theta_tilde, (r, theta_tilde.size)),
                                   batch_trajectory(model, x_cond, r, T, True), y, int(N), rng)
        n_id += int(run.identical.sum())
        n_all += int(run.all_stages.sum())
        res += run.resampling_rate.sum(axis=1)
        anc += run.ancestor_rate.sum(axis=1)
        prop += run.propagation_rate.sum(axis=1)
        term += float(run.terminal_rate.sum())
        done += r
    f_id, f_all = n_id / reps, n_all / reps
    return CouplingReport(theta, theta_tilde, int(N), int(reps),
                          f_id, float(np.sqrt(f_id * (1 - f_id) / reps)),
                          f_all, float(np.sqrt(f_all * (1 - f_all) / reps)),
                          res / reps, anc / reps, prop / reps, term / reps)


def fit_coupling_slope(gaps, fractions, ses):
    """Weighted least-squares fit of 1 - fraction = b + s * gap.

    Returns (slope, intercept, slope_se, intercept_se).  Points with zero
    standard error get the smallest positive one, so a gap-0 point anchors
    the fit without dividing by zero.
    """
    g = np.asarray(gaps, dtype=float)
    z = 1.0 - np.asarray(fractions, dtype=float)
    se = np.asarray(ses, dtype=float)
    pos = se[se > 0]
    floor = pos.min() if pos.size else 1.0
    w = 1.0 / np.maximum(se, floor) ** 2
    X = np.column_stack([np.ones_like(g), g])
    cov = np.linalg.inv(X.T @ (w[:, None] * X))
    b, s = cov @ (X.T @ (w * z))
    return float(s), float(b), float(np.sqrt(cov[1, 1])), float(np.sqrt(cov[0, 0]))
