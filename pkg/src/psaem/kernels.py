"""Markov-kernel drivers: PGAS chains, Gibbs chains over (theta, x), PIMH and
the trajectory-overlap mixing diagnostic."""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from .smc import as_batch, bootstrap_pf, cpfas_kernel, extract_trajectory

log = logging.getLogger(__name__)


@dataclass
class ChainState:
    trajectory: np.ndarray
    theta: np.ndarray | None = None
    iteration: int = 0
    overlap: float = float("nan")
    loglik: float | None = None
    accepted: bool | None = None


def pgas_chain(model, theta, x_init, y, N, n_iters, rng):
    """Iterate the CPF-AS kernel ``n_iters`` times at fixed theta.

    Returns the stacked trajectories, shape (n_iters, [R,] T+1, m); the
    initial trajectory is not included.
    """
    if N < 2:
        raise ValueError("PGAS needs N >= 2")
    x = np.asarray(x_init, dtype=float)
    out = []
    for _ in range(int(n_iters)):
        x = cpfas_kernel(model, theta, x, y, N, rng)
        out.append(x)
    if not out:
        return np.empty((0,) + x.shape)
    return np.stack(out)


def gibbs_chain(model, eta, theta_init, x_init, y, N, n_iters, theta_kernel, rng):
    """Particle Gibbs over (theta, x) at fixed hyperparameters ``eta``.

    Each sweep draws x from the CPF-AS kernel at the current theta, then
    theta from ``theta_kernel(eta, x, y, rng, theta_prev=theta)``.  The
    theta draws use a generator spawned from ``rng`` so the trajectory stream
    is the same one ``pgas_chain`` would consume.
    """
    if N < 2:
        raise ValueError("particle Gibbs needs N >= 2")
    theta_rng = rng.spawn(1)[0]
    theta = model.check_theta(theta_init)
    x = np.asarray(x_init, dtype=float)
    states = []
    for j in range(1, int(n_iters) + 1):
        x_new = cpfas_kernel(model, theta, x, y, N, rng)
        theta = model.check_theta(theta_kernel(eta, x_new, y, theta_rng, theta_prev=theta))
        states.append(ChainState(x_new, theta.copy(), j, overlap_diagnostic(x, x_new)))
        x = x_new
    return states


# -- theta kernels -------------------------------------------------------------

def conjugate_lgss_theta_kernel(eta, x_traj, y, rng, theta_prev=None, *, sigma_w2=1.0):
    """Exact draw of theta from its Gaussian full conditional in the scalar LGSS.

    ``eta = (mu0, tau0_sq)`` is the N(mu0, tau0_sq) prior on theta; the
    transition noise variance ``sigma_w2`` is known.
    """
    mu0, tau2 = (float(v) for v in eta)
    if not tau2 > 0:
        raise ValueError("prior variance must be positive")
    if not sigma_w2 > 0:
        raise ValueError("sigma_w2 must be positive")
    mean, var = lgss_theta_conditional(eta, x_traj, sigma_w2)
    return np.array([mean + np.sqrt(var) * rng.standard_normal()])


def lgss_theta_conditional(eta, x_traj, sigma_w2=1.0):
    """Mean and variance of the Gaussian full conditional of theta."""
    mu0, tau2 = (float(v) for v in eta)
    x = np.asarray(x_traj, dtype=float)[..., 0]
    prec = 1.0 / tau2 + np.sum(x[:-1] ** 2) / sigma_w2
    mean = (mu0 / tau2 + np.sum(x[:-1] * x[1:]) / sigma_w2) / prec
    return mean, 1.0 / prec


def beta_chains_theta_kernel(eta, x_traj, y, rng, theta_prev=None):
    """Conjugate draw of the switching probabilities: Beta(a + switches, b + stays)."""
    a, b = (float(v) for v in eta)
    x = np.asarray(x_traj)
    sw = (x[1:] != x[:-1]).sum(axis=0)
    st = (x.shape[0] - 1) - sw
    # Beta draws can round to exactly 0 or 1 in float64; keep them interior.
    return np.clip(rng.beta(a + sw, b + st), 1e-300, 1.0 - 1e-16)


# -- PIMH ------------------------------------------------------------------------

def pimh_init(model, theta, y, N, rng):
    """Initial (trajectory, loglik) pair for a PIMH chain."""
    ps, ll = bootstrap_pf(model, theta, y, N, rng)
    return extract_trajectory(ps, rng), ll


def pimh_kernel(model, theta, current, y, N, rng):
    """Particle independent Metropolis-Hastings step.

    ``current`` is the (trajectory, loglik) pair carried by the chain; the
    loglik is whatever was stored when the trajectory was accepted.  A fresh
    bootstrap filter proposes a trajectory, accepted with probability
    min(1, exp(loglik_new - loglik_current)).  Batched thetas give batched
    arrays and a per-replicate acceptance vector.
    """
    if N < 1:
        raise ValueError("PIMH needs N >= 1")
    x_cur, ll_cur = current
    x_cur = np.asarray(x_cur, dtype=float)
    ll_cur = np.asarray(ll_cur, dtype=float)
    if not np.all(np.isfinite(ll_cur)):
        raise ValueError("current log-likelihood must be finite")
    ps, ll_new = bootstrap_pf(model, theta, y, N, rng, allow_collapse=True)
    x_new = extract_trajectory(ps, rng)
    ll_new = np.asarray(ll_new)
    accept = np.log(rng.random(ll_new.shape)) < ll_new - ll_cur
    x_out = np.where(accept[..., None, None], x_new, x_cur)
    ll_out = np.where(accept, ll_new, ll_cur)
    if ll_out.ndim == 0:
        return x_out, float(ll_out), bool(accept)
    return x_out, ll_out, accept


# -- mixing diagnostic -----------------------------------------------------------

def overlap_diagnostic(a, b, atol=0.0):
    """Fraction of time indices at which two trajectories agree.

    Agreement is exact by default, since CPF-AS copies surviving states
    verbatim.  Leading batch axes are allowed; the last two are (T+1, m).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"trajectory shapes differ: {a.shape} vs {b.shape}")
    same = np.all(np.abs(a - b) <= atol, axis=-1)
    out = same.mean(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


class MixingMonitor:
    """Logs a warning when the windowed mean overlap exceeds ``threshold``.

    Purely advisory; the drivers never change course because of it.
    """

    def __init__(self, threshold=0.9, window=50):
        self.threshold = float(threshold)
        self.window = deque(maxlen=int(window))
        self.warned = False

    def update(self, k, overlap) -> bool:
        self.window.append(float(np.mean(overlap)))
        high = len(self.window) == self.window.maxlen and np.mean(self.window) > self.threshold
        if high and not self.warned:
            log.warning("iteration %d: mean trajectory overlap %.3f over the last %d iterations "
                        "exceeds %.2f; the kernel may be mixing poorly (consider a larger N)",
                        k, np.mean(self.window), len(self.window), self.threshold)
        self.warned = bool(high)
        return bool(high)


def write_chain_csv(path, states, param_names=()):
    """Write a chain trace: iteration, theta components, overlap, acceptance."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", *param_names, "overlap", "accepted"])
        for s in states:
            th = [] if s.theta is None else [repr(float(v)) for v in np.ravel(s.theta)]
            acc = "" if s.accepted is None else int(s.accepted)
            w.writerow([s.iteration, *th, repr(float(s.overlap)), acc])


def batch_size(model, theta) -> int | None:
    """Number of replicates encoded in theta, or None for an unbatched theta."""
    th, batched = as_batch(model, theta)
    return th.shape[0] if batched else None
