"""Step-length schedules, the stochastic-approximation update on sufficient
statistics, and the learning drivers (MCEM, PSAEM, Bayesian PSAEM, PIMH-SAEM).

Every Fisherian driver accepts ``theta_init`` of shape (p,) or (R, p); the
batched form runs R independent replicates in lockstep, which is how the
multi-seed experiments are executed.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateStatsError
from .kernels import MixingMonitor, overlap_diagnostic, pimh_init, pimh_kernel
from .models.beta import BetaPrior
from .smc import as_batch, batch_trajectory, bootstrap_pf, cpfas_kernel, extract_trajectory, ffbsi

TRACE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class StepSchedule:
    """gamma_k = 1 for k <= warmup + 1, then (k - warmup)^-alpha."""

    alpha: float = 0.7
    warmup: int = 0

    def __post_init__(self):
        if not 0.5 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (1/2, 1], got {self.alpha}")
        if self.warmup < 0 or int(self.warmup) != self.warmup:
            raise ValueError("warmup must be a nonnegative integer")

    def __call__(self, k: int) -> float:
        return step_value(self, k)


def step_value(schedule: StepSchedule, k: int) -> float:
    if k < 1:
        raise ValueError("step index starts at 1")
    if k <= schedule.warmup + 1:
        return 1.0
    return float((k - schedule.warmup) ** -schedule.alpha)


def sa_update(stats_prev, stat_new, gamma):
    """Convex combination (1 - gamma) * stats_prev + gamma * stat_new."""
    stats_prev = np.asarray(stats_prev, dtype=float)
    stat_new = np.asarray(stat_new, dtype=float)
    if stats_prev.shape != stat_new.shape:
        raise ValueError(f"statistic shapes differ: {stats_prev.shape} vs {stat_new.shape}")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if gamma == 1.0:
        return stat_new.copy()
    return (1.0 - gamma) * stats_prev + gamma * stat_new


@dataclass
class LearnTrace:
    """Per-iteration record of a learning run.

    Row 0 holds the initial estimate.  ``theta`` is (K+1, [R,] p); ``overlap``
    and ``accepted`` are (K+1, [R]) with NaN where undefined; ``propagations``
    counts particles propagated per replicate, cumulatively.
    """

    method: str
    param_names: tuple
    gamma: np.ndarray
    theta: np.ndarray
    overlap: np.ndarray
    accepted: np.ndarray
    propagations: np.ndarray
    elapsed: np.ndarray
    extras: dict = field(default_factory=dict)

    @property
    def k(self) -> np.ndarray:
        return np.arange(len(self.gamma))

    @property
    def n_iters(self) -> int:
        return len(self.gamma) - 1

    @property
    def final(self) -> np.ndarray:
        return self.theta[-1]

    @property
    def batched(self) -> bool:
        return self.theta.ndim == 3

    def rows(self, replicate_offset=0):
        """Yield CSV rows: replicate, k, gamma, params..., overlap, accepted, propagations, elapsed."""
        theta = self.theta if self.batched else self.theta[:, None, :]
        ov = self.overlap if self.batched else self.overlap[:, None]
        acc = self.accepted if self.batched else self.accepted[:, None]
        for r in range(theta.shape[1]):
            for k in range(theta.shape[0]):
                yield [replicate_offset + r, k, self.gamma[k], *theta[k, r], ov[k, r], acc[k, r],
                       int(self.propagations[k]), self.elapsed[k]]

    def header(self):
        return ["replicate", "k", "gamma", *self.param_names, "overlap", "accepted",
                "propagations", "elapsed"]

    def to_csv(self, path, replicate_offset=0):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for row in self.rows(replicate_offset):
                w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class _Recorder:
    def __init__(self, method, names, theta0, n_iters):
        K = int(n_iters)
        self.method, self.names = method, tuple(names)
        batch = theta0.shape[:-1]
        self.gamma = np.full(K + 1, np.nan)
        self.theta = np.empty((K + 1,) + theta0.shape)
        self.theta[0] = theta0
        self.overlap = np.full((K + 1,) + batch, np.nan)
        self.accepted = np.full((K + 1,) + batch, np.nan)
        self.props = np.zeros(K + 1, dtype=np.int64)
        self.elapsed = np.zeros(K + 1)
        self.t0 = time.perf_counter()

    def record(self, k, gamma, theta, props, overlap=np.nan, accepted=np.nan):
        self.gamma[k] = gamma
        self.theta[k] = theta
        self.overlap[k] = overlap
        self.accepted[k] = accepted
        self.props[k] = self.props[k - 1] + props
        self.elapsed[k] = time.perf_counter() - self.t0

    def trace(self, **extras):
        return LearnTrace(self.method, self.names, self.gamma, self.theta, self.overlap,
                          self.accepted, self.props, self.elapsed, extras)


def _as_schedule(schedule):
    if schedule is None:
        return StepSchedule()
    if callable(schedule):
        return schedule
    raise TypeError("schedule must be a StepSchedule or a callable k -> gamma")


def _mstep(model, stats, k):
    try:
        return model.check_theta(model.mstep(stats))
    except DegenerateStatsError as e:
        raise DegenerateStatsError(f"iteration {k}: {e}") from e


def _initial_trajectory(model, theta, y, N, rng):
    ps, _ = bootstrap_pf(model, theta, y, N, rng)
    return extract_trajectory(ps, rng)


# -- drivers -------------------------------------------------------------------

def mcem(model, theta_init, y, N, J, n_iters, burnin=20, rng=None, *, sampler="pgas",
         x_init=None, ffbsi_method="rejection"):
    """Monte Carlo EM with a particle smoother in the E-step.

    ``sampler="pgas"``: each iteration runs a PGAS chain for burnin + J sweeps
    at the current theta (warm-started from the previous chain's last state)
    and averages the statistics of the last J trajectories.
    ``sampler="ffbsi"``: each iteration runs a bootstrap filter with N
    particles and draws J backward trajectories.  The statistics average is
    passed to the M-step.
    """
    if rng is None:
        raise ValueError("rng is required")
    if J < 1 or N < 2:
        raise ValueError("mcem needs J >= 1 and N >= 2")
    if sampler not in ("pgas", "ffbsi"):
        raise ValueError(f"unknown sampler {sampler!r}")
    theta = model.check_theta(theta_init).copy()
    _, batched = as_batch(model, theta)
    y = model.check_observations(y)
    T = len(y)
    rec = _Recorder(f"mcem-{sampler}", model.param_names, theta, n_iters)
    x = None
    if sampler == "pgas":
        x = _initial_trajectory(model, theta, y, N, rng) if x_init is None else np.asarray(x_init, float)
    for k in range(1, int(n_iters) + 1):
        if sampler == "pgas":
            draws = []
            for j in range(int(burnin) + int(J)):
                x = cpfas_kernel(model, theta, x, y, N, rng)
                if j >= burnin:
                    draws.append(x)
            xs = np.stack(draws, axis=-3)
            cost = (burnin + J) * N * T
        else:
            ps, _ = bootstrap_pf(model, theta, y, N, rng)
            xs = ffbsi(ps, model, theta, J, rng, method=ffbsi_method)
            cost = N * T + J * T
        stats = model.suffstats(xs, y).mean(axis=-2)
        theta = _mstep(model, stats, k)
        rec.record(k, 1.0, theta, cost)
    return rec.trace()


def psaem_fisherian(model, theta_init, x_init, y, N, schedule, n_iters, rng, *, batch=1,
                    overlap_threshold=0.9, overlap_window=50):
    """Particle SAEM for maximum likelihood (exponential-family models).

    Per iteration: ``batch`` CPF-AS sweeps conditioned on the previous
    trajectory and theta, an SA update of the averaged statistics with step
    gamma_k, then the M-step on the updated statistics.  ``x_init=None``
    starts from a bootstrap-filter draw.
    """
    if N < 2:
        raise ValueError("PSAEM needs N >= 2")
    if batch < 1:
        raise ValueError("batch must be at least 1")
    sched = _as_schedule(schedule)
    theta = model.check_theta(theta_init).copy()
    th, batched = as_batch(model, theta)
    y = model.check_observations(y)
    T = len(y)
    if x_init is None:
        x = _initial_trajectory(model, theta, y, N, rng)
    else:
        x = np.array(batch_trajectory(model, x_init, th.shape[0], T, batched)
                     if batched else model.check_trajectory(x_init, T))
    S = np.zeros(theta.shape[:-1] + (model.n_stats,))
    rec = _Recorder("psaem", model.param_names, theta, n_iters)
    monitor = MixingMonitor(overlap_threshold, overlap_window)
    for k in range(1, int(n_iters) + 1):
        x_prev = x
        stat = 0.0
        for _ in range(int(batch)):
            x = cpfas_kernel(model, theta, x, y, N, rng)
            stat = stat + model.suffstats(x, y)
        gamma = sched(k)
        S = sa_update(S, stat / batch, gamma)
        theta = _mstep(model, S, k)
        ov = overlap_diagnostic(x_prev, x)
        monitor.update(k, ov)
        rec.record(k, gamma, theta, batch * N * T, overlap=ov)
    return rec.trace(final_trajectory=x, final_stats=S)


def psaem_bayesian(model, eta_init, theta_init, x_init, y, N, schedule, theta_kernel, n_iters, rng,
                   prior=None, *, overlap_threshold=0.9, overlap_window=50):
    """Particle SAEM for empirical Bayes: learns prior hyperparameters eta.

    Per iteration: a CPF-AS sweep at the current theta, a theta draw from
    ``theta_kernel(eta, x, y, rng, theta_prev=theta)``, an SA update of the
    prior statistics S_theta(theta), then the hyperparameter M-step.  Theta
    draws use a generator spawned from ``rng``.  The trace's ``theta`` holds
    eta; the sampled thetas are in ``extras["theta_samples"]``.
    """
    if N < 2:
        raise ValueError("PSAEM needs N >= 2")
    prior = BetaPrior() if prior is None else prior
    sched = _as_schedule(schedule)
    theta_rng = rng.spawn(1)[0]
    eta = np.asarray(eta_init, dtype=float)
    if not np.all(prior.in_domain(eta)):
        raise ValueError(f"hyperparameters outside domain: {eta}")
    theta = model.check_theta(theta_init)
    y = model.check_observations(y)
    T = len(y)
    x = _initial_trajectory(model, theta, y, N, rng) if x_init is None else model.check_trajectory(x_init, T)
    S = np.zeros(3)
    rec = _Recorder("psaem-bayes", prior.param_names, eta, n_iters)
    samples = np.empty((int(n_iters) + 1, theta.shape[-1]))
    samples[0] = theta
    monitor = MixingMonitor(overlap_threshold, overlap_window)
    for k in range(1, int(n_iters) + 1):
        x_prev = x
        x = cpfas_kernel(model, theta, x, y, N, rng)
        theta = model.check_theta(theta_kernel(eta, x, y, theta_rng, theta_prev=theta))
        gamma = sched(k)
        S = sa_update(S, prior.suffstats(theta), gamma)
        eta = prior.mstep(S)
        samples[k] = theta
        ov = overlap_diagnostic(x_prev, x)
        monitor.update(k, ov)
        rec.record(k, gamma, eta, N * T, overlap=ov)
    return rec.trace(theta_samples=samples, final_stats=S)


def pimh_saem(model, theta_init, y, N, schedule, n_iters, rng):
    """SAEM whose trajectory draw is a particle independent Metropolis-Hastings step.

    The chain carries the accepted trajectory and the log-normalizer stored at
    acceptance; on rejection the retained trajectory still feeds the update.
    """
    if N < 1:
        raise ValueError("PIMH-SAEM needs N >= 1")
    sched = _as_schedule(schedule)
    theta = model.check_theta(theta_init).copy()
    y = model.check_observations(y)
    T = len(y)
    x, ll = pimh_init(model, theta, y, N, rng)
    S = np.zeros(theta.shape[:-1] + (model.n_stats,))
    rec = _Recorder("pimh-saem", model.param_names, theta, n_iters)
    for k in range(1, int(n_iters) + 1):
        x_prev = x
        x, ll, acc = pimh_kernel(model, theta, (x, ll), y, N, rng)
        gamma = sched(k)
        S = sa_update(S, model.suffstats(x, y), gamma)
        theta = _mstep(model, S, k)
        rec.record(k, gamma, theta, N * T, overlap=overlap_diagnostic(x_prev, x),
                   accepted=np.asarray(acc, dtype=float))
    return rec.trace(final_trajectory=x, final_stats=S)
