import itertools
from collections import defaultdict

import numpy as np
import pytest

from psaem.models import LGSS, DiscreteHmm

HMM_INIT = np.array([0.6, 0.4])
HMM_A = np.array([[0.7, 0.3], [0.2, 0.8]])
HMM_B = np.array([[0.9, 0.1], [0.3, 0.7]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def hmm():
    """Two states, two symbols, fixed emissions; theta is the transition matrix."""
    return DiscreteHmm(HMM_INIT, emission=HMM_B, learn_emissions=False)


@pytest.fixture
def hmm_theta(hmm):
    return hmm.pack(HMM_A)


@pytest.fixture
def lgss():
    return LGSS(sigma_w2=1.0, sigma_e2=0.3, prior_var=1.0)


@pytest.fixture
def lgss_data(lgss):
    x, y = lgss.simulate([0.9], 60, np.random.default_rng(7))
    return x, y


def path_key(x):
    """Integer tuple for a (T+1, 1) discrete trajectory."""
    return tuple(int(v) for v in np.asarray(x)[:, 0])


def empirical(paths):
    counts = defaultdict(int)
    for p in paths:
        counts[path_key(p)] += 1
    n = len(paths)
    return {k: c / n for k, c in counts.items()}


def total_variation(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def _normalize(w):
    w = np.asarray(w, dtype=float)
    return w / w.sum()


def cpfas_law(init, A, B, y, N, x_cond=None):
    """Exact output law of one CPF-AS sweep, by summing over every random choice.

    Free particles are 0..N-2 and the conditional one is N-1.  With
    ``x_cond=None`` all N particles are free, which is the bootstrap filter
    followed by a single ancestral-path draw.  Written as a plain recursion
    over discrete outcomes, independently of the vectorized sampler.
    """
    n = len(init)
    T = len(y)
    n_free = N if x_cond is None else N - 1
    law = defaultdict(float)

    def step(t, prob, hist, anc):
        # hist[s] is the tuple of particle states at time s; anc[s] ancestors into s-1
        if t > T:
            w = _normalize([B[s, y[T - 1]] for s in hist[T]]) if T > 0 else np.full(N, 1.0 / N)
            for i in range(N):
                if w[i] == 0:
                    continue
                path, j = [], i
                for s in range(T, -1, -1):
                    path.append(hist[s][j])
                    if s > 0:
                        j = anc[s][j]
                law[tuple(reversed(path))] += prob * w[i]
            return
        prev = hist[t - 1]
        w = _normalize([B[s, y[t - 2]] for s in prev]) if t > 1 else np.full(N, 1.0 / N)
        choices = list(itertools.product(range(N), range(n)))
        for free in itertools.product(choices, repeat=n_free):
            p_free = 1.0
            for a, s in free:
                p_free *= w[a] * A[prev[a], s]
            if p_free == 0:
                continue
            states = [s for _, s in free]
            ancs = [a for a, _ in free]
            if x_cond is None:
                step(t + 1, prob * p_free, hist + [tuple(states)], anc + [tuple(ancs)])
                continue
            xc = x_cond[t]
            wa = np.array([w[j] * A[prev[j], xc] for j in range(N)])
            wa = wa / wa.sum()
            for aN in range(N):
                if wa[aN] > 0:
                    step(t + 1, prob * p_free * wa[aN], hist + [tuple(states + [xc])],
                         anc + [tuple(ancs + [aN])])

    for x0 in itertools.product(range(n), repeat=n_free):
        p0 = np.prod([init[s] for s in x0])
        start = list(x0) + ([] if x_cond is None else [x_cond[0]])
        step(1, p0, [tuple(start)], [None])
    return dict(law)
