"""State-space model contracts.

All density and sampling methods broadcast over leading axes: ``theta`` has
shape ``(..., p)`` and states ``(..., m)``.  The SMC layer passes
``theta[:, None, :]`` against particle arrays of shape ``(R, N, m)`` so one call
handles every replicate and particle at once.  Time indices ``t`` refer to the
*new* state, i.e. ``transition_logpdf(theta, x_{t-1}, x_t, t)``.
"""

from __future__ import annotations

import numpy as np

from ..errors import DomainError


class StateSpaceModel:
    """Model p(x_0) p_theta(x_t | x_{t-1}) p_theta(y_t | x_t)."""

    name = "ssm"
    dim_x: int = 1
    dim_y: int = 1
    param_names: tuple[str, ...] = ()
    # True when p(x_0) depends on theta (water tank); most models ignore theta.
    initial_depends_on_theta = False

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    # -- parameters -------------------------------------------------------
    def in_domain(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return np.all(np.isfinite(theta), axis=-1)

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1:] != (self.n_params,):
            raise DomainError(
                f"{self.name}: expected {self.n_params} parameters, got shape {theta.shape}"
            )
        if not np.all(self.in_domain(theta)):
            raise DomainError(f"{self.name}: parameter outside domain: {theta}")
        return theta

    def make_theta(self, **values) -> np.ndarray:
        """Build a validated parameter vector from named components."""
        missing = set(self.param_names) - set(values)
        extra = set(values) - set(self.param_names)
        if missing or extra:
            raise DomainError(f"{self.name}: missing {sorted(missing)}, unknown {sorted(extra)}")
        return self.check_theta([float(values[n]) for n in self.param_names])

    # -- densities and samplers -------------------------------------------
    def sample_initial(self, theta, shape, rng) -> np.ndarray:
        raise NotImplementedError

    def initial_logpdf(self, theta, x) -> np.ndarray:
        raise NotImplementedError

    def sample_transition(self, theta, x_prev, t, rng) -> np.ndarray:
        raise NotImplementedError

    def transition_logpdf(self, theta, x_prev, x, t) -> np.ndarray:
        raise NotImplementedError

    def observation_logpdf(self, theta, x, y_t) -> np.ndarray:
        raise NotImplementedError

    def sample_observation(self, theta, x, rng) -> np.ndarray:
        raise NotImplementedError

    def transition_gaussian(self, theta, x_prev, t):
        """(mean, var) when p_theta(x_t | x_{t-1}) is N(mean, var * I), else None.

        Lets the coupled filter use a reflection coupling instead of rejection.
        """
        return None

    def log_transition_bound(self, theta) -> np.ndarray:
        """Upper bound on log p_theta(x' | x) over x, x' (rejection FFBSi)."""
        raise NotImplementedError(f"{self.name} has no transition density bound")

    # -- helpers ----------------------------------------------------------
    def check_observations(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if y.ndim != 2 or y.shape[1] != self.dim_y:
            raise ValueError(f"{self.name}: observations must have shape (T, {self.dim_y})")
        return y

    def check_trajectory(self, x, T=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim < 2 or x.shape[-1] != self.dim_x:
            raise ValueError(f"{self.name}: trajectory must have shape (..., T+1, {self.dim_x})")
        if T is not None and x.shape[-2] != T + 1:
            raise ValueError(f"trajectory has {x.shape[-2]} states, expected T+1={T + 1}")
        return x

    def complete_loglik(self, theta, x, y) -> np.ndarray:
        """log p_theta(x_{0:T}, y_{1:T}) evaluated directly from the densities."""
        y = self.check_observations(y)
        x = self.check_trajectory(x, len(y))
        theta = np.asarray(theta, dtype=float)
        out = self.initial_logpdf(theta, x[..., 0, :])
        for t in range(1, len(y) + 1):
            out = out + self.transition_logpdf(theta, x[..., t - 1, :], x[..., t, :], t)
            out = out + self.observation_logpdf(theta, x[..., t, :], y[t - 1])
        return out

    def simulate(self, theta, T, rng):
        """Draw (x_{0:T}, y_{1:T}) from the model."""
        theta = self.check_theta(theta)
        x = np.empty((T + 1, self.dim_x))
        y = np.empty((T, self.dim_y))
        x[0] = self.sample_initial(theta, (), rng)
        for t in range(1, T + 1):
            x[t] = self.sample_transition(theta, x[t - 1], t, rng)
            y[t - 1] = self.sample_observation(theta, x[t], rng)
        return x, y


class ExpFamilyModel(StateSpaceModel):
    """Model whose complete-data log-likelihood is -psi(theta) + <S, phi(theta)> + const.

    Statistics are normalized by T, so ``T * expfam_objective(theta, S(x, y))``
    differs from ``complete_loglik`` by a theta-free constant.
    """

    n_stats: int = 0

    def suffstats(self, x, y) -> np.ndarray:
        raise NotImplementedError

    def mstep(self, stats) -> np.ndarray:
        raise NotImplementedError

    def expfam_objective(self, theta, stats) -> np.ndarray:
        raise NotImplementedError

    def mstep_objective(self, theta, stats) -> np.ndarray:
        """Objective the M-step maximizes (expfam part plus any regularizer)."""
        return self.expfam_objective(theta, stats)


def gaussian_logpdf(x, mean, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mean) ** 2 / var)


def as_shape(shape) -> tuple:
    return tuple(shape) if isinstance(shape, (tuple, list)) else (int(shape),)
