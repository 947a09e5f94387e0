"""Particle SAEM: conditional particle filtering with ancestor sampling, driven
by stochastic approximation EM, plus exact oracles and coupling diagnostics."""

__version__ = "0.1.0"

from .errors import (DegenerateStatsError, DomainError, OptimizerError, PsaemError,
                     StateSpaceTooLarge, WeightCollapseError)
from .kernels import (ChainState, MixingMonitor, gibbs_chain, overlap_diagnostic, pgas_chain,
                      pimh_kernel)
from .saem import LearnTrace, StepSchedule, mcem, pimh_saem, psaem_bayesian, psaem_fisherian
from .smc import ParticleSystem, bootstrap_pf, cpfas_kernel, extract_trajectory, ffbsi

__all__ = [
    "__version__",
    "PsaemError",
    "DomainError",
    "WeightCollapseError",
    "DegenerateStatsError",
    "OptimizerError",
    "StateSpaceTooLarge",
    "ParticleSystem",
    "bootstrap_pf",
    "cpfas_kernel",
    "extract_trajectory",
    "ffbsi",
    "ChainState",
    "MixingMonitor",
    "pgas_chain",
    "gibbs_chain",
    "pimh_kernel",
    "overlap_diagnostic",
    "LearnTrace",
    "StepSchedule",
    "mcem",
    "psaem_fisherian",
    "psaem_bayesian",
    "pimh_saem",
]
