"""State-space models: contracts and concrete instances."""

from .base import ExpFamilyModel, StateSpaceModel
from .beta import BetaBernoulliChains, BetaPrior, beta_prior_mstep, beta_prior_suffstats
from .hmm import DiscreteHmm
from .lgss import LGSS
from .watertank import (INITIAL_GUESS, SYNTHETIC_TRUTH, WaterTank, load_watertank_csv,
                        simulation_rmse, synthetic_inputs)

__all__ = [
    "StateSpaceModel",
    "ExpFamilyModel",
    "LGSS",
    "DiscreteHmm",
    "WaterTank",
    "BetaBernoulliChains",
    "BetaPrior",
    "beta_prior_suffstats",
    "beta_prior_mstep",
    "load_watertank_csv",
    "simulation_rmse",
    "synthetic_inputs",
    "INITIAL_GUESS",
    "SYNTHETIC_TRUTH",
]
