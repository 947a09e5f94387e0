"""Experiment configuration: a flat INI file with one section per concern.

Example::

    [model]
    name = lgss            ; lgss | watertank
    T = 300
    theta_true = 0.9
    sigma_w2 = 1.0
    sigma_e2 = 0.3

    [data]
    seed = 0               ; dataset seed (independent of the run seeds)
    path =                 ; optional CSV; empty means simulate from [model]

    [driver]
    name = psaem           ; psaem | pimh-saem | mcem | pgas | gibbs
    N = 20
    n_iters = 1000
    theta_init = 0.1

    [schedule]
    alpha = 0.7
    warmup = 0

    [run]
    seeds = 0-49
    threads = 1

    [coupling]
    thetas = 0.5, 0.501, 0.505
    N = 5
    reps = 10000

A run manifest (``manifest.json``) can be passed wherever a config is
expected; its ``config`` entry is read back verbatim.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models.watertank import INITIAL_GUESS, SYNTHETIC_TRUTH

MODELS = ("lgss", "watertank")
DRIVERS = ("psaem", "pimh-saem", "mcem", "pgas", "gibbs")
SECTIONS = ("model", "data", "driver", "schedule", "run", "coupling")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    model: str = "lgss"
    model_params: dict = field(default_factory=dict)
    T: int = 300
    data_seed: int = 0
    data_path: str | None = None
    test_path: str | None = None
    driver: str = "psaem"
    N: int = 20
    n_iters: int = 1000
    J: int = 1
    burnin: int = 20
    sampler: str = "pgas"
    batch: int = 1
    theta_init: list | None = None
    prior: tuple = (0.0, 1.0)
    alpha: float = 0.7
    warmup: int = 0
    seeds: list = field(default_factory=lambda: [0])
    threads: int = 1
    label: str | None = None
    coupling_thetas: list = field(default_factory=list)
    coupling_N: list = field(default_factory=lambda: [5])
    coupling_reps: int = 10000
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def name(self) -> str:
        return self.label or f"{self.driver}-N{self.N}"


def _floats(text) -> list:
    return [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]


def _ints(text) -> list:
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def read_raw(path) -> dict:
    """Section -> {key: str} from an INI file or a run manifest."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix == ".json":
        data = json.loads(path.read_text())
        return {s: dict(v) for s, v in data["config"].items()}
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    cp.read(path)
    unknown = set(cp.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return {s: dict(cp[s]) for s in cp.sections()}


def parse(raw: dict) -> ExperimentConfig:
    try:
        return _parse(raw)
    except (KeyError, ValueError, TypeError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid config value: {e}") from e


def _parse(raw):
    m, d, dr = raw.get("model", {}), raw.get("data", {}), raw.get("driver", {})
    sc, rn, cp = raw.get("schedule", {}), raw.get("run", {}), raw.get("coupling", {})
    cfg = ExperimentConfig(raw=raw)
    cfg.model = m.get("name", "lgss").strip().lower()
    if cfg.model not in MODELS:
        raise ConfigError(f"unknown model {cfg.model!r}; expected one of {MODELS}")
    cfg.T = int(m.get("T", 300 if cfg.model == "lgss" else 1024))
    if cfg.T < 0:
        raise ConfigError("T must be nonnegative")
    params = {k: float(v) for k, v in m.items() if k not in ("name", "T", "learn_variances")}
    params["learn_variances"] = m.get("learn_variances", "false").strip().lower() in ("1", "true", "yes")
    cfg.model_params = params
    cfg.data_seed = int(d.get("seed", 0))
    cfg.data_path = d.get("path") or None
    cfg.test_path = d.get("test_path") or None

    cfg.driver = dr.get("name", "psaem").strip().lower()
    if cfg.driver not in DRIVERS:
        raise ConfigError(f"unknown driver {cfg.driver!r}; expected one of {DRIVERS}")
    cfg.N = int(dr.get("N", 20))
    cfg.n_iters = int(dr.get("n_iters", 1000))
    cfg.J = int(dr.get("J", 1))
    cfg.burnin = int(dr.get("burnin", 20))
    cfg.sampler = dr.get("sampler", "pgas").strip().lower()
    cfg.batch = int(dr.get("batch", 1))
    cfg.theta_init = _floats(dr["theta_init"]) if dr.get("theta_init") else None
    if dr.get("prior"):
        cfg.prior = tuple(_floats(dr["prior"]))
    cfg.label = dr.get("label") or None
    if cfg.driver == "pimh-saem":
        if cfg.N < 1:
            raise ConfigError("pimh-saem needs N >= 1")
    elif cfg.N < 2:
        raise ConfigError(f"{cfg.driver} needs N >= 2 (a conditional plus at least one free particle)")
    if cfg.n_iters < 0 or cfg.J < 1 or cfg.burnin < 0 or cfg.batch < 1:
        raise ConfigError("n_iters >= 0, J >= 1, burnin >= 0 and batch >= 1 are required")
    if cfg.sampler not in ("pgas", "ffbsi"):
        raise ConfigError("sampler must be pgas or ffbsi")
    if cfg.driver == "gibbs" and cfg.model != "lgss":
        raise ConfigError("the gibbs driver ships a theta kernel for lgss only")
    if len(cfg.prior) != 2 or not cfg.prior[1] > 0:
        raise ConfigError("prior must be 'mean, variance' with positive variance")

    cfg.alpha = float(sc.get("alpha", 0.7))
    cfg.warmup = int(sc.get("warmup", 0))
    if not 0.5 < cfg.alpha <= 1.0:
        raise ConfigError(f"schedule alpha must lie in (1/2, 1], got {cfg.alpha}")
    if cfg.warmup < 0:
        raise ConfigError("schedule warmup must be nonnegative")

    cfg.seeds = _ints(rn.get("seeds", "0"))
    if not cfg.seeds:
        raise ConfigError("at least one seed is required")
    cfg.threads = int(rn.get("threads", 1))

    if "thetas" in cp:
        cfg.coupling_thetas = [_floats(t) for t in cp["thetas"].split("|")] if "|" in cp["thetas"] \
            else [[v] for v in _floats(cp["thetas"])]
    cfg.coupling_N = _ints(cp.get("N", "5"))
    cfg.coupling_reps = int(cp.get("reps", 10000))
    return cfg


def load(path) -> ExperimentConfig:
    return parse(read_raw(path))


def default_theta_init(cfg: ExperimentConfig, n_params: int) -> np.ndarray:
    if cfg.theta_init is not None:
        if len(cfg.theta_init) != n_params:
            raise ConfigError(f"theta_init has {len(cfg.theta_init)} values, the model needs {n_params}")
        return np.array(cfg.theta_init)
    if cfg.model == "watertank":
        return np.array(INITIAL_GUESS)
    return np.array([0.1] + [1.0] * (n_params - 1))


def true_theta(cfg: ExperimentConfig, model) -> np.ndarray:
    p = cfg.model_params
    if cfg.model == "watertank":
        base = dict(zip(model.param_names, SYNTHETIC_TRUTH))
        base.update({k: v for k, v in p.items() if k in base})
        return model.make_theta(**base)
    vals = {"theta": p.get("theta_true", 0.9)}
    if model.learn_variances:
        vals.update(sigma_w2=model.sigma_w2, sigma_e2=model.sigma_e2)
    return model.make_theta(**vals)
