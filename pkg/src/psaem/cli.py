"""Command-line experiment runner: simulate | learn | compare | couple-test."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .config import ConfigError, ExperimentConfig
from .coupling import coupling_probability
from .kernels import conjugate_lgss_theta_kernel, gibbs_chain, overlap_diagnostic, pgas_chain
from .models import LGSS, WaterTank, load_watertank_csv, simulation_rmse, synthetic_inputs
from .oracle import kalman_exact_ml
from .saem import LearnTrace, StepSchedule, mcem, pimh_saem, psaem_fisherian
from .smc import bootstrap_pf, extract_trajectory

log = logging.getLogger("psaem")

SCHEMA_VERSION = 1


# -- data --------------------------------------------------------------------------

def build_model(cfg: ExperimentConfig, u=None):
    p = cfg.model_params
    if cfg.model == "lgss":
        bound = np.inf if cfg.driver == "gibbs" else 1.0
        return LGSS(p.get("sigma_w2", 1.0), p.get("sigma_e2", 0.3), p.get("prior_var", 1.0),
                    learn_variances=p.get("learn_variances", False), theta_bound=bound)
    return WaterTank(u)


def read_column_csv(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and not _is_number(rows[0][0]):
        rows = rows[1:]
    return np.array([[float(v) for v in r] for r in rows], dtype=float).reshape(len(rows), -1)


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def load_problem(cfg: ExperimentConfig):
    """(model, y, x_true or None, test (model, y) or None)."""
    test = None
    if cfg.model == "watertank":
        if cfg.data_path:
            u, y = load_watertank_csv(cfg.data_path)
            model, x = WaterTank(u), None
        else:
            model, x, y = simulate_dataset(cfg)
        if cfg.test_path:
            ut, yt = load_watertank_csv(cfg.test_path)
            test = (WaterTank(ut), yt)
        return model, y, x, test
    model = build_model(cfg)
    if cfg.data_path:
        y = read_column_csv(cfg.data_path)[:, :1]
        return model, y, None, None
    model, x, y = simulate_dataset(cfg)
    return model, y, x, None


def simulate_dataset(cfg: ExperimentConfig):
    rng = np.random.default_rng(cfg.data_seed)
    u = synthetic_inputs(cfg.T, rng) if cfg.model == "watertank" else None
    model = build_model(cfg, u)
    x, y = model.simulate(cfgmod.true_theta(cfg, model), cfg.T, rng)
    return model, x, y


def dataset_digest(y) -> str:
    return hashlib.sha256(np.ascontiguousarray(y, dtype=float).tobytes()).hexdigest()[:16]


# -- output helpers ----------------------------------------------------------------

def fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def write_manifest(out: Path, command, cfg: ExperimentConfig, seeds, extra=None):
    # the stored config carries the effective seeds, so rerunning it needs no offset
    raw = {s: dict(v) for s, v in cfg.raw.items()}
    if command != "simulate":
        raw.setdefault("run", {})["seeds"] = ",".join(str(s) for s in seeds)
    doc = {"schema_version": SCHEMA_VERSION, "version": __version__, "command": command,
           "seeds": list(seeds), "config": raw}
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


# -- learn ---------------------------------------------------------------------------

def run_driver(cfg: ExperimentConfig, model, y, seed) -> LearnTrace:
    rng = np.random.default_rng(seed)
    theta0 = cfgmod.default_theta_init(cfg, model.n_params)
    sched = StepSchedule(cfg.alpha, cfg.warmup)
    if cfg.driver == "psaem":
        return psaem_fisherian(model, theta0, None, y, cfg.N, sched, cfg.n_iters, rng, batch=cfg.batch)
    if cfg.driver == "pimh-saem":
        return pimh_saem(model, theta0, y, cfg.N, sched, cfg.n_iters, rng)
    if cfg.driver == "mcem":
        return mcem(model, theta0, y, cfg.N, cfg.J, cfg.n_iters, cfg.burnin, rng, sampler=cfg.sampler)
    ps, _ = bootstrap_pf(model, theta0, y, cfg.N, rng)
    x0 = extract_trajectory(ps, rng)
    K = cfg.n_iters
    if cfg.driver == "pgas":
        xs = pgas_chain(model, theta0, x0, y, cfg.N, K, rng)
        prev = np.concatenate([x0[None], xs[:-1]]) if K else xs
        overlap = np.concatenate([[np.nan], overlap_diagnostic(prev, xs)]) if K else np.array([np.nan])
        theta = np.broadcast_to(theta0, (K + 1, model.n_params)).copy()
    else:
        kernel = _lgss_gibbs_kernel(model)
        states = gibbs_chain(model, cfg.prior, theta0, x0, y, cfg.N, K, kernel, rng)
        theta = np.vstack([theta0] + [s.theta for s in states])
        overlap = np.array([np.nan] + [s.overlap for s in states])
    props = np.arange(K + 1) * cfg.N * len(y)
    return LearnTrace(cfg.driver, model.param_names, np.full(K + 1, np.nan), theta, overlap,
                      np.full(K + 1, np.nan), props, np.zeros(K + 1))


def _lgss_gibbs_kernel(model):
    def kernel(eta, x, y, rng, theta_prev=None):
        return conjugate_lgss_theta_kernel(eta, x, y, rng, theta_prev, sigma_w2=model.sigma_w2)
    return kernel


def _seed_job(args):
    raw, seed = args
    cfg = cfgmod.parse(raw)
    model, y, _, _ = load_problem(cfg)
    try:
        return run_driver(cfg, model, y, seed)
    except Exception as e:
        e.args = (f"seed {seed}: {e}",)
        raise


def run_seeds(cfg: ExperimentConfig, seeds, threads):
    jobs = [(cfg.raw, s) for s in seeds]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_seed_job, jobs))
    return [_seed_job(j) for j in jobs]


def learn(cfg: ExperimentConfig, out: Path, seed_offset=0, threads=None):
    out.mkdir(parents=True, exist_ok=True)
    seeds = [s + seed_offset for s in cfg.seeds]
    model, y, _, test = load_problem(cfg)
    traces = run_seeds(cfg, seeds, threads or cfg.threads)
    ml = None
    if cfg.model == "lgss" and not model.learn_variances and len(y) > 0:
        ml = kalman_exact_ml(y[:, 0], model.sigma_w2, model.sigma_e2, model.prior_var)
    header = ["seed", *traces[0].header()]
    if ml is not None:
        header.append("abs_error")
    rows = []
    for seed, tr in zip(seeds, traces):
        for row in tr.rows():
            row = [seed, *row]
            if ml is not None:
                row.append(abs(row[4] - ml))
            rows.append(row)
    write_csv(out / "trace.csv", header, rows)
    report = {"dataset": dataset_digest(y), "T": int(len(y))}
    if ml is not None:
        report["theta_ml"] = ml
    if cfg.model == "watertank":
        report["train_rmse"] = [simulation_rmse(model, tr.final, y) for tr in traces]
        if test is not None:
            tmodel, yt = test
            report["test_rmse"] = [simulation_rmse(tmodel, tr.final, yt) for tr in traces]
    write_manifest(out, "learn", cfg, seeds, {"report": report})
    return traces, report


# -- compare ---------------------------------------------------------------------------

def compare(cfgs, out: Path, seed_offset=0, threads=None):
    if len(cfgs) < 1:
        raise ConfigError("compare needs at least one config")
    digests = [(cfg.name, dataset_digest(load_problem(cfg)[1])) for cfg in cfgs]
    if len({d for _, d in digests}) > 1:
        raise ConfigError(f"configs use different datasets: {digests}")
    out.mkdir(parents=True, exist_ok=True)
    summary_rows = []
    terminal = {}
    all_ml = True
    for i, cfg in enumerate(cfgs):
        name = cfg.name
        if name in terminal:
            name = f"{name}-{i}"
        traces, report = learn(cfg, out / name, seed_offset, threads)
        ml = report.get("theta_ml")
        all_ml &= ml is not None
        # one row per (seed, replicate), one column per iteration
        th = np.vstack([tr.theta[..., 0].reshape(len(tr.theta), -1).T for tr in traces])
        metric = np.abs(th - ml) if ml is not None else th
        elapsed = np.stack([tr.elapsed for tr in traces])
        q10, med, q90 = np.quantile(metric, [0.1, 0.5, 0.9], axis=0)
        for k in range(th.shape[1]):
            summary_rows.append([name, k, int(traces[0].propagations[k]), float(np.median(elapsed[:, k])),
                                 len(th), med[k], q10[k], q90[k]])
        terminal[name] = float(med[-1])
    metric_name = "abs_error" if all_ml else "theta0"
    write_csv(out / "summary.csv",
              ["method", "k", "propagations", "elapsed_median", "n_runs",
               f"{metric_name}_median", f"{metric_name}_q10", f"{metric_name}_q90"], summary_rows)
    (out / "summary.json").write_text(json.dumps({"terminal_median": terminal, "metric": metric_name},
                                                 indent=2, sort_keys=True))
    return terminal


# -- couple-test ---------------------------------------------------------------------------

def couple_test(cfg: ExperimentConfig, out: Path, seed_offset=0):
    if not cfg.coupling_thetas:
        raise ConfigError("couple-test needs a non-empty [coupling] thetas list")
    out.mkdir(parents=True, exist_ok=True)
    model, y, _, _ = load_problem(cfg)
    seed = cfg.seeds[0] + seed_offset
    rng = np.random.default_rng(seed)
    ref = model.check_theta(cfg.coupling_thetas[0])
    ps, _ = bootstrap_pf(model, ref, y, max(cfg.coupling_N), rng)
    x_cond = extract_trajectory(ps, rng)
    rows = []
    for N in cfg.coupling_N:
        for th in cfg.coupling_thetas:
            rep = coupling_probability(model, ref, model.check_theta(th), x_cond, y, N, cfg.coupling_reps, rng)
            rows.append(rep.as_row())
    header = list(rows[0])
    write_csv(out / "coupling.csv", header, [[r[h] for h in header] for r in rows])
    write_manifest(out, "couple-test", cfg, [seed])
    return rows


# -- simulate ---------------------------------------------------------------------------

def simulate(cfg: ExperimentConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    model, x, y = simulate_dataset(cfg)
    write_csv(out / "states.csv", [f"x{i}" for i in range(model.dim_x)], x)
    if cfg.model == "watertank":
        write_csv(out / "observations.csv", ["u", "y"], np.column_stack([model.u[: len(y)], y[:, 0]]))
    else:
        write_csv(out / "observations.csv", ["y"], y)
    write_manifest(out, "simulate", cfg, [cfg.data_seed], {"dataset": dataset_digest(y)})
    return x, y


# -- entry point ---------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="psaem", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("simulate", "learn", "compare", "couple-test"):
        p = sub.add_parser(name)
        p.add_argument("--config", action="append", required=True,
                       help="INI config or run manifest (repeat for compare)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed-offset", type=int, default=0)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfgs = [cfgmod.load(p) for p in args.config]
        if args.command != "compare" and len(cfgs) != 1:
            raise ConfigError(f"{args.command} takes exactly one --config")
        if args.command == "simulate":
            simulate(cfgs[0], out)
        elif args.command == "learn":
            learn(cfgs[0], out, args.seed_offset, args.threads)
        elif args.command == "compare":
            compare(cfgs, out, args.seed_offset, args.threads)
        else:
            couple_test(cfgs[0], out, args.seed_offset)
    except Exception as e:  # noqa: BLE001 - every failure becomes one machine-readable line
        print(json.dumps({"error": type(e).__name__, "message": str(e), "command": args.command}),
              file=sys.stderr)
        return 2 if isinstance(e, ConfigError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
