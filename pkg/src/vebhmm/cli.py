"""Command line entry point.

Every subcommand writes into a single output directory. Report payloads
contain no timing or thread information, so repeated runs with the same
inputs and seed are byte-identical; wall-clock timings go to a separate
``timing.json``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
import warnings
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import run_baseline
from .data import Ensemble, Hyperparameters, validate
from .empirical_bayes import VebConfig, veb_fit
from .errors import ConvergenceError, DataError, DegenerateMomentError, DomainError, NumericError
from .evaluation import (count_errors, crossval_heldout, effective_states, ensemble_bic,
                         pseudocounts, true_effective_states)
from .io import (SCHEMA_VERSION, dump_json, infer_format, load_json, read_traces, read_truth,
                 write_traces, write_truth)
from .simulate import SimScenario, sample_ensemble
from .vbhmm import FitConfig

__all__ = ["run_command", "main", "EXIT_OK", "EXIT_USAGE", "EXIT_DATA", "EXIT_NUMERIC"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
HISTOGRAM_BINS = 60
BASELINE_METHODS = ("vb_elbo", "ml_bic")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("VEBHMM_THREADS")
        if env is None:
            return 1
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"VEBHMM_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("thread count must be at least 1")
    return n


def _config_from(cls, d, what, **extra):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise UsageError(f"{what}: unknown field(s) {', '.join(unknown)}")
    kw = {**d, **{k: v for k, v in extra.items() if v is not None}}
    try:
        return cls(**kw)
    except TypeError as exc:
        raise UsageError(f"{what}: {exc}") from None


def _load_config(path, what):
    if path is None:
        return {}
    d = load_json(path)
    if not isinstance(d, dict):
        raise UsageError(f"{what}: expected a JSON object")
    return d


def _split_fit_config(d, K, restarts, seed):
    veb_names = {f.name for f in fields(VebConfig)}
    fit_names = {f.name for f in fields(FitConfig)}
    unknown = sorted(set(d) - veb_names - fit_names)
    if unknown:
        raise UsageError(f"config: unknown field(s) {', '.join(unknown)}")
    veb = _config_from(VebConfig, {k: v for k, v in d.items() if k in veb_names and k != "K"},
                       "config", K=K, restarts=restarts, seed=seed)
    fit = _config_from(FitConfig, {k: v for k, v in d.items() if k in fit_names}, "config")
    return veb, fit


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_ensemble(path, fmt):
    ens = read_traces(path, fmt)
    problems = validate(ens)
    if problems:
        raise DataError("invalid ensemble: " + json.dumps(problems[:20]))
    return ens


def _envelope(kind, config):
    return {"schema": "vebhmm.report", "schema_version": SCHEMA_VERSION, "kind": kind,
            "generator": f"vebhmm {__version__}", "config": config}


def _histograms(ensemble: Ensemble, gammas=None):
    """Pooled density and, with `gammas`, per-state densities weighted by
    the state marginals, all on the same fixed-width bins."""
    x = ensemble.pooled()
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, HISTOGRAM_BINS + 1)
    width = np.diff(edges)
    counts, _ = np.histogram(x, bins=edges)
    out = {"edges": edges, "pooled_density": counts / (counts.sum() * width)}
    if gammas is not None:
        g = np.concatenate(gammas)
        dens, weights = [], []
        for k in range(g.shape[1]):
            w, _ = np.histogram(x, bins=edges, weights=g[:, k])
            tot = g[:, k].sum()
            dens.append(w / (tot * width) if tot > 0 else np.zeros_like(width))
            weights.append(tot / g.shape[0])
        out["state_density"] = dens
        out["state_weight"] = weights
    return out


def _write_timing(out, seconds, threads):
    dump_json({"seconds": round(seconds, 3), "threads": threads}, out / "timing.json")


def _outdir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    d = _load_config(args.scenario, "scenario")
    scen = _config_from(SimScenario, d, "scenario", seed=args.seed)
    out = _outdir(args.out)
    sim = sample_ensemble(scen)
    name = "traces." + args.format
    write_traces(sim.ensemble, out / name)
    write_truth(sim.truth, [t.id for t in sim.ensemble], out / "truth.jsonl")
    dump_json({**_envelope("simulation", {"scenario": scen.to_dict()}),
               "traces_file": name, "truth_file": "truth.jsonl",
               "psi_true": sim.psi_true.to_dict(),
               "k_eff_true": [true_effective_states(z, scen.K) for z in sim.truth.z]},
              out / "simulation.json")
    return EXIT_OK


def _veb_report(ensemble, res, veb_cfg, fit_cfg, traces_cfg):
    psi = res.psi_star
    per_trace = []
    for tr, p in zip(ensemble, res.posteriors):
        per_trace.append({
            "id": tr.id, "T": len(tr), "elbo": p.elbo,
            "k_eff": effective_states(p.gamma),
            "occupancy": p.gamma.mean(axis=0),
            "pseudocounts": pseudocounts(p, psi),
            "mean_state_means": p.hat_m,
        })
    L = res.elbo
    return {
        **_envelope("fit", {**traces_cfg, "veb": asdict(veb_cfg), "fit": asdict(fit_cfg)}),
        "psi_star": psi.to_dict(),
        "elbo": L,
        "elbo_history": res.elbo_history,
        "restart_elbos": res.restart_elbos,
        "best_restart": res.best_restart,
        "frozen_states": res.mstep_info[-1]["frozen"] if res.mstep_info else [],
        "metrics": {"ensemble_bic": ensemble_bic(L, veb_cfg.K, len(ensemble)),
                    "k_eff_mean": float(np.mean([t["k_eff"] for t in per_trace]))},
        "histograms": _histograms(ensemble, [p.gamma for p in res.posteriors]),
        "traces": per_trace,
    }


def _traces_config(args):
    fmt = args.format or infer_format(args.traces)
    return {"traces": str(args.traces), "format": fmt, "traces_sha256": _sha256(args.traces)}


def cmd_fit(args):
    threads = _threads(args)
    veb_cfg, fit_cfg = _split_fit_config(_load_config(args.config, "config"),
                                         args.states, args.restarts, args.seed)
    tcfg = _traces_config(args)
    ens = _load_ensemble(args.traces, tcfg["format"])
    out = _outdir(args.out)
    t0 = time.perf_counter()
    psi_init = None
    if args.psi_init is not None:
        try:
            psi_init = Hyperparameters.from_dict(load_json(args.psi_init))
        except (KeyError, TypeError) as exc:
            raise DataError(f"{args.psi_init}: malformed hyperparameters ({exc})") from None
        tcfg["psi_init"] = psi_init.to_dict()
    res = veb_fit(ens, veb_cfg, fit_cfg, psi_init=psi_init, threads=threads)
    dump_json(_veb_report(ens, res, veb_cfg, fit_cfg, tcfg), out / "report.json")
    _write_timing(out, time.perf_counter() - t0, threads)
    return EXIT_OK


def _baseline_payload(ens, b):
    return {
        "method": b.method,
        "traces": [{"id": tr.id, "T": len(tr), "selected_K": s.K,
                    "k_eff": effective_states(s.gamma), "scores": {str(k): v for k, v in s.scores.items()},
                    "state_means": s.means, "pseudocounts": xi}
                   for tr, s, xi in zip(ens, b.selections, b.xi)],
        "selected_K_counts": np.bincount(b.selected_K, minlength=max(b.selected_K) + 1)[1:],
    }


def cmd_baselines(args):
    threads = _threads(args)
    tcfg = _traces_config(args)
    ens = _load_ensemble(args.traces, tcfg["format"])
    methods = BASELINE_METHODS if args.method == "both" else (args.method,)
    out = _outdir(args.out)
    t0 = time.perf_counter()
    payload = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for m in methods:
            payload[m] = _baseline_payload(ens, run_baseline(ens, args.states, m, seed=args.seed,
                                                             threads=threads))
    dump_json({**_envelope("baselines", {**tcfg, "K": args.states, "seed": args.seed,
                                         "methods": list(methods)}),
               "results": payload}, out / "baselines.json")
    _write_timing(out, time.perf_counter() - t0, threads)
    return EXIT_OK


def _method_tables(fit_dir):
    """``{method: [trace dicts]}`` from whatever reports a fit directory holds."""
    fit_dir = Path(fit_dir)
    tables = {}
    if (fit_dir / "report.json").is_file():
        tables["veb"] = load_json(fit_dir / "report.json")["traces"]
    if (fit_dir / "baselines.json").is_file():
        for m, r in load_json(fit_dir / "baselines.json")["results"].items():
            tables[m] = r["traces"]
    if not tables:
        raise DataError(f"{fit_dir}: no report.json or baselines.json found")
    return tables


def _evaluate(tables, ids, truth):
    K = np.asarray(truth.xi0[0]).shape[0]
    k0 = {i: true_effective_states(z, K) for i, z in zip(ids, truth.z)}
    xi0 = dict(zip(ids, truth.xi0))
    out = {}
    for method, rows in tables.items():
        missing = [r["id"] for r in rows if r["id"] not in xi0]
        if missing:
            raise DataError(f"truth has no trace(s) {missing[:5]}")
        xi = [np.asarray(r["pseudocounts"], dtype=float) for r in rows]
        if xi[0].shape[0] != K:
            raise DataError(f"{method}: fitted K={xi[0].shape[0]} differs from true K={K}")
        rep = count_errors(xi, [xi0[r["id"]] for r in rows])
        dk = [abs(r["k_eff"] - k0[r["id"]]) for r in rows]
        out[method] = {**rep.to_dict(), "k_eff_abs_error_mean": float(np.mean(dk)),
                       "k_eff_abs_error": dk}
    return out


def cmd_evaluate(args):
    tables = _method_tables(args.fit)
    truth_dir = Path(args.truth)
    ids, truth = read_truth(truth_dir / "truth.jsonl" if truth_dir.is_dir() else truth_dir)
    out = _outdir(args.out or args.fit)
    res = _evaluate(tables, ids, truth)
    dump_json({**_envelope("evaluation", {"fit": str(args.fit), "truth": str(args.truth)}),
               "reports": res}, out / "errors.json")
    return EXIT_OK


def _parse_states(text):
    try:
        ks = [int(k) for k in str(text).split(",") if k.strip()]
    except ValueError:
        raise UsageError(f"--states: expected integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("--states: need positive integers")
    return ks


def cmd_crossval(args):
    threads = _threads(args)
    base = _load_config(args.config, "config")
    tcfg = _traces_config(args)
    ens = _load_ensemble(args.traces, tcfg["format"])
    if not 2 <= args.folds <= len(ens):
        raise UsageError("--folds must lie between 2 and the number of traces")
    out = _outdir(args.out)
    t0 = time.perf_counter()
    rows = []
    cfg_echo = None
    for K in _parse_states(args.states):
        veb_cfg, fit_cfg = _split_fit_config(base, K, args.restarts, args.seed)
        cfg_echo = {**asdict(veb_cfg), **asdict(fit_cfg)}
        cfg_echo.pop("K")
        full = veb_fit(ens, veb_cfg, fit_cfg, threads=threads)
        held = crossval_heldout(ens, K, args.folds, veb_cfg, fit_cfg, threads=threads)
        rows.append({"K": K, "elbo": full.elbo,
                     "ensemble_bic": ensemble_bic(full.elbo, K, len(ens)),
                     "k_eff_mean": float(np.mean([effective_states(p.gamma) for p in full.posteriors])),
                     "heldout_elbo_folds": held, "heldout_elbo": float(sum(held))})
    dump_json({**_envelope("crossval", {**tcfg, "folds": args.folds, "states": args.states,
                                        "settings": cfg_echo}),
               "rows": rows}, out / "crossval.json")
    _write_timing(out, time.perf_counter() - t0, threads)
    return EXIT_OK


SWEEP_KEYS = {"base", "K", "sigma_rel", "replicates", "restarts", "seed", "methods"}


def _sd(values):
    # sample sd; undefined (null) with fewer than two values
    return float(np.std(values, ddof=1)) if len(values) > 1 else None


def _cell_seed(seed, K, i_sigma, rep):
    return int(np.random.SeedSequence([seed, K, i_sigma, rep]).generate_state(1)[0])


def cmd_sweep(args):
    threads = _threads(args)
    grid = _load_config(args.scenario_grid, "scenario grid")
    unknown = sorted(set(grid) - SWEEP_KEYS)
    if unknown:
        raise UsageError(f"scenario grid: unknown field(s) {', '.join(unknown)}")
    base = dict(grid.get("base", {}))
    for k in ("K", "sigma_rel", "seed"):
        if k in base:
            raise UsageError(f"scenario grid: '{k}' belongs at the top level, not in 'base'")
    Ks = grid.get("K", [3])
    sigmas = grid.get("sigma_rel", [0.5])
    reps = int(grid.get("replicates", 5))
    seed = int(grid.get("seed", 0))
    methods = ["veb", *grid.get("methods", list(BASELINE_METHODS))]
    restarts = int(grid.get("restarts", VebConfig.__dataclass_fields__["restarts"].default))
    bad = [m for m in methods[1:] if m not in BASELINE_METHODS]
    if bad or reps < 1:
        raise UsageError(f"scenario grid: bad methods {bad} or replicates {reps}")
    out = _outdir(args.out)
    t0 = time.perf_counter()
    rows = []
    for K in Ks:
        for i_s, sig in enumerate(sigmas):
            per = {m: [] for m in methods}
            for rep in range(reps):
                s = _config_from(SimScenario, base, "scenario grid", K=K, sigma_rel=sig,
                                 seed=_cell_seed(seed, K, i_s, rep))
                sim = sample_ensemble(s)
                ids = [t.id for t in sim.ensemble]
                res = veb_fit(sim.ensemble, VebConfig(K=K, restarts=restarts, seed=rep), threads=threads)
                tables = {"veb": [{"id": t.id, "k_eff": effective_states(p.gamma),
                                   "pseudocounts": pseudocounts(p, res.psi_star)}
                                  for t, p in zip(sim.ensemble, res.posteriors)]}
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    for m in methods[1:]:
                        b = run_baseline(sim.ensemble, K, m, seed=rep, threads=threads)
                        tables[m] = [{"id": t.id, "k_eff": effective_states(sel.gamma),
                                      "pseudocounts": xi}
                                     for t, sel, xi in zip(sim.ensemble, b.selections, b.xi)]
                ev = _evaluate(tables, ids, sim.truth)
                for m in methods:
                    per[m].append(ev[m])
            row = {"K": K, "sigma_rel": sig, "replicates": reps}
            for m in methods:
                occ = [e["occupancy_error"] for e in per[m]]
                tr = [e["transition_error"] for e in per[m]]
                ke = [e["k_eff_abs_error_mean"] for e in per[m]]
                pooled_occ = [v for e in per[m] for v in e["per_trace_occupancy_error"] if v is not None]
                pooled_tr = [v for e in per[m] for v in e["per_trace_transition_error"] if v is not None]
                row[m] = {
                    "occupancy_error_mean": float(np.mean(occ)),
                    "occupancy_error_sd_replicates": _sd(occ),
                    "occupancy_error_sd_traces": _sd(pooled_occ),
                    "transition_error_mean": float(np.mean(tr)),
                    "transition_error_sd_replicates": _sd(tr),
                    "transition_error_sd_traces": _sd(pooled_tr),
                    "k_eff_abs_error_mean": float(np.mean(ke)),
                    "replicate_occupancy_error": occ,
                    "replicate_transition_error": tr,
                }
            rows.append(row)
    dump_json({**_envelope("sweep", {"grid": grid, "methods": methods}), "rows": rows},
              out / "sweep.json")
    with open(out / "sweep.tsv", "w", encoding="utf-8") as fh:
        cols = ["K", "sigma_rel"] + [f"{m}_{q}" for m in methods
                                     for q in ("occupancy_error", "transition_error", "k_eff_abs_error")]
        fh.write("\t".join(cols) + "\n")
        for r in rows:
            vals = [str(r["K"]), repr(float(r["sigma_rel"]))]
            for m in methods:
                vals += [f"{r[m]['occupancy_error_mean']:.6f}", f"{r[m]['transition_error_mean']:.6f}",
                         f"{r[m]['k_eff_abs_error_mean']:.6f}"]
            fh.write("\t".join(vals) + "\n")
    _write_timing(out, time.perf_counter() - t0, threads)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="vebhmm", description="Hierarchical HMM inference by variational empirical Bayes.")
    p.add_argument("--version", action="version", version=f"vebhmm {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, traces=True):
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $VEBHMM_THREADS or 1)")
        if traces:
            sp.add_argument("--traces", required=True, type=Path)
            sp.add_argument("--format", choices=("csv", "jsonl"), default=None,
                            help="trace file format (default: from suffix)")

    sp = sub.add_parser("simulate", help="sample a synthetic ensemble")
    sp.add_argument("--scenario", required=True, type=Path, help="JSON with SimScenario fields")
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    sp.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="variational empirical Bayes fit")
    common(sp)
    sp.add_argument("--states", "-K", required=True, type=int)
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--restarts", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--config", type=Path, default=None,
                    help="JSON with VebConfig/FitConfig fields")
    sp.add_argument("--psi-init", type=Path, default=None,
                    help="JSON hyperparameters to start from")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("baselines", help="independent-trace ML and VB pipelines")
    common(sp)
    sp.add_argument("--states", "-K", required=True, type=int)
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--method", choices=("both",) + BASELINE_METHODS, default="both")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_baselines)

    sp = sub.add_parser("evaluate", help="score fits against simulation truth")
    sp.add_argument("--fit", required=True, type=Path)
    sp.add_argument("--truth", required=True, type=Path)
    sp.add_argument("--out", type=Path, default=None, help="default: the fit directory")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("crossval", help="held-out ELBO by k-fold cross-validation")
    common(sp)
    sp.add_argument("--states", "-K", required=True, help="K or a comma-separated list")
    sp.add_argument("--folds", type=int, default=10)
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--restarts", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--config", type=Path, default=None)
    sp.set_defaults(func=cmd_crossval)

    sp = sub.add_parser("sweep", help="noise-grid accuracy study on simulated data")
    common(sp, traces=False)
    sp.add_argument("--scenario-grid", required=True, type=Path)
    sp.add_argument("--out", required=True, type=Path)
    sp.set_defaults(func=cmd_sweep)
    return p


def _fail(kind, message, code):
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def run_command(argv) -> int:
    """Run one CLI invocation and return its exit code."""
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        # --help and --version
        return int(exc.code or 0)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except DataError as exc:
        return _fail("data", str(exc), EXIT_DATA)
    except (NumericError, ConvergenceError, DegenerateMomentError) as exc:
        return _fail("numeric", str(exc), EXIT_NUMERIC)
    except DomainError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except OSError as exc:
        return _fail("data", str(exc), EXIT_DATA)
    except Exception as exc:  # noqa: BLE001
        return _fail("internal", f"{type(exc).__name__}: {exc}", 1)


def main():
    sys.exit(run_command(sys.argv[1:]))
