"""Command-line runner: ``selfavg run <config.json> [--out DIR] [--seed N] [--replicas N]``."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import estimators as est
from .config import ConfigError, ExperimentConfig, load
from .disciplines import HOOKS, check_memoryless_selfaveraging, check_violation

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
NEEDS_NO_OVERLOAD = ("kernel", "kernel_direct", "convolution", "expectation_v", "counting")


@dataclass(frozen=True)
class Grid:
    """One CSV: a coordinate column ("t" or "x") with values and standard errors."""

    name: str
    axis: str
    coords: np.ndarray
    values: np.ndarray
    stderr: np.ndarray


def _fmt(v: float) -> str:
    v = float(v)
    return repr(v) if np.isfinite(v) else "nan"


def emit_plot_grids(results, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for g in results:
        if g.axis not in ("t", "x"):
            raise ValueError(f"unknown axis {g.axis!r}")
        keep = np.ones(len(g.coords), bool) if g.axis == "t" else np.asarray(g.coords) >= 0
        path = out / f"{g.name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([g.axis, "value", "stderr"])
            for c, v, s in zip(np.asarray(g.coords)[keep], np.asarray(g.values)[keep],
                               np.asarray(g.stderr)[keep]):
                w.writerow([_fmt(c), _fmt(v), _fmt(s)])
        paths.append(path)
    return paths


def _tag(v: float) -> str:
    return f"{float(v):g}".replace("-", "m")


def _anchors(cfg: ExperimentConfig, p: dict) -> list[float]:
    if "anchors" in p:
        return [float(a) for a in p["anchors"]]
    lo, hi = cfg.window
    dx = cfg.grid.kernel_step
    start = lo + cfg.grid.x_max
    span = hi - start
    return [lo + dx * round((start + f * span - lo) / dx) for f in (0.5, 0.75, 1.0)]


def _rate_grid(name, e: est.RateEstimate) -> Grid:
    return Grid(name, "t", e.t, e.values, e.stderr)


def _kernel_grid(name, k: est.KernelEstimate) -> Grid:
    return Grid(name, "x", k.x, k.values, k.stderr)


def _run_check(name: str, cfg: ExperimentConfig, p: dict, grids: list):
    n = p.get("replicas")
    if name == "exit_rate":
        rep, e = est.check_exit_rate(cfg, n, p.get("target"), p.get("sigma"))
        lam = cfg.rate()(e.t)
        grids += [Grid("rate_lambda", "t", e.t, lam, np.zeros_like(lam)), _rate_grid("exit_rate", e)]
        return rep
    if name == "idle":
        started = time.perf_counter()
        u = np.atleast_1d(p.get("u", 0.5 * sum(cfg.window))).astype(float)
        tab = est.idle_farm(cfg, u, n, convention=p.get("convention"))
        grids.append(Grid("idle", "t", u, tab.values, tab.stderr))
        status, target = "reported", p.get("target")
        if target is not None:
            ok = np.all(np.abs(tab.values - target) <= 3 * tab.stderr)
            status = "pass" if ok else "fail"
        return est.IdentityReport("idle", status, tab.values, target, "3 sigma", tab.ids.size,
                                  time.perf_counter() - started,
                                  {"u": u, "stderr": tab.stderr, "convention": tab.convention})
    if name == "busy_density":
        started = time.perf_counter()
        u = float(p.get("u", cfg.window[0]))
        bd = est.estimate_busy_density(cfg, u, p.get("samples", n))
        grids.append(Grid(f"busy_density_u{_tag(u)}", "x", bd.x, bd.values, bd.stderr))
        status, target = "reported", p.get("target_mass")
        if target is not None:
            status = "pass" if abs(bd.mass - target) <= 3 * bd.mass_stderr else "fail"
        return est.IdentityReport("busy_density", status, bd.mass, target, "3 sigma",
                                  bd.n_samples, time.perf_counter() - started,
                                  {"u": u, "mass_stderr": bd.mass_stderr})
    if name == "kernel":
        out = est.check_kernel_mass(cfg, _anchors(cfg, p), p.get("samples", n), p.get("tolerance"))
        if isinstance(out, est.IdentityReport):
            return out
        rep, ks = out
        grids += [_kernel_grid(f"kernel_t{_tag(k.t)}", k) for k in ks]
        return rep
    if name == "kernel_direct":
        started = time.perf_counter()
        x = float(p.get("x", _anchors(cfg, {})[-1]))
        direct = est.estimate_kernel_direct(cfg, x, n)
        assembled = est.assemble_kernel(cfg, x, p.get("samples", n))
        joint = np.hypot(direct.stderr, assembled.stderr)
        diff = np.abs(direct.values - assembled.values)
        within = diff <= 3 * joint
        frac = float(within.mean())
        need = float(p.get("fraction", 0.95))
        grids += [_kernel_grid(f"kernel_direct_x{_tag(x)}", direct),
                  _kernel_grid(f"kernel_assembled_x{_tag(x)}", assembled)]
        return est.IdentityReport(
            "kernel_direct", "pass" if frac >= need else "fail",
            {"fraction_within_3sigma": frac, "direct_mass": direct.mass,
             "assembled_mass": assembled.mass},
            {"fraction_within_3sigma": need}, "joint 3 sigma", direct.n_samples,
            time.perf_counter() - started,
            {"x": x, "direct_mass_stderr": direct.mass_stderr,
             "assembled_mass_stderr": assembled.mass_stderr})
    if name == "convolution":
        rep, parts = est.check_convolution(
            cfg, p.get("t_range"), p.get("coarse_bin"), n, p.get("samples"),
            float(p.get("fraction", 0.95)), float(p.get("relative", 0.05)),
            float(p.get("b_floor", 0.1)))
        if parts is not None:
            rate_est, pred, pred_se, _ = parts
            grids += [_rate_grid("exit_rate_coarse", rate_est),
                      Grid("convolution", "t", rate_est.t, pred, pred_se)]
        return rep
    if name == "expectation_v":
        return est.expectation_v(cfg, p.get("x"), n, p.get("tolerance"))
    if name == "counting":
        return est.check_counting_identity(cfg, p.get("x"), p.get("T", (0.5, 1.0, 2.0)), n,
                                           p.get("tolerance"))
    if name == "causality":
        t = float(p.get("t", _anchors(cfg, {})[0]))
        return est.check_kernel_causality(cfg, t, float(p.get("factor", 2.0)),
                                          p.get("samples", n))
    if name == "violation":
        return check_violation(cfg, p)
    if name == "memoryless_probe":
        hook = p.get("hook", "shortest_job_first")
        if hook not in HOOKS:
            raise ConfigError(f"unknown memoryless hook {hook!r}")
        return check_memoryless_selfaveraging(hook, cfg, p.get("x"), n,
                                              float(p.get("coarse_bin", 0.5)))
    raise ConfigError(f"unknown check {name!r}")


def run_experiment(config_path, out: str | None = None, seed: int | None = None,
                   replicas: int | None = None, stream=None):
    """Run every configured check; returns (exit status, list of report dicts)."""
    stream = sys.stderr if stream is None else stream
    try:
        cfg = load(config_path)
    except ConfigError as exc:
        print(f"{config_path}:{exc}", file=stream)
        return EXIT_CONFIG, []
    except OSError as exc:
        print(f"{config_path}: {exc}", file=stream)
        return EXIT_CONFIG, []
    overrides = {}
    if seed is not None:
        if not 0 <= seed < 2**64:
            print("--seed must be a 64-bit unsigned integer", file=stream)
            return EXIT_CONFIG, []
        cfg = replace(cfg, master_seed=seed)
        overrides["master_seed"] = seed
    if replicas is not None:
        if replicas < 1:
            print("--replicas must be >= 1", file=stream)
            return EXIT_CONFIG, []
        checks = {k: {kk: vv for kk, vv in v.items() if kk not in ("replicas", "samples")}
                  for k, v in cfg.checks.items()}
        cfg = replace(cfg, replicas=replicas, checks=checks)
        overrides["replicas"] = replicas
    out_dir = out or os.environ.get("SELFAVG_OUT") or cfg.output_dir
    if out:
        overrides["output_dir"] = out

    load_report = cfg.load_report()
    for msg in load_report.warnings:
        print(f"warning: {msg}", file=stream)
    grids: list[Grid] = []
    reports = []
    for name, params in cfg.checks.items():
        if load_report.overloaded and name in NEEDS_NO_OVERLOAD:
            rep = est.IdentityReport(name, "skipped: overloaded", None, None, None, 0, 0.0,
                                     {"utilization": load_report.utilization})
            print(f"warning: {name} skipped, utilization {load_report.utilization:.3g} >= 1",
                  file=stream)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                try:
                    rep = _run_check(name, cfg, dict(params), grids)
                except ConfigError as exc:
                    print(f"{config_path}: {exc}", file=stream)
                    return EXIT_CONFIG, []
                except ValueError as exc:
                    print(f"{config_path}: check {name}: {exc}", file=stream)
                    return EXIT_CONFIG, []
        d = rep.to_dict()
        d["overrides"] = overrides
        reports.append(d)
        print(f"{name}: {rep.status}", file=stream)
    emit_plot_grids(grids, out_dir)
    with open(Path(out_dir) / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(reports, fh, indent=2)
        fh.write("\n")
    failed = any(r["status"] == "fail" for r in reports)
    return (EXIT_FAIL if failed else EXIT_OK), reports


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="selfavg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the checks listed in an experiment config")
    run.add_argument("config")
    run.add_argument("--out", help="output directory (overrides the config)")
    run.add_argument("--seed", type=int, help="master seed override")
    run.add_argument("--replicas", type=int, help="replica count override for every check")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    code, _ = run_experiment(args.config, args.out, args.seed, args.replicas)
    return code


if __name__ == "__main__":
    sys.exit(main())
