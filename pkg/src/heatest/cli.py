"""Command line harness.

Every subcommand is a function of (config, seed): it reads the TOML config,
applies ``--override`` items, writes its outputs into ``--out`` and finishes
with a ``manifest.json`` holding the config snapshot and output digests.

Exit codes: 0 ok, 1 runtime failure, 2 config error, 3 failed check.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import DEFAULTS, ConfigError, apply_override, build_estimator, build_model, load_config, parse_config
from .estimator import confidence_interval, estimate_from_sums
from .experiments import (
    Level,
    Plan,
    RunManifest,
    c_infinity_convergence,
    covariance_check,
    covariance_probes,
    profile_plan,
    profile_study,
    rate_plan,
    rate_study,
    replicate,
    resolve_threads,
    run_replications,
    tk_constant_fit,
    tk_hetero_fit,
)
from .grid import BinaryWriter, SeedSpec, open_binary
from .riemann import WindowSums
from .sim import iter_trajectory, static_noise_eta

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_RUNTIME", "EXIT_CONFIG", "EXIT_CHECK"]

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_CHECK = 0, 1, 2, 3

PROFILE_COLUMNS = ("delta", "x0", "theta_hat", "sd", "n_shifts", "n_ok", "ci_lo", "ci_hi", "theta_true")


class CheckFailed(RuntimeError):
    """A subcommand ran but its acceptance check did not hold."""


def _log(msg: str) -> None:
    print(f"[heatest] {msg}", file=sys.stderr, flush=True)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    return str(o)


def _progress(label: str):
    def cb(done, total):
        if done == total or done % max(1, total // 10) == 0:
            _log(f"{label}: {done}/{total}")

    return cb


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: dict, seed: int, threads: int, out: Path, manifest: RunManifest) -> None:
    model = build_model(cfg)
    grid = model.grid
    eps = float(cfg["noise"]["epsilon"])
    eta = static_noise_eta(eps, grid)
    sim = cfg["simulate"]
    spec = SeedSpec(seed, 0)
    t_stride = int(sim["csv_t_stride"]) or max(1, grid.nt // 100)
    x_stride = max(1, int(sim["csv_x_stride"]))
    keep = np.arange(0, grid.nt, t_stride)
    slice_x = np.empty((keep.size, grid.n_interior))
    slice_y = np.empty_like(slice_x)
    sig_path = out / "signal.hest"
    obs_path = out / "observation.hest"
    sig = BinaryWriter(sig_path, grid) if sim["write_signal"] else None
    static = spec.normal_blocks("static", grid.nt, grid.n_interior)
    with BinaryWriter(obs_path, grid) as obs:
        for row0, rows in iter_trajectory(model.theta, model.sigma, grid, seed=spec, noise_multiplier=model.noise_multiplier):
            r0, z = next(static)
            assert r0 == row0
            y = rows + eta * z
            if sig is not None:
                sig.write(rows)
            obs.write(y)
            m = rows.shape[0]
            sel = (keep >= row0) & (keep < row0 + m)
            slice_x[sel] = rows[keep[sel] - row0]
            slice_y[sel] = y[keep[sel] - row0]
    if sig is not None:
        sig.close()
        manifest.add_output(sig_path)
    manifest.add_output(obs_path)
    # CSV slices keep the time stamps of the thinned rows
    for name, vals in (("signal_slices.csv", slice_x), ("observation_slices.csv", slice_y)):
        if name.startswith("signal") and sig is None:
            continue
        path = out / name
        _write_slices(path, vals, grid.t[keep], grid.x, x_stride)
        manifest.add_output(path)
    _log(f"simulated nt={grid.nt} nx={grid.nx}, eta={eta:.4g}")


def _write_slices(path: Path, values: np.ndarray, t: np.ndarray, x: np.ndarray, x_stride: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "value"])
        for i in range(values.shape[0]):
            for j in range(0, values.shape[1], x_stride):
                w.writerow([repr(float(t[i])), repr(float(x[j])), repr(float(values[i, j]))])


def cmd_estimate(cfg: dict, seed: int, threads: int, out: Path, manifest: RunManifest, input_path: Optional[str]) -> None:
    eps = float(cfg["noise"]["epsilon"])
    est = build_estimator(cfg, eps)
    level = float(cfg["estimator"]["ci_level"])
    sigma = float(cfg["model"]["sigma"])
    if input_path is not None:
        grid, data = open_binary(input_path)
        if data.shape[0] != grid.nt:
            raise ValueError(f"{input_path}: holds {data.shape[0]} of {grid.nt} rows")
        ys = WindowSums(grid, est.kernel, est.scale, derivatives=est.derivatives, min_cells=est.min_cells, min_steps=est.min_steps)
        for row0 in range(0, grid.nt, 1000):
            ys.add(row0, np.asarray(data[row0 : row0 + 1000]))
        rep = estimate_from_sums(ys, est)
        ci_error = None
        try:
            confidence_interval(rep, level, sigma=sigma or 1.0, T=grid.T)
        except ArithmeticError as exc:
            ci_error = f"{type(exc).__name__}: {exc}"
        report = rep.to_dict()
        if ci_error:
            report["ci_error"] = ci_error
        report["source"] = str(input_path)
    else:
        model = build_model(cfg)
        plan = Plan(levels=(Level(eps, {"estimate": est}, ("estimate",)),), diagnostics=bool(cfg["model"]["sigma"]))
        res = replicate(model, plan, SeedSpec(seed, 0))
        report = res["levels"][0]["results"]["estimate"]
        if "error" in report:
            raise ValueError(report["error"])
        report["source"] = "simulated"
    path = out / "estimate.json"
    _write_json(path, report)
    manifest.add_output(path)
    ci = report.get("ci") or {}
    _log(f"theta_hat({est.x0:g}) = {report['theta_hat']:.6g}  CI [{ci.get('lower', math.nan):.6g}, {ci.get('upper', math.nan):.6g}]")


def cmd_rate_study(cfg: dict, seed: int, threads: int, out: Path, manifest: RunManifest) -> None:
    model = build_model(cfg)
    st = cfg["study"]
    modes = tuple(st["modes"])
    n = int(st["replications"])
    plan = rate_plan(st["deltas"], st["x0"], derivatives=cfg["estimator"]["derivatives"], modes=modes)
    results = run_replications(model, plan, n, seed, threads, progress=_progress("rate-study"))
    study = rate_study(model, st["deltas"], n, seed, modes=modes, results=results, x0=st["x0"])
    failed = []
    for mode in modes:
        r = study[mode]
        cpath = out / f"rate_{mode}.csv"
        with open(cpath, "w") as fh:
            fh.write(r.to_csv())
        jpath = out / f"rate_{mode}.json"
        _write_json(jpath, r.to_dict())
        manifest.add_output(cpath)
        manifest.add_output(jpath)
        lo, hi = st[f"{mode}_band"]
        ok = lo <= r.slope <= hi
        _log(f"{mode}: slope {r.slope:.3f} +- {r.slope_se:.3f} (band [{lo}, {hi}])")
        if st["check"] and not ok:
            failed.append(f"{mode} slope {r.slope:.3f} outside [{lo}, {hi}]")
    if failed:
        raise CheckFailed("; ".join(failed))


def cmd_profile(cfg: dict, seed: int, threads: int, out: Path, manifest: RunManifest) -> None:
    model = build_model(cfg, table="profile")
    pr = cfg["profile"]
    deltas = pr["deltas"]
    x0s = tuple(float(x) for x in pr["x0"])
    n = int(pr["replications"])
    plan = profile_plan(deltas, x0s, pr["h_rule"], cfg["estimator"]["derivatives"], ci=True)
    results = run_replications(model, plan, n, seed, threads, progress=_progress("profile"))
    study = profile_study(model, deltas, n, seed, x0s, results=results)
    path = out / "profile.csv"
    cols = PROFILE_COLUMNS if pr["diagnostic"] else PROFILE_COLUMNS[:-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for d in deltas:
            for row in study[d]["rows"]:
                row = dict(row, delta=d)
                w.writerow([_fmt(row[c]) for c in cols])
    manifest.add_output(path)
    summary = {str(d): {"mae": study[d]["mae"]} for d in deltas}
    spath = out / "profile_summary.json"
    _write_json(spath, summary)
    manifest.add_output(spath)
    for d in deltas:
        _log(f"delta={d:g}: mean absolute error {study[d]['mae']:.4g}")


def _covariance_part(cfg: dict, seed: int, threads: int) -> dict:
    oc = cfg["oracle"]
    model = build_model(cfg)
    if not model.theta.is_constant:
        raise ConfigError("'model.theta' must be constant for the covariance check")
    probes = covariance_probes(float(oc["covariance_delta"]))
    plan = Plan(probes=probes)
    results = run_replications(model, plan, int(oc["covariance_paths"]), seed, threads, progress=_progress("covariance"))
    rows = covariance_check(model, probes, results, int(oc["n_modes"]))
    for r in rows:
        _log(f"covariance {r['probe']}: ratio {r['ratio']:.4f}, z {r['z']:+.2f}")
    return {"probes": rows, "pass": all(r["pass"] for r in rows)}


def _tk_part(cfg: dict) -> dict:
    oc = cfg["oracle"]
    t = float(oc["tk_time"])
    const = tk_constant_fit(oc["tk_constant_deltas"], t=t)
    _log(f"trotter-kato constant: R^2 {const['r2']:.5f}")
    het = tk_hetero_fit(oc["tk_hetero_h"], float(oc["tk_hetero_delta"]), float(oc["tk_hetero_x0"]), t)
    _log(f"trotter-kato two-plateau: slope {het['slope']:.3f}")
    return {"constant": const, "two_plateau": het, "pass": bool(const["pass"] and het["pass"])}


def cmd_oracle_check(cfg: dict, seed: int, threads: int, out: Path, manifest: RunManifest) -> None:
    report = {"covariance": _covariance_part(cfg, seed, threads)}
    model = build_model(cfg)
    if model.theta.is_constant:
        cinf = c_infinity_convergence(model.theta.params["value"], model.sigma)
        _log(f"c_infinity: relative change {max(cinf['same']['rel_change'], cinf['lag']['rel_change']):.2e}")
        report["c_infinity"] = cinf
    report["trotter_kato"] = _tk_part(cfg)
    report["pass"] = all(v["pass"] for v in report.values() if isinstance(v, dict))
    path = out / "oracle_check.json"
    _write_json(path, report)
    manifest.add_output(path)
    if not report["pass"]:
        bad = [k for k, v in report.items() if isinstance(v, dict) and not v["pass"]]
        raise CheckFailed("failed: " + ", ".join(bad))


def cmd_tk_check(cfg: dict, seed: int, threads: int, out: Path, manifest: RunManifest) -> None:
    report = _tk_part(cfg)
    path = out / "tk_check.json"
    _write_json(path, report)
    manifest.add_output(path)
    if not report["pass"]:
        raise CheckFailed("trotter-kato check failed")


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "rate-study": cmd_rate_study,
    "profile": cmd_profile,
    "oracle-check": cmd_oracle_check,
    "tk-check": cmd_tk_check,
}


# ---------------------------------------------------------------------------
# entry point


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML config; defaults apply when omitted")
    common.add_argument("--seed", type=_u64, metavar="U64", help="master seed (overrides run.seed)")
    common.add_argument("--threads", type=_positive_int, metavar="N", help="worker threads (fallback: HEATEST_THREADS)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides run.out)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="set a dotted config key; repeatable")
    parser = argparse.ArgumentParser(prog="heatest", description="Local diffusivity estimation for the noisy stochastic heat equation.")
    parser.add_argument("--version", action="version", version=f"heatest {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "estimate":
            p.add_argument("--input", metavar="PATH", help="HEST1 observation file; simulates from the config when omitted")
    return parser


def _load(args) -> dict:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = parse_config({"model": copy.deepcopy(DEFAULTS["model"])})
    for item in args.override:
        apply_override(cfg, item)
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed
    if args.out is not None:
        cfg["run"]["out"] = args.out
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = _load(args)
        threads = args.threads if args.threads is not None else resolve_threads(None)
    except ConfigError as exc:
        print(f"heatest: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"heatest: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seed = int(cfg["run"]["seed"])
    out = Path(cfg["run"]["out"])
    manifest = RunManifest(args.command, cfg, seed)
    manifest.stamp_start()
    t0 = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        kw = {"input_path": args.input} if args.command == "estimate" else {}
        COMMANDS[args.command](cfg, seed, threads, out, manifest, **kw)
        code = EXIT_OK
    except ConfigError as exc:
        print(f"heatest: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailed as exc:
        print(f"heatest: check failed: {exc}", file=sys.stderr)
        code = EXIT_CHECK
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        print(f"heatest: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest.stamp_finish()
    manifest.write(out / "manifest.json")
    _log(f"{args.command} done in {time.perf_counter() - t0:.1f}s, outputs in {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
