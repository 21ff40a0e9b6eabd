"""Command-line experiment runner: ``ergocon {constants,simulate,tail,estimate,verify} CONFIG``."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, Resolved, calibrate, load_config, resolve
from .mc import (
    bound_curve_prop_ci0,
    bound_curve_thm1,
    bound_curve_thm2,
    compare,
    deviation_ensemble,
    plot_data,
    subgaussian_slope_test,
    summary_dict,
    tail_from_values,
    write_report_csv,
)
from .model import invariant_density, pi
from .rng import derive_seed
from .sde import ObservationScheme, run_ensemble, simulate_path, write_path_binary, write_path_csv
from .stats import (
    AR1Spec,
    burkholder_check,
    drift_estimator_values,
    ito_decomposition_check,
    moment_check,
    poisson_solution,
)
from .testfn import make_kernel_fn

BUILD_ID = f"ergocon-v{__version__}"
DEFAULT_OUT = "ergocon-out"


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def provenance(res: Resolved) -> dict:
    return {
        "build": BUILD_ID,
        "config_hash": res.hash,
        "model_hash": res.model.spec_hash(),
        "constants_hash": res.table.table_hash(),
        "base_seed": res.cfg["mc"]["base_seed"],
        "scheme": res.scheme.as_dict(),
    }


def _verdict_lines(verdicts: dict) -> list[str]:
    return [f"{name:<28s} {'PASS' if ok else 'FAIL'}" for name, ok in verdicts.items()]


# subcommands


def run_constants(res: Resolved, out: Path, threads: int) -> dict:
    t = res.table
    ident = {
        "gamma_tau_quarter": abs(t.gamma * t.tau - 0.25) <= 1e-15 or not math.isfinite(t.tau),
        "gamma_star_tau_star_quarter": abs(t.gamma_star * t.tau_star - 0.25) <= 1e-15 or not math.isfinite(t.tau_star),
    }
    payload = {
        "provenance": provenance(res),
        "kernel": {"name": res.psi.name, "h": res.kernel.h, "x0": res.kernel.x0},
        "ergodicity": {"R": res.erg.R, "kappa": res.erg.kappa},
        "constants": t.as_dict(log_space=True),
        "verdicts": ident,
    }
    if res.schedule is not None:
        s = res.schedule
        payload["schedule"] = {"iota": s.iota, "l_T": s.l_T, "eps_T": s.eps_T, "delta_T": s.delta_T}
    write_json(out / "constants.json", payload)
    with open(out / "constants.csv", "w") as fh:
        fh.write("name,value\n")
        for k, v in t.as_dict(log_space=True).items():
            fh.write(f"{k},{v!r}\n")
    return ident


def run_simulate(res: Resolved, out: Path, threads: int) -> dict:
    mc = res.cfg["mc"]
    seeds = [derive_seed(mc["base_seed"], i) for i in range(mc["n_paths"])]
    files = []
    for i, s in enumerate(seeds):
        p = simulate_path(res.model, res.scheme, s)
        stem = f"path_{i:04d}"
        write_path_csv(p, out / f"{stem}.csv")
        write_path_binary(p, out / f"{stem}.bin")
        files.append({"index": i, "seed": s, "csv": f"{stem}.csv", "binary": f"{stem}.bin",
                      "integrator": p.integrator, "N": res.scheme.N})
    ok = {"paths_finite": True}
    write_json(out / "simulate.json", {"provenance": provenance(res), "paths": files, "verdicts": ok})
    return ok


def _z_grid(cfg_grid, start: float, sd: float, points: int, span: float) -> np.ndarray:
    if cfg_grid != "auto":
        return np.asarray(cfg_grid, dtype=float)
    return start + np.linspace(0.0, span * sd, points)


def run_tail(res: Resolved, out: Path, threads: int) -> dict:
    mc = res.cfg["mc"]
    phi = make_kernel_fn(res.kernel)
    dens = invariant_density(res.model)
    pi_phi = pi(dens, phi)
    stats_wanted = mc["statistics"]
    ens = deviation_ensemble(res.model, phi, res.scheme, mc["n_rep"], mc["base_seed"], pi_phi,
                             continuous="Delta_T" in stats_wanted, threads=threads)
    verdicts, records = {}, {}
    for stat in stats_wanted:
        if stat == "D_T":
            scaled = ens.D_T / math.sqrt(res.scheme.N)
            sd = float(np.std(scaled))
            if res.schedule is not None:
                rule = "a*T"
                grid = np.asarray(mc["a_grid"], dtype=float) if "a_grid" in mc else _z_grid(
                    "auto", res.table.z0_star / res.schedule.l_T, float(np.std(ens.D_T / res.scheme.T)),
                    mc["z_points"], mc["z_sd_span"])
                report = tail_from_values(ens.D_T, grid, rule, res.scheme, stat)
                bound, label = bound_curve_thm2(res.table, res.schedule, grid), "thm2"
                informative = tail_from_values(ens.D_T, np.linspace(0, mc["z_sd_span"] * float(np.std(ens.D_T / res.scheme.T)), 25),
                                               rule, res.scheme, stat)
            else:
                rule = "z*sqrtN"
                grid = _z_grid(mc["z_grid"], res.table.z0, sd, mc["z_points"], mc["z_sd_span"])
                report = tail_from_values(ens.D_T, grid, rule, res.scheme, stat)
                bound, label = bound_curve_thm1(res.table, grid), "thm1"
                informative = tail_from_values(ens.D_T, np.linspace(0, mc["z_sd_span"] * sd, 25), rule, res.scheme, stat)
        else:
            sd = float(np.std(ens.Delta_T))
            rule = "z"
            grid = _z_grid(mc["z_grid"], 0.0, sd, mc["z_points"], mc["z_sd_span"])
            report = tail_from_values(ens.Delta_T, grid, rule, res.scheme, stat)
            bound, label = bound_curve_prop_ci0(res.table.kappa0, grid), "prop_ci0"
            informative = tail_from_values(ens.Delta_T, np.linspace(0, mc["z_sd_span"] * sd, 25), rule, res.scheme, stat)
        report = report.with_bound(bound)
        summary = compare(report, bound)
        slope = subgaussian_slope_test(informative)
        verdicts[f"{stat}_{label}_bound"] = summary.passed
        verdicts[f"{stat}_subgaussian_slope"] = slope.positive
        write_report_csv(report, out / f"tail_{stat}.csv")
        records[stat] = {
            "report": report.as_dict(),
            "compare": summary_dict(summary),
            "bound_source": label,
            "slope_test": {"slope": slope.slope, "stderr": slope.stderr, "lower95": slope.lower95,
                           "n_points": slope.n_points},
            "plot_data": plot_data(report),
        }
    write_json(out / "tail.json", {"provenance": provenance(res), "pi_phi": pi_phi, "statistics": records,
                                   "verdicts": verdicts})
    return verdicts


def run_estimate(res: Resolved, out: Path, threads: int) -> dict:
    mc = res.cfg["mc"]
    kernel = make_kernel_fn(res.kernel)
    dens = invariant_density(res.model)
    pi_k = pi(dens, kernel)
    scheme = res.scheme
    if res.model.is_exact_gaussian:
        scheme = ObservationScheme(scheme.T, scheme.delta, 1)
    ens = run_ensemble(res.model, scheme, mc["n_rep"], mc["base_seed"], threads=threads)
    num, den = drift_estimator_values(ens.observations, ens.y0, kernel, scheme.delta)
    errors = [{"replication": int(i), "error": "no mass near x0"} for i in np.flatnonzero(den == 0)]
    with np.errstate(invalid="ignore", divide="ignore"):
        est = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    target = float(res.model.drift(np.array([res.kernel.x0]))[0])
    hit = np.abs(est - target) < mc["tolerance"]
    conc = np.abs(den - pi_k * scheme.T) <= mc["eps"] * scheme.T
    verdicts = {"estimator_accuracy": float(np.mean(hit)) >= 0.90,
                "denominator_concentration": float(np.mean(conc)) >= 0.95}
    payload = {
        "provenance": provenance(res),
        "x0": res.kernel.x0,
        "h": res.kernel.h,
        "true_drift": target,
        "pi_kernel": pi_k,
        "estimate_mean": float(np.nanmean(est)) if np.any(den > 0) else None,
        "estimate_sd": float(np.nanstd(est)) if np.any(den > 0) else None,
        "fraction_within_tolerance": float(np.mean(hit)),
        "fraction_denominator_concentrated": float(np.mean(conc)),
        "errors": errors,
        "verdicts": verdicts,
    }
    write_json(out / "estimate.json", payload)
    with open(out / "estimate.csv", "w") as fh:
        fh.write("replication,estimate,denominator\n")
        for i, (e, d) in enumerate(zip(est, den)):
            fh.write(f"{i},{e:.17g},{d:.17g}\n")
    return verdicts


def run_verify(res: Resolved, out: Path, threads: int) -> dict:
    v = res.cfg["verify"]
    base = res.cfg["mc"]["base_seed"]
    phi = make_kernel_fn(res.kernel)
    dens = invariant_density(res.model)
    r_bound = v.get("r_bound_override", res.table.r)
    sol = poisson_solution(res.model, dens, phi, r_bound=r_bound)
    grid = sol.eval_grid()
    resid = float(np.max(sol.residual(grid)))
    sup_v = sol.sup_abs(grid)
    checks, details = {}, {}
    checks["poisson_ode_residual"] = resid < 1e-5
    checks["poisson_sup_bound"] = sup_v <= r_bound
    details["poisson"] = {"max_residual": resid, "sup_v": sup_v, "r_bound": r_bound}

    sc = ObservationScheme(10.0, 0.1, 64)
    r64, r16 = [], []
    for i in range(v["ito_paths"]):
        p = simulate_path(res.model, sc, derive_seed(base, 10_000 + i), keep_fine_grid=True)
        r64.append(ito_decomposition_check(res.model, p, phi, poisson=sol))
        r16.append(ito_decomposition_check(res.model, p, phi, poisson=sol, stride=4))
    ratio = float(np.mean(r16) / np.mean(r64))
    checks["ito_refinement_ratio"] = 1.5 <= ratio <= 2.8
    details["ito"] = {"mean_residual_16": float(np.mean(r16)), "mean_residual_64": float(np.mean(r64)), "ratio": ratio}

    details["moments"] = []
    for m in v["moment_orders"]:
        lines = moment_check(res.model, m, v["moment_times"], v["moment_n_rep"], derive_seed(base, 20_000 + m))
        ok = all(ln.flag for ln in lines) and all(ln.analytic_ok is not False for ln in lines)
        checks[f"moment_bound_m{m}"] = ok
        details["moments"] += [{"m": m, "t": ln.t, "empirical": ln.empirical, "ci": [ln.ci_low, ln.ci_high],
                                "bound": ln.bound, "analytic": ln.analytic} for ln in lines]

    flags, rows = [], []
    for a in (0.0, 0.9):
        for n in (5, 20):
            for p_ in (2, 4):
                b = burkholder_check(AR1Spec(a), "linear", p_, n, v["burkholder_n_rep"], derive_seed(base, 30_000 + n))
                flags.append(b.flag)
                rows.append({"a": a, "n": n, "p": p_, "lhs": b.lhs, "lhs_ci": list(b.lhs_ci), "rhs": b.rhs})
    checks["burkholder"] = all(flags)
    details["burkholder"] = rows

    if res.calibration is None:
        try:
            cal = calibrate(res.model, res.cfg)
            checks["ergodicity_calibration"] = True
            details["calibration"] = {"R_hat": cal.R_hat, "kappa_hat": cal.kappa_hat}
        except Exception as exc:  # calibration failure is a reported verdict
            checks["ergodicity_calibration"] = False
            details["calibration"] = {"error": str(exc)}
    else:
        checks["ergodicity_calibration"] = True
        details["calibration"] = {"R_hat": res.calibration.R_hat, "kappa_hat": res.calibration.kappa_hat}

    write_json(out / "verify.json", {"provenance": provenance(res), "details": details, "verdicts": checks})
    with open(out / "verify.csv", "w") as fh:
        fh.write("check,verdict\n")
        for k, ok in checks.items():
            fh.write(f"{k},{'PASS' if ok else 'FAIL'}\n")
    return checks


COMMANDS = {
    "constants": run_constants,
    "simulate": run_simulate,
    "tail": run_tail,
    "estimate": run_estimate,
    "verify": run_verify,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ergocon", description=__doc__)
    ap.add_argument("--version", action="version", version=BUILD_ID)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="override mc.base_seed")
        sp.add_argument("--out-dir", help="output directory (default: $ERGOCON_OUT_DIR or ./ergocon-out)")
        sp.add_argument("--threads", type=int, default=1, help="worker threads for ensembles")
        sp.add_argument("--reproducible", action="store_true",
                        help="fixed-order reductions; output is bit-stable across thread counts")
    return ap


def output_dir(arg: str | None, cfg: dict, command: str) -> Path:
    root = arg or cfg.get("output", {}).get("dir") or os.environ.get("ERGOCON_OUT_DIR") or DEFAULT_OUT
    return Path(root)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = load_config(args.config)
        if args.seed is not None:
            raw.setdefault("mc", {})["base_seed"] = args.seed
        res = resolve(raw)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = output_dir(args.out_dir, res.cfg, args.command)
    out.mkdir(parents=True, exist_ok=True)
    # ensembles are reassembled in replication order, so --reproducible holds for any thread count
    threads = max(1, args.threads)
    verdicts = COMMANDS[args.command](res, out, threads)
    for line in _verdict_lines(verdicts):
        print(line)
    return 0 if all(verdicts.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
