"""Command-line batch runner.

    stochastic-centroidal --config scenario.json [--mode all] [--seed N] [--out DIR]

Writes ``trajectory_<mode>.csv``, ``diagnostics_<mode>.csv`` per solve, plus
``montecarlo.csv`` for comparisons and always ``summary.json``.  Exit codes:
0 converged and written, 1 configuration error, 2 solver failure or
non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ScenarioConfig, load_config
from .gait import make_reference
from .scp import (
    NOMINAL,
    PYRAMID_ROWS,
    REACH_ROWS,
    STOCHASTIC,
    InfeasibleBackoffError,
    ScpError,
    scp_solve,
    tracking_policy,
    trajectory_defect,
)
from .uncertainty import CovarianceError, RiccatiError
from .validation import ValidationError
from .verify import compare

EXIT_OK, EXIT_CONFIG, EXIT_SOLVE = 0, 1, 2
MODES = ("nominal", "stochastic", "compare", "all")
_ALIASES = {"solve-nominal": "nominal", "solve-stochastic": "stochastic"}

DIAGNOSTIC_COLUMNS = ("iteration", "cost", "rho", "omega", "gamma", "defect", "slack",
                      "step", "accepted", "qp_iterations")


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    return "" if np.isnan(value) else repr(value)


def write_atomic(path: Path, text: str):
    """Write via a temporary sibling and ``os.replace`` so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def trajectory_columns(ee_names):
    cols = ["k", "time"]
    cols += [f"{q}_{a}" for q in ("c", "l", "kappa") for a in "xyz"]
    cols += [f"f_{n}_{a}" for n in ee_names for a in "xyz"]
    cols += [f"ratio_{n}" for n in ee_names]
    cols += [f"eta_{n}_{r}" for n in ee_names for r in PYRAMID_ROWS]
    cols += [f"eta_{n}_{r}" for n in ee_names for r in REACH_ROWS]
    return cols


def force_ratios(plan, controls):
    """Local tangential-to-vertical force ratio per step and foot (nan in swing)."""
    _, rotations, _, active = plan.arrays()
    forces = controls.reshape(plan.horizon, -1, 3)
    local = np.einsum("kiba,kib->kia", rotations, forces)
    ratio = np.linalg.norm(local[..., :2], axis=-1) / np.maximum(local[..., 2], 1e-9)
    return np.where(active, ratio, np.nan)


def trajectory_csv(plan, result, ee_names):
    n = plan.horizon
    ratios = force_ratios(plan, result.controls)
    eta_u = result.backoffs_u.reshape(n, -1)
    eta_x = result.backoffs_x.reshape(n, -1)
    _, _, _, active = plan.arrays()
    rows = []
    for k in range(n + 1):
        row = [k, k * plan.dt, *result.states[k]]
        if k < n:
            mask_u = np.repeat(active[k], 4)
            mask_x = np.repeat(active[k], 6)
            row += list(result.controls[k]) + list(ratios[k])
            row += list(np.where(mask_u, eta_u[k], np.nan))
            row += list(np.where(mask_x, eta_x[k], np.nan))
        else:
            row += [None] * (len(trajectory_columns(ee_names)) - len(row))
        rows.append(row)
    return _csv_text(trajectory_columns(ee_names), rows)


def diagnostics_csv(result):
    rows = [[rec[c] for c in DIAGNOSTIC_COLUMNS] for rec in result.diagnostics]
    return _csv_text(DIAGNOSTIC_COLUMNS, rows)


def montecarlo_csv(plan, comparison, ee_names):
    header = ["k", "time", "satisfaction_nominal", "satisfaction_stochastic"]
    header += [f"mean_ratio_nominal_{n}" for n in ee_names]
    header += [f"mean_ratio_stochastic_{n}" for n in ee_names]
    nom, sto = comparison.nominal, comparison.stochastic
    rows = []
    for k in range(plan.horizon):
        rows.append([k, k * plan.dt, nom.step_satisfaction[k], sto.step_satisfaction[k],
                     *nom.mean_ratio[k], *sto.mean_ratio[k]])
    return _csv_text(header, rows)


def _solve_summary(plan, params, result):
    ratios = force_ratios(plan, result.controls)
    return {
        "converged": bool(result.converged),
        "iterations": len(result.diagnostics),
        "accepted_iterations": int(result.n_accepted),
        "final_cost": result.diagnostics[-1]["cost"] if result.diagnostics else None,
        "defect": trajectory_defect(plan, params, result.states, result.controls),
        "slack_sum": float(result.slacks.sum()) if result.slacks is not None else None,
        "max_force_ratio": float(np.nanmax(ratios)),
        "max_backoff": float(result.backoffs_u.max()) if result.backoffs_u is not None else 0.0,
    }


def _solver_error_code(prefix, exc):
    if isinstance(exc, InfeasibleBackoffError):
        return f"solve.{prefix}.backoff_infeasible"
    if isinstance(exc, ScpError):
        kind = "infeasible" if exc.status == "primal_infeasible" else "qp_failure"
        return f"solve.{prefix}.{kind}"
    if isinstance(exc, RiccatiError):
        return f"solve.{prefix}.riccati"
    if isinstance(exc, CovarianceError):
        return f"solve.{prefix}.covariance"
    return f"solve.{prefix}.error"


def run(cfg: ScenarioConfig, mode: str, out_dir: Path, seed=None):
    """Run one scenario; returns ``(exit_code, summary_dict)`` and writes all files."""
    mode = _ALIASES.get(mode, mode)
    seed = cfg.seed if seed is None else int(seed)
    summary = {
        "schema_version": 1, "version": __version__, "scenario": cfg.name, "mode": mode,
        "seed": seed, "status": "ok", "errors": [], "solves": {}, "monte_carlo": None,
        "files": [],
    }
    try:
        params = cfg.robot_params()
        plan = cfg.contact_plan()
        model = cfg.uncertainty_model()
        weights = cfg.cost_weights()
        refs = make_reference(plan, params, cfg.gait.com_height)
        spec = cfg.disturbance(seed)
    except ConfigError as exc:
        return _fail(summary, out_dir, EXIT_CONFIG, exc.code, exc.message)
    except ValidationError as exc:
        return _fail(summary, out_dir, EXIT_CONFIG, f"config.{exc.field}.invalid", str(exc))
    summary["horizon"] = plan.horizon
    summary["dt"] = plan.dt

    wanted = {"nominal": (NOMINAL,), "stochastic": (STOCHASTIC,)}.get(mode, (NOMINAL, STOCHASTIC))
    results = {}
    for which in wanted:
        settings = cfg.scp_settings(which)
        try:
            res = scp_solve(plan, refs, params, model if which == STOCHASTIC else None,
                            weights, settings)
        except (InfeasibleBackoffError, ScpError, RiccatiError, CovarianceError) as exc:
            return _fail(summary, out_dir, EXIT_SOLVE, _solver_error_code(which, exc), str(exc))
        results[which] = res
        summary["solves"][which] = _solve_summary(plan, params, res)
        _emit(out_dir, f"trajectory_{which}.csv", trajectory_csv(plan, res, params.ee_names), summary)
        _emit(out_dir, f"diagnostics_{which}.csv", diagnostics_csv(res), summary)

    if len(results) == 2:
        nom, sto = results[NOMINAL], results[STOCHASTIC]
        settings = cfg.scp_settings(STOCHASTIC)
        comp = compare(plan, nom, sto, spec, params,
                       tracking_policy(plan, nom, params, settings),
                       sto.policy)
        summary["monte_carlo"] = {
            "n_rollouts": spec.n_rollouts,
            "contact_resample": spec.contact_resample,
            "nominal_satisfaction": comp.nominal.satisfaction,
            "stochastic_satisfaction": comp.stochastic.satisfaction,
            "delta": comp.delta,
            "delta_ci95": list(comp.delta_ci),
            "nominal_tracking_cost": comp.nominal.mean_tracking_cost,
            "stochastic_tracking_cost": comp.stochastic.mean_tracking_cost,
            "nominal_max_violation": float(comp.nominal.max_violation.max()),
            "stochastic_max_violation": float(comp.stochastic.max_violation.max()),
        }
        _emit(out_dir, "montecarlo.csv", montecarlo_csv(plan, comp, params.ee_names), summary)

    code = EXIT_OK
    for which, res in results.items():
        if not res.converged:
            summary["errors"].append({
                "code": f"solve.{which}.not_converged",
                "message": f"no convergence within {cfg.scp.max_iters} iterations",
            })
            code = EXIT_SOLVE
    if code != EXIT_OK:
        summary["status"] = "not_converged"
    _write_summary(out_dir, summary)
    return code, summary


def _emit(out_dir, name, text, summary):
    write_atomic(Path(out_dir) / name, text)
    summary["files"].append(name)


def _write_summary(out_dir, summary):
    write_atomic(Path(out_dir) / "summary.json", json.dumps(summary, indent=2) + "\n")


def _fail(summary, out_dir, code, err_code, message):
    summary["status"] = "error"
    summary["errors"].append({"code": err_code, "message": message})
    _write_summary(out_dir, summary)
    return code, summary


def build_parser():
    parser = argparse.ArgumentParser(
        prog="stochastic-centroidal",
        description="Nominal and chance-constrained centroidal trajectory optimization.",
    )
    parser.add_argument("--config", required=True, help="scenario JSON file")
    parser.add_argument("--mode", default="all", choices=MODES + tuple(_ALIASES),
                        help="which solves to run (compare and all run both plus Monte Carlo)")
    parser.add_argument("--seed", type=int, default=None, help="Monte-Carlo seed (overrides config)")
    parser.add_argument("--out", default=None, help="output directory (overrides config)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out) if args.out else None
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("config.seed.range", "seed must be an unsigned 64-bit integer")
        cfg = load_config(args.config)
    except ConfigError as exc:
        out_dir = out_dir or Path("out")
        summary = {"schema_version": 1, "version": __version__, "scenario": None,
                   "mode": args.mode, "seed": args.seed, "status": "error",
                   "errors": [{"code": exc.code, "message": exc.message}],
                   "solves": {}, "monte_carlo": None, "files": []}
        _write_summary(out_dir, summary)
        print(f"error: {exc.code}: {exc.message}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = out_dir or Path(cfg.output)
    code, summary = run(cfg, args.mode, out_dir, args.seed)
    for err in summary["errors"]:
        print(f"error: {err['code']}: {err['message']}", file=sys.stderr)
    if code == EXIT_OK:
        print(f"wrote {', '.join(summary['files'] + ['summary.json'])} to {out_dir}")
    return code


if __name__ == "__main__":
    sys.exit(main())
