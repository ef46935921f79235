"""Command-line surface.

Subcommands: ``analyze`` (trial CSV in, report out), ``simulate`` (grid
config in, metrics + plot data + figures out), ``theory`` (moment oracles),
and ``power`` (calibrated power comparison).  The CLI only parses arguments
and serializes results; every number comes from a library call.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DegenerateTwinVariance, WprocovaError
from .estimators import (
    METHOD_LABELS,
    METHOD_PROCOVA,
    METHOD_UNADJUSTED,
    METHOD_WPROCOVA,
    analyze_procova,
    analyze_unadjusted,
    analyze_weighted_procova,
    compare_methods,
    prospective_power,
)
from .io import config_digest, file_digest, fmt, ingest_csv
from .simulation import (
    SCENARIOS,
    SimulationConfig,
    expand_grid,
    run_grid_collecting,
)
from .theory import (
    asymptotic_sandwich,
    expected_gamma,
    log_linear_variance,
    prop3_limit_check,
    residual_moments,
    sample_joint,
    trial_design_generator,
    variance_reduction_eta,
)

_ANALYZERS = {
    METHOD_UNADJUSTED: analyze_unadjusted,
    METHOD_PROCOVA: analyze_procova,
}


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _metadata(seed, digest) -> dict:
    return {
        "tool": "wprocova",
        "version": __version__,
        "timestamp": _timestamp(),
        "seed": seed,
        "config_digest": digest,
    }


def _emit_json(payload: dict, out: str | None):
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _result_dict(res, warnings=()):
    sked = None
    if res.skedastic is not None:
        sked = {
            "gamma0": res.skedastic.gamma0,
            "gamma1": res.skedastic.gamma1,
            "r_squared": res.skedastic.r_squared,
            "clamped_count": res.skedastic.clamped_count,
        }
    return {
        "method": res.method,
        "label": METHOD_LABELS[res.method],
        "effect_estimate": res.effect_estimate,
        "hc1_variance": res.hc1_variance,
        "test_statistic": res.test_statistic,
        "p_value": res.p_value,
        "ci_low": res.ci_low,
        "ci_high": res.ci_high,
        "n_used": res.n_used,
        "skedastic": sked,
        "warnings": list(warnings),
    }


# ---------------------------------------------------------------- analyze


def cmd_analyze(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    known = (METHOD_UNADJUSTED, METHOD_PROCOVA, METHOD_WPROCOVA)
    for m in methods:
        if m not in known:
            raise WprocovaError(f"unknown method {m!r}; choose from {', '.join(known)}")
    if not methods:
        raise WprocovaError("no methods requested")

    ingest = ingest_csv(args.csv)
    data = ingest.data
    warnings = []
    if ingest.dropped_count:
        warnings.append(f"dropped {ingest.dropped_count} row(s) with missing outcome")

    results = []
    per_method_warnings = {}
    for method in methods:
        if method == METHOD_WPROCOVA:
            try:
                res = analyze_weighted_procova(
                    data, alpha=args.alpha, iterations=args.iterations,
                    reference=args.reference,
                )
                if res.skedastic.clamped_count:
                    per_method_warnings[method] = [
                        f"{res.skedastic.clamped_count} squared residual(s) clamped at the floor"
                    ]
                if res.skedastic.gamma1 < 0:
                    per_method_warnings.setdefault(method, []).append(
                        "negative fitted variance slope: low-precision participants "
                        "receive more weight"
                    )
            except DegenerateTwinVariance:
                # Constant twin variances carry no weighting information; fall
                # back to unit weights, which reproduces the unweighted fit.
                fallback = analyze_procova(data, alpha=args.alpha, reference=args.reference)
                res = replace(fallback, method=METHOD_WPROCOVA)
                per_method_warnings[method] = [
                    "degenerate twin variance: weights disabled, results equal "
                    "the unweighted adjusted analysis"
                ]
        else:
            res = _ANALYZERS[method](data, alpha=args.alpha, reference=args.reference)
        results.append(res)

    baseline = METHOD_UNADJUSTED if METHOD_UNADJUSTED in methods else methods[0]
    comparison = compare_methods(results, baseline=baseline)

    base_var = next(r for r in results if r.method == baseline).hc1_variance
    power_rows = []
    if base_var > 0.0:
        for res in results:
            pair = prospective_power(base_var, res.hc1_variance, effect=1.0,
                                     alpha=args.alpha, baseline_power=args.baseline_power)
            power_rows.append({
                "method": res.method,
                "candidate_power": pair.candidate_power,
                "boost_pct": 100.0 * pair.boost,
            })
    else:
        warnings.append("baseline variance is zero; prospective power not computed")

    invocation = {
        "alpha": args.alpha,
        "iterations": args.iterations,
        "methods": methods,
        "reference": args.reference,
        "baseline_power": args.baseline_power,
        "csv_sha256": file_digest(args.csv),
    }
    report = {
        "metadata": _metadata(None, config_digest(invocation)),
        "input": {
            "csv": str(args.csv),
            "n_rows": ingest.n_rows,
            "dropped_missing_outcome": ingest.dropped_count,
            "n_used": data.n,
            "log_twin_variance_column": ingest.used_log_variance,
            **{k: v for k, v in invocation.items() if k != "csv_sha256"},
        },
        "results": [
            _result_dict(r, per_method_warnings.get(r.method, [])) for r in results
        ],
        "comparison": {
            "baseline": comparison.baseline,
            "rows": [asdict(row) for row in comparison.rows],
        },
        "prospective_power": {
            "baseline": baseline,
            "baseline_power": args.baseline_power,
            "rows": power_rows,
        },
        "warnings": warnings,
    }
    _emit_json(report, args.out)

    print(f"n = {data.n} (dropped {ingest.dropped_count} of {ingest.n_rows} rows)")
    header = f"{'method':<18}{'estimate':>12}{'HC1 var':>12}{'p-value':>10}{'95% CI':>26}"
    print(header)
    for res in results:
        ci = f"[{res.ci_low:.4g}, {res.ci_high:.4g}]"
        print(f"{METHOD_LABELS[res.method]:<18}{res.effect_estimate:>12.4g}"
              f"{res.hc1_variance:>12.4g}{res.p_value:>10.4g}{ci:>26}")
    for w in warnings:
        print(f"warning: {w}")
    for ws in per_method_warnings.values():
        for w in ws:
            print(f"warning: {w}")

    if args.out and not args.no_figures:
        from .figures import analysis_forest_figure

        fig_path = Path(args.out).with_suffix(".png")
        analysis_forest_figure(results, fig_path)
        print(f"wrote {fig_path}")
    return 0


# ---------------------------------------------------------------- simulate

_SCALAR_FIELDS = ("beta0", "beta1", "beta2", "gamma0", "gamma1", "gamma2",
                  "tau1_sq", "tau2_sq", "tau3_sq")


def _require_number(value, pointer):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(pointer, f"expected a number, got {type(value).__name__}")
    return float(value)


def _require_int(value, pointer, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(pointer, f"expected an integer, got {type(value).__name__}")
    if minimum is not None and value < minimum:
        raise ConfigError(pointer, f"must be >= {minimum}, got {value}")
    return value


def _axis(spec, name, parse):
    """Normalize a scalar-or-list config entry into a value list."""
    if name not in spec:
        return None
    value = spec[name]
    if isinstance(value, list):
        if not value:
            raise ConfigError(f"/{name}", "axis list must be nonempty")
        return [parse(v, f"/{name}/{i}") for i, v in enumerate(value)]
    return [parse(value, f"/{name}")]


def parse_grid_config(spec: dict, seed_override=None):
    """Validate a grid configuration dict and expand it into cells."""
    if not isinstance(spec, dict):
        raise ConfigError("", "configuration must be a JSON object")
    allowed = {"seed", "alpha", "replications", "scenario", "n", *_SCALAR_FIELDS}
    for key in spec:
        if key not in allowed:
            raise ConfigError(f"/{key}", "unknown configuration key")

    seed = seed_override
    if seed is None:
        if "seed" not in spec:
            raise ConfigError("/seed", "required (or pass --seed / WPROCOVA_SEED)")
        seed = _require_int(spec["seed"], "/seed")
    replications = _require_int(spec.get("replications", 10_000), "/replications", minimum=100)
    alpha = _require_number(spec.get("alpha", 0.05), "/alpha")
    if not (0.0 < alpha < 1.0):
        raise ConfigError("/alpha", f"must be in (0, 1), got {alpha}")
    scenario = spec.get("scenario", "fixed_noise")
    if scenario not in SCENARIOS:
        raise ConfigError("/scenario", f"must be one of {', '.join(SCENARIOS)}")

    n_axis = _axis(spec, "n", lambda v, p: _require_int(v, p, minimum=4))
    if n_axis is None:
        raise ConfigError("/n", "required")
    axes = {"n": n_axis}
    for name in _SCALAR_FIELDS:
        values = _axis(spec, name, _require_number)
        if values is not None:
            axes[name] = values

    base = SimulationConfig(n=n_axis[0], scenario=scenario, replications=replications,
                            seed=seed, alpha=alpha)
    cells = expand_grid(base, axes)
    for i, cell in enumerate(cells):
        try:
            cell.validate()
        except WprocovaError as err:
            raise ConfigError(f"/cell/{i}", str(err)) from err
    return cells, seed


def _varying_axes(cells):
    fields = ("scenario", "n", "beta1", "beta2", "gamma0", "gamma1", "gamma2", "tau2_sq")
    return [f for f in fields if len({getattr(c.config, f) for c in cells}) > 1]


def cmd_simulate(args) -> int:
    with open(args.config, encoding="utf-8") as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError("", f"invalid JSON: {err}") from err

    seed_override = args.seed
    if seed_override is None and os.environ.get("WPROCOVA_SEED"):
        seed_override = int(os.environ["WPROCOVA_SEED"])
    cells, seed = parse_grid_config(spec, seed_override)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outcomes = run_grid_collecting(cells, parallelism=args.parallelism)
    rows = [metrics for metrics, _ in outcomes]

    metrics_path = out_dir / "metrics.csv"
    config_fields = ("scenario", "n", "beta0", "beta1", "beta2", "gamma0", "gamma1",
                     "gamma2", "tau1_sq", "tau2_sq", "tau3_sq", "replications", "seed")
    metric_fields = ("bias", "type1_or_power", "coverage", "mean_pct_var_reduction",
                     "median_pct_var_reduction", "sd_pct_var_reduction",
                     "var_inflation_prob")
    with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["cell_index", *config_fields, "psi_sq", "ok", "failure", "error_count",
                  "replications_used", *metric_fields]
        for method in (METHOD_UNADJUSTED, METHOD_PROCOVA, METHOD_WPROCOVA):
            header += [f"{method}_bias", f"{method}_rejection_rate", f"{method}_coverage",
                       f"{method}_mean_hc1_variance", f"{method}_sd_estimate"]
        writer.writerow(header)
        for i, m in enumerate(rows):
            record = [i]
            for f in config_fields:
                value = getattr(m.config, f)
                record.append(fmt(value) if isinstance(value, float) else value)
            record.append(fmt(m.config.resolved_psi_sq()) if m.ok else "")
            record += [int(m.ok), m.failure or "", m.error_count, m.replications_used]
            record += [fmt(getattr(m, f)) for f in metric_fields]
            for method in (METHOD_UNADJUSTED, METHOD_PROCOVA, METHOD_WPROCOVA):
                s = m.methods.get(method)
                record += ([fmt(s.bias), fmt(s.rejection_rate), fmt(s.coverage),
                            fmt(s.mean_hc1_variance), fmt(s.sd_estimate)]
                           if s else ["", "", "", "", ""])
            writer.writerow(record)

    plot_path = out_dir / "plot_data.csv"
    with open(plot_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_index", "scenario", "n", "gamma1", "gamma2",
                         "replication", "pct_var_reduction"])
        for i, (m, pct) in enumerate(outcomes):
            cfg = m.config
            for r, value in enumerate(pct):
                if not np.isnan(value):
                    writer.writerow([i, cfg.scenario, cfg.n, fmt(cfg.gamma1),
                                     fmt(cfg.gamma2), r, fmt(value)])

    report = {
        "metadata": _metadata(seed, config_digest(spec | {"seed": seed})),
        "config": spec,
        "cells": [
            {
                "cell_index": i,
                "config": asdict(m.config),
                "ok": m.ok,
                "failure": m.failure,
                "error_count": m.error_count,
                "replications_used": m.replications_used,
                "bias": m.bias,
                "type1_or_power": m.type1_or_power,
                "coverage": m.coverage,
                "mean_pct_var_reduction": m.mean_pct_var_reduction,
                "median_pct_var_reduction": m.median_pct_var_reduction,
                "var_inflation_prob": m.var_inflation_prob,
                "methods": {k: asdict(v) for k, v in m.methods.items()},
            }
            for i, m in enumerate(rows)
        ],
    }
    _emit_json(report, str(out_dir / "report.json"))

    if not args.no_figures:
        from .figures import variance_reduction_figure

        varying = _varying_axes(rows)
        groups = []
        for m, pct in outcomes:
            label = ", ".join(f"{f}={getattr(m.config, f)}" for f in varying) or "cell 0"
            groups.append((label, pct))
        fig_path = out_dir / "variance_reduction.png"
        variance_reduction_figure(groups, fig_path)
        print(f"wrote {fig_path}")

    failed = sum(not m.ok for m in rows)
    print(f"wrote {metrics_path} ({len(rows)} cells, {failed} failed) and {plot_path}")
    return 0


# ---------------------------------------------------------------- theory


def _load_design(path):
    """Design CSV: columns v0..vK, sigma2, optional log_s2."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        v_cols = sorted((c for c in fields if c.startswith("v") and c[1:].isdigit()),
                        key=lambda c: int(c[1:]))
        if not v_cols:
            raise WprocovaError("design file needs columns v0, v1, ... for the design matrix")
        if "sigma2" not in fields:
            raise WprocovaError("design file needs a sigma2 column")
        rows = list(reader)
    V = np.array([[float(r[c]) for c in v_cols] for r in rows])
    sigma2 = np.array([float(r["sigma2"]) for r in rows])
    log_s2 = None
    if rows and "log_s2" in fields:
        log_s2 = np.array([float(r["log_s2"]) for r in rows])
    return V, sigma2, log_s2


def cmd_theory_residual_moments(args) -> int:
    V, sigma2, _ = _load_design(args.design)
    mom = residual_moments(V, sigma2)
    _emit_json({
        "n": int(V.shape[0]),
        "variances": mom.variances.tolist(),
        "covariances": mom.covariances.tolist(),
        "sq_covariances": mom.sq_covariances.tolist(),
        "log_sq_means": mom.log_sq_means.tolist(),
        "log_sq_variance": mom.log_sq_variance,
    }, args.out)
    return 0


def cmd_theory_expected_gamma(args) -> int:
    V, sigma2, log_s2 = _load_design(args.design)
    if log_s2 is None:
        raise WprocovaError("design file needs a log_s2 column for expected-gamma")
    g0, g1 = expected_gamma(V, log_s2, sigma2)
    _emit_json({"expected_gamma0": g0, "expected_gamma1": g1}, args.out)
    return 0


def cmd_theory_variance_reduction(args) -> int:
    sample = sample_joint(args.draws, gamma0=args.gamma0, gamma1=args.gamma1,
                          psi_sq=args.psi_sq, tau2_sq=args.tau2_sq, seed=args.seed)
    G = log_linear_variance(args.gamma0, args.gamma1)
    eta = variance_reduction_eta(sample, G)
    sandwich = asymptotic_sandwich(sample, G)
    _emit_json({
        "draws": args.draws,
        "eta": eta,
        "pct_reduction_eta": 100.0 * eta,
        "sandwich_treatment_ratio": sandwich.treatment_variance_ratio,
        "pct_reduction_sandwich": 100.0 * (1.0 - sandwich.treatment_variance_ratio),
    }, args.out)
    return 0


def cmd_theory_prop3_check(args) -> int:
    n_grid = [int(v) for v in args.n_grid.split(",") if v.strip()]
    generator = trial_design_generator(gamma0=args.gamma0, gamma1=args.gamma1,
                                       psi_sq=args.psi_sq, tau2_sq=args.tau2_sq)
    rows = prop3_limit_check(generator, n_grid, seed=args.seed)
    _emit_json({
        "rows": [
            {
                "n": row.n,
                "expected_gamma0": row.expected_gamma0,
                "expected_gamma1": row.expected_gamma1,
                "limit_gamma0": row.limit_gamma0,
                "limit_gamma1": row.limit_gamma1,
                "gap_gamma1": row.gap_gamma1,
            }
            for row in rows
        ]
    }, args.out)
    return 0


# ---------------------------------------------------------------- power


def cmd_power(args) -> int:
    pair = prospective_power(args.baseline_var, args.candidate_var, args.effect,
                             alpha=args.alpha, baseline_power=args.baseline_power)
    _emit_json({
        "baseline_power": pair.baseline_power,
        "candidate_power": pair.candidate_power,
        "boost_pct": 100.0 * pair.boost,
    }, args.out)
    return 0


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wprocova",
                                     description="Weighted prognostic covariate adjustment")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="analyze a trial CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--iterations", type=int, default=1)
    p.add_argument("--methods", default="unadjusted,procova,wprocova")
    p.add_argument("--reference", choices=("z", "t"), default="z")
    p.add_argument("--baseline-power", type=float, default=0.8)
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="run a simulation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("theory", help="evaluate the moment oracles")
    tsub = p.add_subparsers(dest="theory_command", required=True)

    t = tsub.add_parser("residual-moments")
    t.add_argument("--design", required=True)
    t.add_argument("--out", default=None)
    t.set_defaults(func=cmd_theory_residual_moments)

    t = tsub.add_parser("expected-gamma")
    t.add_argument("--design", required=True)
    t.add_argument("--out", default=None)
    t.set_defaults(func=cmd_theory_expected_gamma)

    t = tsub.add_parser("variance-reduction")
    t.add_argument("--gamma0", type=float, default=0.0)
    t.add_argument("--gamma1", type=float, required=True)
    t.add_argument("--tau2-sq", type=float, default=0.5)
    t.add_argument("--psi-sq", type=float, default=1.0)
    t.add_argument("--draws", type=int, default=1_000_000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default=None)
    t.set_defaults(func=cmd_theory_variance_reduction)

    t = tsub.add_parser("prop3-check")
    t.add_argument("--n-grid", required=True, help="comma-separated sizes, e.g. 100,400,1600")
    t.add_argument("--gamma0", type=float, default=0.0)
    t.add_argument("--gamma1", type=float, default=0.0)
    t.add_argument("--tau2-sq", type=float, default=0.5)
    t.add_argument("--psi-sq", type=float, default=0.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", default=None)
    t.set_defaults(func=cmd_theory_prop3_check)

    p = sub.add_parser("power", help="calibrated prospective power comparison")
    p.add_argument("--baseline-var", type=float, required=True)
    p.add_argument("--candidate-var", type=float, required=True)
    p.add_argument("--effect", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--baseline-power", type=float, default=0.8)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_power)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except WprocovaError as err:
        payload = {"error": type(err).__name__, "message": str(err)}
        if isinstance(err, ConfigError):
            payload["pointer"] = err.pointer
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
