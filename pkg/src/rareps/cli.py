"""Command-line front end: simulate, analyze, oracle, calibrate.

Settings come from command-line flags, then an optional JSON config file
(``--config``), then defaults; the effective settings are written next to
the outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Any, Mapping, Sequence

from .estimators import EstimatorOptions, crude, fit_propensity, ipw_estimate, regression_adjust
from .scenarios import (
    SCENARIO_IDS,
    CalibrationError,
    OtisTargets,
    Scenario,
    SearchConfig,
    build_scenario,
    calibrate_otis_marginals,
    marginal_or_oracle,
)
from .selection import ALL, CIE, ORACLE, PVAL, select_all, select_cie, select_oracle, select_pval
from .simharness import dumps_json, oracle_rng, run_experiment, spread_ranking, write_outputs
from .tabular import complete_case, load_schema_spec, read_dataset

logger = logging.getLogger("rareps")


class ConfigError(ValueError):
    """Invalid settings; reported as a usage error."""


DEFAULTS: dict[str, dict[str, Any]] = {
    "simulate": {
        "scenario": "I",
        "replicates": 10_000,
        "seed": 42,
        "workers": 1,
        "out_dir": "rareps-out",
        "cie_threshold": 0.10,
        "cie_scale": "ratio",
        "pval_alpha": 0.05,
        "ps_adjust_scale": "probability",
        "weight_truncation": None,
        "separation_policy": "complete",
        "latent_scale": "variance",
        "oracle_sample_size": 10**7,
    },
    "analyze": {
        "data": None,
        "schema": None,
        "pool": None,
        "oracle": None,
        "methods": "cie,all",
        "cie_threshold": 0.10,
        "cie_scale": "ratio",
        "pval_alpha": 0.05,
        "ps_adjust_scale": "probability",
        "weight_truncation": None,
        "separation_policy": "complete",
        "out": None,
    },
    "oracle": {
        "scenario": "I",
        "sample_size": 10**7,
        "seed": 42,
        "latent_scale": "variance",
        "out": None,
    },
    "calibrate": {
        "targets": None,
        "bounds": None,
        "out": None,
    },
}

OPTION_KEYS = ("cie_threshold", "cie_scale", "pval_alpha", "ps_adjust_scale", "weight_truncation",
               "separation_policy")


def effective_config(command: str, flags: Mapping[str, Any], config_path: str | None) -> dict[str, Any]:
    """Defaults, overridden by the config file, overridden by explicitly given flags."""
    settings = dict(DEFAULTS[command])
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        if command in doc and isinstance(doc[command], dict):
            doc = doc[command]
        unknown = set(doc) - set(settings)
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
        settings.update(doc)
    settings.update({k: v for k, v in flags.items() if v is not None and k in settings})
    _validate(command, settings)
    return settings


def _validate(command: str, s: Mapping[str, Any]):
    def positive_int(key, minimum=1):
        value = s[key]
        if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
            raise ConfigError(f"{key} must be an integer >= {minimum}")

    if command == "simulate":
        positive_int("replicates")
        positive_int("workers")
        positive_int("oracle_sample_size", 10**5)
        if not isinstance(s["seed"], int) or s["seed"] < 0:
            raise ConfigError("seed must be a nonnegative integer")
    if command == "oracle":
        positive_int("sample_size", 10**5)
        if not isinstance(s["seed"], int) or s["seed"] < 0:
            raise ConfigError("seed must be a nonnegative integer")
    if command in ("simulate", "oracle") and s["latent_scale"] not in ("variance", "sd"):
        raise ConfigError("latent_scale must be 'variance' or 'sd'")
    if command in ("simulate", "analyze"):
        try:
            options(s)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if command == "analyze":
        for key in ("data", "schema"):
            if not s[key]:
                raise ConfigError(f"analyze needs --{key}")
        methods = _split(s["methods"])
        bad = set(methods) - {ORACLE, CIE, PVAL, ALL}
        if bad or not methods:
            raise ConfigError(f"methods must be drawn from oracle, cie, pval, all (got {s['methods']!r})")
        if ORACLE in methods and not s["oracle"]:
            raise ConfigError("method 'oracle' needs --oracle")


def options(s: Mapping[str, Any]) -> EstimatorOptions:
    return EstimatorOptions(**{k: s[k] for k in OPTION_KEYS})


def _split(value) -> list[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return list(value)


def load_scenario(spec: str, latent_scale: str = "variance") -> Scenario:
    """A scenario id (I-IV) or a path to a scenario JSON file."""
    if spec in SCENARIO_IDS:
        return build_scenario(spec, {"latent_scale": latent_scale})
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"scenario must be one of {SCENARIO_IDS} or a scenario file, got {spec!r}")
    return Scenario.load(path)


# --- simulate --------------------------------------------------------------

def _pct(x: float) -> str:
    return "n/a" if x is None or math.isnan(x) else f"{100 * x:.2f}%"


def format_simulation_report(summary) -> str:
    ev = summary.events
    sd = "undefined" if math.isnan(ev["events_sd"]) else f"{ev['events_sd']:.1f}"
    lines = [
        f"Scenario {summary.scenario_id}: {summary.n_replicates} replicates, seed {summary.master_seed}",
        "",
        "Number of events        Average (SD)    None in unexposed   <=5 in unexposed",
        f"                        {ev['events_mean']:.1f} ({sd})"
        f"{_pct(ev['frac_zero_unexposed']):>20}{_pct(ev['frac_le5_unexposed']):>19}",
        "",
        "Selection   True pos.  False pos.  Incl.     Exact     Top five",
    ]
    for method in (CIE, PVAL):
        m = summary.selection_metrics.get(method)
        if m is None:
            lines.append(f"{method.upper():<12}(no non-degenerate runs)")
            continue
        top = ", ".join(f"{name} {100 * f:.2f}%" for name, f in m.top_frequencies[:5])
        lines.append(f"{method.upper():<12}{m.true_pos:<11.2f}{m.false_pos:<12.2f}{_pct(m.incl_rate):<10}"
                     f"{_pct(m.exact_rate):<10}{top}")
    lines += ["", "Estimator           median    IQR       mean      sd        infinite"]
    for name, s in summary.estimator_stats.items():
        lines.append(f"{name:<20}{s.quantiles[0.5]:<10.3f}{s.iqr:<10.3f}{s.mean:<10.3f}{s.sd:<10.3f}"
                     f"{_pct(s.frac_infinite)}")
    if summary.true_effects is not None:
        te = summary.true_effects
        lines += ["", f"True log OR: conditional {te.conditional_log_or:.4f}, marginal {te.marginal_log_or:.4f} "
                      f"(MC error {te.oracle_mc_error:.2g})"]
    if summary.n_replicates >= 1000:
        lines.append("Spread ranking (widest first): " + ", ".join(spread_ranking(summary)))
    return "\n".join(lines) + "\n"


def cmd_simulate(s: Mapping[str, Any]) -> int:
    scenario = load_scenario(s["scenario"], s["latent_scale"])
    out_dir = Path(s["out_dir"])
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".rareps-", dir=out_dir.parent))
    try:
        summary, records = run_experiment(scenario, s["replicates"], s["seed"], s["workers"], options(s),
                                          oracle_sample_size=s["oracle_sample_size"])
        write_outputs(summary, records, staging)
        (staging / "config.json").write_text(json.dumps({"command": "simulate", **s}, indent=2) + "\n")
        scenario.save(staging / "scenario.json")
        report = format_simulation_report(summary)
        (staging / "report.txt").write_text(report)
        out_dir.mkdir(exist_ok=True)
        for item in sorted(staging.rglob("*")):
            target = out_dir / item.relative_to(staging)
            if item.is_dir():
                target.mkdir(exist_ok=True)
            else:
                item.replace(target)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    sys.stdout.write(report)
    return 0


# --- analyze ---------------------------------------------------------------

def _cell(analysis) -> tuple[str, str]:
    if analysis.error:
        return "failed", analysis.error
    if math.isnan(analysis.log_or):
        return "undefined", ""
    if math.isinf(analysis.log_or):
        return ("∞ (separation)" if analysis.log_or > 0 else "0 (separation)"), ""
    ci = analysis.ci95
    second = f"({ci[0]:.2f}, {ci[1]:.2f})" if ci else "(CI unavailable)"
    return f"{analysis.odds_ratio:.2f}", second


def analyze_dataset(dataset, pool: Sequence[str], methods: Sequence[str], oracle: Sequence[str] = (),
                    opts: EstimatorOptions = EstimatorOptions()) -> list[dict]:
    """Crude, PS regression adjustment and stabilized IPW for each selection method's confounder set."""
    outcome = set(dataset.outcome.tolist())
    if len(outcome) < 2:
        raise ValueError("outcome has a single class; no odds ratio can be estimated")
    rows = []
    for method in methods:
        if method == ORACLE:
            sel = select_oracle(pool, oracle)
        elif method == CIE:
            sel = select_cie(dataset, pool, opts.cie_threshold, scale=opts.cie_scale,
                             separation_policy=opts.separation_policy)
        elif method == PVAL:
            sel = select_pval(dataset, pool, opts.pval_alpha, separation_policy=opts.separation_policy)
        else:
            sel = select_all(pool)
        rows_used = complete_case(dataset, sel.selected)
        base = crude(rows_used)
        if not math.isfinite(base.log_or):
            reg = ipw = base
            weights = None
        else:
            ps = fit_propensity(rows_used, sel.selected)
            reg = regression_adjust(rows_used, ps, scale=opts.ps_adjust_scale)
            ipw = ipw_estimate(rows_used, ps, weight_truncation=opts.weight_truncation)
            weights = ipw.weights_summary
        rows.append({"method": method, "selection": sel, "crude": base, "reg": reg, "ipw": ipw,
                     "n": rows_used.n, "weights": weights})
    return rows


_LABELS = {ORACLE: "Oracle confounders", CIE: "Selection by CIE", PVAL: "Selection by p-value",
           ALL: "All potential confounders"}


def format_analysis_report(rows: Sequence[dict]) -> str:
    width = 30
    lines = ["Estimated odds ratio (95% CI) of the outcome with different approaches using propensity scores",
             "", f"{'':<{width}}{'Crude':<22}{'Reg. adjustment':<22}{'IPW':<22}", "-" * (width + 66)]
    for row in rows:
        cells = [_cell(row[k]) for k in ("crude", "reg", "ipw")]
        lines.append(f"{_LABELS[row['method']]:<{width}}" + "".join(f"{c[0]:<22}" for c in cells))
        lines.append(f"{'':<{width}}" + "".join(f"{c[1]:<22}" for c in cells))
        selected = ", ".join(row["selection"].selected) or "(none)"
        lines.append(f"{'':<{width}}n = {row['n']}; confounders: {selected}")
        if row["selection"].degenerate:
            lines.append(f"{'':<{width}}crude table has an empty cell; selection is degenerate")
        if row["weights"]:
            lo, hi, mean = row["weights"]
            lines.append(f"{'':<{width}}stabilized weights min {lo:.3f}, max {hi:.3f}, mean {mean:.3f}")
        lines.append("-" * (width + 66))
    return "\n".join(lines) + "\n"


def cmd_analyze(s: Mapping[str, Any]) -> int:
    spec = load_schema_spec(s["schema"])
    dataset = read_dataset(s["data"], spec)
    pool = _split(s["pool"]) or dataset.schema.names
    rows = analyze_dataset(dataset, pool, _split(s["methods"]), _split(s["oracle"]), options(s))
    report = format_analysis_report(rows)
    if s["out"]:
        Path(s["out"]).write_text(report)
    sys.stdout.write(report)
    return 0


# --- oracle and calibrate --------------------------------------------------

def cmd_oracle(s: Mapping[str, Any]) -> int:
    scenario = load_scenario(s["scenario"], s["latent_scale"])
    te = marginal_or_oracle(scenario, s["sample_size"], oracle_rng(s["seed"]))
    doc = {"scenario_id": scenario.id, "conditional_log_or": te.conditional_log_or,
           "marginal_log_or": te.marginal_log_or, "oracle_sample_size": te.oracle_sample_size,
           "oracle_mc_error": te.oracle_mc_error, "seed": s["seed"]}
    text = dumps_json(doc)
    if s["out"]:
        Path(s["out"]).write_text(text)
    sys.stdout.write(text)
    return 0


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def cmd_calibrate(s: Mapping[str, Any]) -> int:
    try:
        targets = OtisTargets.from_dict(_load_json(s["targets"])) if s["targets"] else OtisTargets()
        search = SearchConfig.from_dict(_load_json(s["bounds"])) if s["bounds"] else SearchConfig()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    status = 0
    try:
        result = calibrate_otis_marginals(targets, search)
    except CalibrationError as exc:
        logger.error("calibration failed: %s", exc)
        result, status = exc.result, 1
    text = dumps_json(result.to_dict())
    if s["out"]:
        Path(s["out"]).write_text(text)
    sys.stdout.write(text)
    return status


# --- parser ----------------------------------------------------------------

def _add_options(p: argparse.ArgumentParser):
    p.add_argument("--cie-threshold", type=float, help="relative OR change for CIE selection (default 0.10)")
    p.add_argument("--cie-scale", choices=("ratio", "log"), help="CIE change on the OR ratio or log scale")
    p.add_argument("--pval-alpha", type=float, help="significance level for univariate screening (default 0.05)")
    p.add_argument("--ps-adjust-scale", choices=("probability", "logit"),
                   help="scale of the propensity score in regression adjustment (default probability)")
    p.add_argument("--weight-truncation", type=float, help="cap stabilized weights at this quantile (default off)")
    p.add_argument("--separation-policy", choices=("complete", "any"),
                   help="which separated candidate fits force selection (default complete)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rareps", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress and warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a replicated simulation experiment")
    p.add_argument("--config", help="JSON settings file")
    p.add_argument("--scenario", help="I, II, III, IV or a scenario JSON file (default I)")
    p.add_argument("--replicates", type=int, help="number of replicates (default 10000)")
    p.add_argument("--seed", type=int, help="master seed (default 42)")
    p.add_argument("--workers", type=int, help="worker processes (default 1)")
    p.add_argument("--out-dir", help="output directory (default rareps-out)")
    p.add_argument("--latent-scale", choices=("variance", "sd"), help="reading of N(0, v) for latents")
    p.add_argument("--oracle-sample-size", type=int, help="draws for the marginal-OR oracle (default 1e7)")
    _add_options(p)

    p = sub.add_parser("analyze", help="odds-ratio report (crude, regression adjustment, IPW) for one dataset")
    p.add_argument("--config", help="JSON settings file")
    p.add_argument("--data", help="delimited data file with a header row")
    p.add_argument("--schema", help="JSON schema spec for the data file")
    p.add_argument("--pool", help="comma-separated candidate confounders (default all schema variables)")
    p.add_argument("--oracle", help="comma-separated known confounders")
    p.add_argument("--methods", help="comma-separated selection methods: oracle, cie, pval, all (default cie,all)")
    p.add_argument("--out", help="also write the report here")
    _add_options(p)

    p = sub.add_parser("oracle", help="Monte Carlo marginal log OR of a scenario")
    p.add_argument("--config", help="JSON settings file")
    p.add_argument("--scenario", help="I, II, III, IV or a scenario JSON file (default I)")
    p.add_argument("--sample-size", type=int, help="Monte Carlo draws (default 1e7)")
    p.add_argument("--seed", type=int, help="seed (default 42)")
    p.add_argument("--latent-scale", choices=("variance", "sd"), help="reading of N(0, v) for latents")
    p.add_argument("--out", help="write the result JSON here")

    p = sub.add_parser("calibrate", help="fit the scenario III/IV covariate marginals")
    p.add_argument("--config", help="JSON settings file")
    p.add_argument("--targets", help="JSON file of target statistics")
    p.add_argument("--bounds", help="JSON file of search settings and bounds")
    p.add_argument("--out", help="write the calibrated laws here")
    return parser


COMMANDS = {"simulate": cmd_simulate, "analyze": cmd_analyze, "oracle": cmd_oracle, "calibrate": cmd_calibrate}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        settings = effective_config(args.command, flags, args.config)
        return COMMANDS[args.command](settings)
    except ConfigError as exc:
        parser.error(str(exc))  # exits with status 2
    except (OSError, ValueError) as exc:
        print(f"rareps {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
