"""Replicated simulation experiments: run, summarize, rank spreads, export distributions.

Replicate i draws everything from a Philox stream keyed by (master_seed, i),
so outputs depend only on the seed, the scenario and the replicate count,
never on the worker count or on scheduling.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import gaussian_kde

from .estimators import ESTIMATORS, EstimatorOptions, PsAnalysis, run_all_ten, run_selections
from .scenarios import Scenario, TrueEffects, event_statistics, generate, marginal_or_oracle
from .selection import CIE, PVAL, SelectionMetrics, SelectionResult, aggregate_metrics

QUANTILES = (0.01, 0.05, 0.25, 0.50, 0.75, 0.95, 0.99)
GRID = np.round(np.arange(-2.0, 6.0 + 1e-9, 0.02), 10)
ORACLE_STREAM_KEY = 0x6F7261636C65  # spawn key reserved for the marginal-OR oracle


def replicate_rng(master_seed: int, index: int) -> np.random.Generator:
    """The stream of replicate ``index``: a pure function of (master_seed, index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([master_seed, index])))


def oracle_rng(master_seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(master_seed, spawn_key=(ORACLE_STREAM_KEY,))))


@dataclass(frozen=True)
class ReplicateRecord:
    replicate_index: int
    event_counts: tuple[int, int, int]  # total, exposed, unexposed
    estimates: tuple[PsAnalysis, ...]
    selections: Mapping[str, SelectionResult]
    degenerate: bool
    error: str | None = None

    def estimate(self, estimator_id: str) -> PsAnalysis:
        return self.estimates[ESTIMATORS.index(estimator_id)]


@dataclass(frozen=True)
class EstimatorStats:
    n_finite: int
    mean: float
    sd: float
    quantiles: Mapping[float, float]
    frac_infinite: float
    frac_failed: float = 0.0

    @property
    def iqr(self) -> float:
        return self.quantiles[0.75] - self.quantiles[0.25]

    @property
    def range_5_95(self) -> float:
        return self.quantiles[0.95] - self.quantiles[0.05]


@dataclass(frozen=True)
class SimulationSummary:
    scenario_id: str
    n_replicates: int
    master_seed: int
    events: Mapping[str, float]
    selection_metrics: Mapping[str, SelectionMetrics | None]
    estimator_stats: Mapping[str, EstimatorStats]
    true_effects: TrueEffects | None
    n_failed_replicates: int = 0

    def to_dict(self) -> dict:
        def metrics(m: SelectionMetrics | None):
            if m is None:
                return None
            return {
                "true_pos": m.true_pos, "false_pos": m.false_pos, "incl_rate": m.incl_rate,
                "exact_rate": m.exact_rate, "n_runs": m.n_runs, "n_degenerate": m.n_degenerate,
                "frequencies": [[name, f] for name, f in m.top_frequencies],
            }

        return {
            "scenario_id": self.scenario_id,
            "n_replicates": self.n_replicates,
            "master_seed": self.master_seed,
            "n_failed_replicates": self.n_failed_replicates,
            "events": dict(self.events),
            "selection_metrics": {k: metrics(v) for k, v in self.selection_metrics.items()},
            "estimator_stats": {
                k: {
                    "n_finite": s.n_finite, "mean": s.mean, "sd": s.sd,
                    "quantiles": {f"{q:g}": v for q, v in s.quantiles.items()},
                    "iqr": s.iqr, "range_5_95": s.range_5_95,
                    "frac_infinite": s.frac_infinite, "frac_failed": s.frac_failed,
                }
                for k, s in self.estimator_stats.items()
            },
            "true_effects": None if self.true_effects is None else {
                "conditional_log_or": self.true_effects.conditional_log_or,
                "marginal_log_or": self.true_effects.marginal_log_or,
                "oracle_sample_size": self.true_effects.oracle_sample_size,
                "oracle_mc_error": self.true_effects.oracle_mc_error,
            },
        }


# --- running ---------------------------------------------------------------

def run_replicate(scenario: Scenario, master_seed: int, index: int,
                  options: EstimatorOptions = EstimatorOptions()) -> ReplicateRecord:
    """generate -> select (CIE, PVAL) -> ten estimators, on replicate ``index``'s own stream."""
    data = generate(scenario, replicate_rng(master_seed, index))
    a, b, c, d = data.counts()
    counts = (a + c, a, c)
    try:
        selections = run_selections(data, scenario.true_confounders, scenario.pool, options)
        estimates = run_all_ten(data, scenario.true_confounders, scenario.pool, options, selections)
        error = None
    except Exception as exc:  # recorded, never fatal for the experiment
        selections = {}
        estimates = [PsAnalysis(e, math.nan, error=f"{type(exc).__name__}: {exc}") for e in ESTIMATORS]
        error = f"{type(exc).__name__}: {exc}"
    return ReplicateRecord(index, counts, tuple(estimates),
                           {k: v for k, v in selections.items() if k in (CIE, PVAL)}, c == 0, error)


def _run_chunk(args) -> list[ReplicateRecord]:
    scenario, master_seed, indices, options = args
    return [run_replicate(scenario, master_seed, i, options) for i in indices]


def _chunks(n: int, size: int) -> list[range]:
    return [range(s, min(s + size, n)) for s in range(0, n, size)]


def run_replicates(scenario: Scenario, n_replicates: int, master_seed: int, workers: int = 1,
                   options: EstimatorOptions = EstimatorOptions(), chunk_size: int = 50) -> list[ReplicateRecord]:
    if n_replicates < 1:
        raise ValueError("n_replicates must be at least 1")
    if workers < 1:
        raise ValueError("workers must be at least 1")
    jobs = [(scenario, master_seed, chunk, options) for chunk in _chunks(n_replicates, chunk_size)]
    if workers == 1:
        batches = map(_run_chunk, jobs)
        return [r for batch in batches for r in batch]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map yields in submission order, so the log stays in replicate order
        return [r for batch in pool.map(_run_chunk, jobs) for r in batch]


def _estimator_stats(values: np.ndarray) -> EstimatorStats:
    n = len(values)
    failed = np.isnan(values)
    infinite = np.isinf(values)
    finite = values[~failed & ~infinite]
    if len(finite):
        qs = np.quantile(finite, QUANTILES)
        quantiles = {q: float(v) for q, v in zip(QUANTILES, qs)}
        mean = float(np.mean(finite))
    else:
        quantiles = {q: math.nan for q in QUANTILES}
        mean = math.nan
    sd = float(np.std(finite, ddof=1)) if len(finite) > 1 else math.nan
    return EstimatorStats(len(finite), mean, sd, quantiles, float(infinite.sum()) / n, float(failed.sum()) / n)


def summarize(records: Sequence[ReplicateRecord], scenario: Scenario, master_seed: int,
              true_effects: TrueEffects | None = None) -> SimulationSummary:
    counts = np.array([r.event_counts for r in records], dtype=float)
    events = event_statistics(counts[:, 0], counts[:, 2])
    metrics: dict[str, SelectionMetrics | None] = {}
    for method in (CIE, PVAL):
        runs = [r.selections[method] for r in records if method in r.selections]
        try:
            metrics[method] = aggregate_metrics(runs, scenario.pool, scenario.true_confounders)
        except ValueError:
            metrics[method] = None  # every run degenerate or failed
    table = np.array([[e.log_or for e in r.estimates] for r in records], dtype=float)
    stats = {e: _estimator_stats(table[:, j]) for j, e in enumerate(ESTIMATORS)}
    return SimulationSummary(
        scenario.id, len(records), master_seed, events, metrics, stats, true_effects,
        sum(r.error is not None for r in records),
    )


def run_experiment(
    scenario: Scenario,
    n_replicates: int,
    master_seed: int,
    workers: int = 1,
    options: EstimatorOptions = EstimatorOptions(),
    *,
    oracle_sample_size: int | None = 10**7,
    true_effects: TrueEffects | None = None,
) -> tuple[SimulationSummary, list[ReplicateRecord]]:
    """Run ``n_replicates`` replicates and aggregate them.

    The marginal-OR oracle runs once on its own stream (skipped when
    ``oracle_sample_size`` is None or ``true_effects`` is given).
    """
    records = run_replicates(scenario, n_replicates, master_seed, workers, options)
    if true_effects is None and oracle_sample_size is not None:
        true_effects = marginal_or_oracle(scenario, oracle_sample_size, oracle_rng(master_seed))
    return summarize(records, scenario, master_seed, true_effects), records


def spread_ranking(summary: SimulationSummary, *, min_replicates: int = 1000) -> list[str]:
    """Estimators from widest to narrowest finite-run IQR; ties by the 5-95% range, then input order."""
    if summary.n_replicates < min_replicates:
        raise ValueError(f"spread ranking needs at least {min_replicates} replicates")
    ids = list(summary.estimator_stats)

    def key(item):
        pos, name = item
        s = summary.estimator_stats[name]
        iqr = s.iqr if math.isfinite(s.iqr) else -math.inf
        rng = s.range_5_95 if math.isfinite(s.range_5_95) else -math.inf
        return (-iqr, -rng, pos)

    return [name for _, name in sorted(enumerate(ids), key=key)]


# --- export ----------------------------------------------------------------

def fmt(x) -> str:
    """17 significant digits; inf, -inf and nan spelled out."""
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def _json_value(obj, indent: int, level: int) -> str:
    pad, inner = " " * (indent * level), " " * (indent * (level + 1))
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "NaN"
        if math.isinf(x):
            return "Infinity" if x > 0 else "-Infinity"
        return format(x, ".17g")
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, Mapping):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {_json_value(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (Mapping, list, tuple)) for v in obj):
            return "[" + ", ".join(_json_value(v, indent, level + 1) for v in obj) + "]"
        items = [inner + _json_value(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + pad + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_json(obj, indent: int = 2) -> str:
    """JSON with every float at 17 significant digits (Python's Infinity/NaN spelling for non-finite)."""
    return _json_value(obj, indent, 0) + "\n"


def write_summary(summary: SimulationSummary, path: str | Path):
    Path(path).write_text(dumps_json(summary.to_dict()))


LOG_FIELDS = ("replicate", "estimator", "log_or", "std_err", "ci_low", "ci_high", "separation", "n_used",
              "selected", "total_events", "exposed_events", "unexposed_events", "degenerate", "error")


def write_replicate_log(records: Iterable[ReplicateRecord], path: str | Path):
    """One row per replicate per estimator, in replicate order."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(LOG_FIELDS)
        for r in records:
            total, exposed, unexposed = r.event_counts
            for e in r.estimates:
                low, high = e.ci95 if e.ci95 else (None, None)
                out.writerow([r.replicate_index, e.estimator_id, fmt(e.log_or), fmt(e.std_err), fmt(low),
                              fmt(high), e.separation.value, e.n_used, ";".join(e.selected_set), total, exposed,
                              unexposed, int(r.degenerate), e.error or ""])


def write_selection_log(records: Iterable[ReplicateRecord], path: str | Path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(("replicate", "method", "selected", "flagged", "degenerate"))
        for r in records:
            for method in (CIE, PVAL):
                s = r.selections.get(method)
                if s is not None:
                    out.writerow([r.replicate_index, method, ";".join(s.selected), ";".join(s.flagged),
                                  int(s.degenerate)])


def silverman_bandwidth(values: np.ndarray) -> float:
    """Silverman's rule of thumb, 0.9 min(sd, IQR/1.34) n^(-1/5)."""
    values = np.asarray(values, dtype=float)
    sd = np.std(values, ddof=1)
    q75, q25 = np.quantile(values, [0.75, 0.25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * len(values) ** -0.2


def density_on_grid(estimates: np.ndarray, grid: np.ndarray = GRID) -> np.ndarray:
    """Gaussian KDE of the finite estimates scaled by their share, so it integrates to frac_finite."""
    estimates = np.asarray(estimates, dtype=float)
    valid = estimates[~np.isnan(estimates)]
    finite = valid[np.isfinite(valid)]
    if len(finite) < 2 or np.ptp(finite) == 0:
        return np.zeros_like(grid)
    h = silverman_bandwidth(finite)
    kde = gaussian_kde(finite, bw_method=h / np.std(finite, ddof=1))
    return kde(grid) * len(finite) / len(valid)


def tail_on_grid(estimates: np.ndarray, grid: np.ndarray = GRID) -> np.ndarray:
    """1 - ECDF over all non-failed estimates; +inf counts above every grid point, -inf below."""
    valid = np.sort(np.asarray(estimates, dtype=float)[~np.isnan(estimates)])
    if len(valid) == 0:
        return np.full_like(grid, math.nan)
    return 1.0 - np.searchsorted(valid, grid, side="right") / len(valid)


def export_distributions(records: Sequence[ReplicateRecord], out_dir: str | Path,
                         true_effects: TrueEffects | None = None) -> list[Path]:
    """Per estimator: finite estimates, density and tail on the fixed grid; plus the reference lines."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"cannot write to {out}")
    written = []
    for j, name in enumerate(ESTIMATORS):
        values = np.array([r.estimates[j].log_or for r in records], dtype=float)
        finite = values[np.isfinite(values)]
        path = out / f"estimates_{name}.txt"
        path.write_text("".join(fmt(v) + "\n" for v in finite))
        written.append(path)
        density, tail = density_on_grid(values), tail_on_grid(values)
        for label, curve in (("density", density), ("tail", tail)):
            path = out / f"{label}_{name}.csv"
            path.write_text(f"x,{label}\n" + "".join(f"{fmt(x)},{fmt(y)}\n" for x, y in zip(GRID, curve)))
            written.append(path)
    path = out / "reference_lines.csv"
    lines = "effect,log_or\n"
    if true_effects is not None:
        lines += f"conditional,{fmt(true_effects.conditional_log_or)}\nmarginal,{fmt(true_effects.marginal_log_or)}\n"
    path.write_text(lines)
    written.append(path)
    return written


def write_outputs(summary: SimulationSummary, records: Sequence[ReplicateRecord], out_dir: str | Path) -> list[Path]:
    """Summary JSON, replicate and selection logs, and the distribution files under ``distributions/``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "summary.json", out / "replicates.csv", out / "selections.csv"]
    write_summary(summary, paths[0])
    write_replicate_log(records, paths[1])
    write_selection_log(records, paths[2])
    paths += export_distributions(records, out / "distributions", summary.true_effects)
    return paths
