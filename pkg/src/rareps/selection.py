"""Confounder selection: change-in-estimate, univariate significance, oracle and all-in; accuracy metrics."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .glm import (
    Separation,
    SingularDesignError,
    chi2_sf,
    classify_separation,
    fit_logistic,
    fit_logistic_batch,
    zero_cell_columns,
)
from .tabular import Dataset, complete_case, encode

ORACLE, CIE, PVAL, ALL = "oracle", "cie", "pval", "all"
METHODS = (ORACLE, CIE, PVAL, ALL)
SEPARATION_POLICIES = ("complete", "any")


@dataclass(frozen=True)
class VariableDecision:
    name: str
    statistic: float  # relative OR change for CIE, p-value for PVAL
    selected: bool
    separation: Separation = Separation.NONE


@dataclass(frozen=True)
class SelectionResult:
    method: str
    selected: tuple[str, ...]
    per_variable: tuple[VariableDecision, ...] = ()
    degenerate: bool = False

    @property
    def flagged(self) -> tuple[str, ...]:
        """Candidates whose single-candidate fit was separated."""
        return tuple(d.name for d in self.per_variable if d.separation is not Separation.NONE)


@dataclass(frozen=True)
class SelectionScore:
    true_pos: int
    false_pos: int
    includes_all: bool
    exact: bool


@dataclass(frozen=True)
class SelectionMetrics:
    true_pos: float
    false_pos: float
    incl_rate: float
    exact_rate: float
    top_frequencies: tuple[tuple[str, float], ...]
    n_runs: int = 0
    n_degenerate: int = 0

    def frequency(self, name: str) -> float:
        return dict(self.top_frequencies)[name]

    def top(self, count: int) -> list[str]:
        return [name for name, _ in self.top_frequencies[:count]]


def _forced(flag: Separation, policy: str) -> bool:
    """Whether a separated candidate fit is selected regardless of its statistic.

    Under "complete" only complete separation, where the statistic is
    undefined, forces selection; quasi-separated fits keep their finite
    statistic and are only flagged. Under "any" every separated fit is forced.
    """
    if policy == "complete":
        return flag is Separation.COMPLETE
    if policy == "any":
        return flag is not Separation.NONE
    raise ValueError(f"unknown separation policy {policy!r}")


def _check_policy(policy: str):
    if policy not in SEPARATION_POLICIES:
        raise ValueError(f"unknown separation policy {policy!r}")


class DegenerateSelection(ValueError):
    """The crude odds ratio is infinite or undefined, so change-in-estimate cannot be computed."""


def select_oracle(pool: Sequence[str], true_set: Sequence[str]) -> SelectionResult:
    missing = set(true_set) - set(pool)
    if missing:
        raise ValueError(f"true confounders not in pool: {sorted(missing)}")
    return SelectionResult(ORACLE, tuple(v for v in pool if v in set(true_set)))


def select_all(pool: Sequence[str]) -> SelectionResult:
    return SelectionResult(ALL, tuple(pool))


def _crude_log_or(data: Dataset) -> float:
    a, b, c, d = data.counts()
    if min(a, b, c, d) == 0:
        raise DegenerateSelection("crude 2x2 table has an empty cell")
    return math.log(a) + math.log(d) - math.log(b) - math.log(c)


def _cie_change(adj: float, crude: float, scale: str) -> float:
    if scale == "ratio":
        return abs(math.expm1(adj - crude))
    if scale == "log":
        return abs(adj - crude)
    raise ValueError(f"unknown CIE scale {scale!r}")


def _fit_candidates(data: Dataset, pool: Sequence[str], with_exposure: bool):
    """Fit Y on [1, (A,), v] for every candidate v.

    Yields (name, coefficient vector, log-likelihood, null log-likelihood,
    separation flag). Candidates sharing a design width are fitted as one
    batch; the separation evidence matches ``detect_separation``.
    """
    y = np.asarray(data.outcome, dtype=float)
    n = data.n
    base = [np.ones(n)]
    if with_exposure:
        base.append(np.asarray(data.exposure, dtype=float))
    base = np.column_stack(base)
    nb = base.shape[1]
    exposure_zero = bool(zero_cell_columns(base, y, [1])[0]) if with_exposure else False
    by_width = defaultdict(list)
    for name in pool:
        design = encode(data, [name], include_exposure=with_exposure)
        block = design.columns[:, nb:]
        if block.shape[1] == 0:
            by_width[0].append((name, block, design))
        else:
            by_width[block.shape[1]].append((name, block, design))
    results = {}
    for width, members in by_width.items():
        if width == 0:
            for name, _, design in members:
                fit = fit_logistic(design, y)
                results[name] = (fit.coefficients, fit.log_likelihood, fit.null_log_likelihood, fit.separation)
            continue
        xs = np.stack([np.hstack([base, block]) for _, block, _ in members])
        try:
            batch = fit_logistic_batch(xs, y)
        except SingularDesignError:
            for name, _, design in members:
                fit = fit_logistic(design, y)
                results[name] = (fit.coefficients, fit.log_likelihood, fit.null_log_likelihood, fit.separation)
            continue
        for i, (name, block, design) in enumerate(members):
            if data.schema[name].kind == "continuous":
                other_zero = False
            else:
                other_zero = bool(zero_cell_columns(block, y, range(width)).any())
            div = batch.diverging[i]
            flag = classify_separation(
                ordered=bool(batch.ordered[i]),
                exposure_problem=exposure_zero or (with_exposure and bool(div[1])),
                other_zero_cell=other_zero,
                other_diverging=bool(np.delete(div, [1] if with_exposure else []).any()),
                converged=bool(batch.converged[i]),
            )
            results[name] = (batch.coefficients[i], float(batch.log_likelihood[i]), batch.null_log_likelihood, flag)
    return [(name, *results[name]) for name in pool]


def select_cie(
    dataset: Dataset,
    pool: Sequence[str],
    threshold: float = 0.10,
    *,
    scale: str = "ratio",
    separation_policy: str = "complete",
) -> SelectionResult:
    """Change-in-estimate selection against the crude odds ratio.

    Each candidate is added alone to the crude model (categoricals as their
    whole dummy group); it is selected when the exposure odds ratio moves by
    at least ``threshold`` relative to the crude one (``scale="ratio"``, the
    |OR_adj/OR_crude - 1| form) or by ``threshold`` on the log scale
    (``scale="log"``). Separated adjusted fits are flagged; see ``_forced``
    for when separation overrides the statistic. A crude table with an empty cell makes the run
    degenerate: nothing is selected and ``degenerate`` is set.
    """
    _check_policy(separation_policy)
    if dataset.has_missing:
        return _select_cie_missing(dataset, pool, threshold, scale, separation_policy)
    data = complete_case(dataset, [])
    try:
        crude = _crude_log_or(data)
    except DegenerateSelection:
        return SelectionResult(CIE, (), (), degenerate=True)
    decisions = []
    for name, coef, _, _, flag in _fit_candidates(data, pool, with_exposure=True):
        stat = _cie_change(float(coef[1]), crude, scale)
        chosen = stat >= threshold or _forced(flag, separation_policy)
        decisions.append(VariableDecision(name, stat, chosen, flag))
    return SelectionResult(CIE, tuple(d.name for d in decisions if d.selected), tuple(decisions))


def _select_cie_missing(dataset, pool, threshold, scale, policy):
    # each candidate is compared with the crude OR on that candidate's own complete rows
    decisions = []
    for name in pool:
        data = complete_case(dataset, [name])
        try:
            crude = _crude_log_or(data)
        except DegenerateSelection:
            return SelectionResult(CIE, (), (), degenerate=True)
        design = encode(data, [name], include_exposure=True)
        fit = fit_logistic(design, data.outcome)
        stat = _cie_change(fit.coef("(exposure)"), crude, scale)
        chosen = stat >= threshold or _forced(fit.separation, policy)
        decisions.append(VariableDecision(name, stat, chosen, fit.separation))
    return SelectionResult(CIE, tuple(d.name for d in decisions if d.selected), tuple(decisions))


def select_pval(
    dataset: Dataset,
    pool: Sequence[str],
    alpha: float = 0.05,
    *,
    separation_policy: str = "complete",
) -> SelectionResult:
    """Univariate likelihood-ratio screening of each candidate against the outcome.

    The test for a categorical has df = number of dummies. Separated fits
    are flagged and handled as in ``select_cie``.
    """
    _check_policy(separation_policy)
    decisions = []
    if dataset.has_missing:
        for name in pool:
            data = complete_case(dataset, [name])
            fit = fit_logistic(encode(data, [name], include_exposure=False), data.outcome)
            df = len(fit.coefficients) - 1
            p = chi2_sf(max(2 * (fit.log_likelihood - fit.null_log_likelihood), 0.0), df) if df else 1.0
            chosen = p < alpha or _forced(fit.separation, separation_policy)
            decisions.append(VariableDecision(name, p, chosen, fit.separation))
    else:
        if len(set(np.asarray(dataset.outcome).tolist())) < 2:
            raise ValueError("outcome needs both classes")
        for name, coef, ll, null_ll, flag in _fit_candidates(dataset, pool, with_exposure=False):
            df = len(coef) - 1
            p = chi2_sf(max(2 * (ll - null_ll), 0.0), df) if df else 1.0
            chosen = p < alpha or _forced(flag, separation_policy)
            decisions.append(VariableDecision(name, p, chosen, flag))
    return SelectionResult(PVAL, tuple(d.name for d in decisions if d.selected), tuple(decisions))


def score_selection(result: SelectionResult, true_set: Iterable[str]) -> SelectionScore:
    sel, true = set(result.selected), set(true_set)
    return SelectionScore(len(sel & true), len(sel - true), true <= sel, sel == true)


def aggregate_metrics(
    per_run: Sequence[SelectionResult],
    pool: Sequence[str],
    true_set: Iterable[str],
) -> SelectionMetrics:
    """Average accuracy and per-variable selection frequency over runs.

    Degenerate runs (no crude OR) are left out and counted separately.
    Frequencies are ranked descending, ties kept in pool order.
    """
    true = list(true_set)
    runs = [r for r in per_run if not r.degenerate]
    n_deg = len(per_run) - len(runs)
    if not runs:
        raise ValueError("no non-degenerate runs to aggregate")
    scores = [score_selection(r, true) for r in runs]
    m = len(runs)
    counts = dict.fromkeys(pool, 0)
    for r in runs:
        for name in r.selected:
            counts[name] += 1
    freqs = sorted(((name, counts[name] / m) for name in pool), key=lambda t: -t[1])
    return SelectionMetrics(
        true_pos=sum(s.true_pos for s in scores) / m,
        false_pos=sum(s.false_pos for s in scores) / m,
        incl_rate=sum(s.includes_all for s in scores) / m,
        exact_rate=sum(s.exact for s in scores) / m,
        top_frequencies=tuple(freqs),
        n_runs=m,
        n_degenerate=n_deg,
    )
