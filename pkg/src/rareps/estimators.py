"""Crude, PS regression adjustment, stabilized IPW and true-confounder outcome-model estimators."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .glm import GlmFit, Separation, SingularDesignError, fit_logistic
from .selection import (
    ALL,
    CIE,
    ORACLE,
    PVAL,
    SEPARATION_POLICIES,
    SelectionResult,
    select_all,
    select_cie,
    select_oracle,
    select_pval,
)
from .tabular import EXPOSURE, INTERCEPT, Dataset, DesignMatrix, EmptyDatasetError, complete_case, encode

logger = logging.getLogger(__name__)

PS_CLAMP = 1e-12
Z95 = 1.959963984540054

CRUDE = "crude"
TRUE_MULTIVARIATE = "true_multivariate"
SELECTIONS = (ORACLE, CIE, PVAL, ALL)
ESTIMATORS = (
    CRUDE,
    *(f"reg_{s}" for s in SELECTIONS),
    *(f"ipw_{s}" for s in SELECTIONS),
    TRUE_MULTIVARIATE,
)


@dataclass(frozen=True)
class EstimatorOptions:
    cie_threshold: float = 0.10
    cie_scale: str = "ratio"
    pval_alpha: float = 0.05
    ps_adjust_scale: str = "probability"  # or "logit"
    weight_truncation: float | None = None  # upper quantile at which stabilized weights are capped
    separation_policy: str = "complete"  # when a separated candidate fit forces selection

    def __post_init__(self):
        if not 0 < self.cie_threshold < 10:
            raise ValueError("cie_threshold must be in (0, 10)")
        if self.cie_scale not in ("ratio", "log"):
            raise ValueError("cie_scale must be 'ratio' or 'log'")
        if not 0 < self.pval_alpha < 1:
            raise ValueError("pval_alpha must be in (0, 1)")
        if self.ps_adjust_scale not in ("probability", "logit"):
            raise ValueError("ps_adjust_scale must be 'probability' or 'logit'")
        if self.weight_truncation is not None and not 0.5 < self.weight_truncation < 1:
            raise ValueError("weight_truncation must be a quantile in (0.5, 1)")
        if self.separation_policy not in SEPARATION_POLICIES:
            raise ValueError(f"separation_policy must be one of {SEPARATION_POLICIES}")


@dataclass(frozen=True, eq=False)
class PsModel:
    fit: GlmFit | None
    scores: np.ndarray
    confounder_set: tuple[str, ...]
    marginal_exposure_rate: float
    data: Dataset  # the analysis rows the scores belong to

    @property
    def separation(self) -> Separation:
        return self.fit.separation if self.fit is not None else Separation.NONE


@dataclass(frozen=True)
class PsAnalysis:
    estimator_id: str
    log_or: float
    std_err: float | None = None
    ci95: tuple[float, float] | None = None
    selected_set: tuple[str, ...] = ()
    n_used: int = 0
    separation: Separation = Separation.NONE
    weights_summary: tuple[float, float, float] | None = None
    error: str | None = None

    @property
    def odds_ratio(self) -> float:
        return math.exp(self.log_or) if self.log_or < 700 else math.inf


def _signed_infinity(a: float, b: float, c: float, d: float) -> float:
    """Extended-real log OR for a 2x2 table (a, b exposed events/non-events; c, d unexposed)."""
    up = (b == 0) + (c == 0)
    down = (a == 0) + (d == 0)
    if up and down:
        return math.nan
    if up:
        return math.inf
    if down:
        return -math.inf
    return math.log(a) + math.log(d) - math.log(b) - math.log(c)


def _cells(data: Dataset, weights=None):
    a = np.asarray(data.exposure, dtype=bool)
    y = np.asarray(data.outcome, dtype=bool)
    w = np.ones(len(a)) if weights is None else weights
    return (float(w[a & y].sum()), float(w[a & ~y].sum()), float(w[~a & y].sum()), float(w[~a & ~y].sum()))


def _analysis(estimator_id, log_or, se, sep, n, selected=(), weights_summary=None) -> PsAnalysis:
    ci = None
    if se is not None and math.isfinite(se) and math.isfinite(log_or) and sep is Separation.NONE:
        ci = (math.exp(log_or - Z95 * se), math.exp(log_or + Z95 * se))
    return PsAnalysis(estimator_id, log_or, se, ci, tuple(selected), n, sep, weights_summary)


def crude(dataset: Dataset) -> PsAnalysis:
    """Unadjusted log OR from the exposure-by-outcome 2x2 table; +/-inf on an empty cell."""
    data = complete_case(dataset, [])
    a, b, c, d = data.counts()
    if a + b == 0 or c + d == 0:
        raise ValueError("both exposure arms must be present")
    log_or = _signed_infinity(a, b, c, d)
    if min(a, b, c, d) == 0:
        return _analysis(CRUDE, log_or, None, Separation.COMPLETE, data.n)
    se = math.sqrt(1 / a + 1 / b + 1 / c + 1 / d)
    return _analysis(CRUDE, log_or, se, Separation.NONE, data.n)


def fit_propensity(dataset: Dataset, confounder_set: Sequence[str]) -> PsModel:
    """Logistic regression of exposure on ``confounder_set``; scores clamped to [1e-12, 1 - 1e-12].

    An empty set gives constant scores equal to the sample exposure rate.
    """
    names = tuple(confounder_set)
    data = complete_case(dataset, names)
    exposure = np.asarray(data.exposure, dtype=float)
    rate = float(exposure.mean())
    if not 0 < rate < 1:
        raise ValueError("both exposure arms must be present")
    if not names:
        return PsModel(None, np.full(data.n, rate), names, rate, data)
    design = encode(data, names, include_exposure=False)
    if design.columns.shape[1] == 1:
        return PsModel(None, np.full(data.n, rate), names, rate, data)
    fit = fit_logistic(design, exposure)
    scores = np.clip(fit.fitted, PS_CLAMP, 1 - PS_CLAMP)
    return PsModel(fit, scores, names, rate, data)


def stabilized_weights(ps: PsModel, exposure=None) -> np.ndarray:
    """w = A P(A=1)/pi + (1-A) P(A=0)/(1-pi)."""
    a = np.asarray(ps.data.exposure if exposure is None else exposure, dtype=float)
    if len(a) != len(ps.scores):
        raise ValueError("exposure length differs from the propensity scores")
    p1 = ps.marginal_exposure_rate
    return a * p1 / ps.scores + (1 - a) * (1 - p1) / (1 - ps.scores)


def ipw_estimate(
    dataset: Dataset | None,
    ps: PsModel,
    *,
    estimator_id: str = "ipw",
    weight_truncation: float | None = None,
    weights: np.ndarray | None = None,
) -> PsAnalysis:
    """Stabilized-IPW log OR.

    The point estimate is the closed form logit(weighted event share among
    exposed) - logit(weighted event share among unexposed); the standard
    error is the sandwich SE of the equivalent weighted logistic fit of Y on
    A, with the weights treated as fixed. ``dataset`` is accepted for
    symmetry with the other estimators; the rows are those of ``ps``.
    """
    data = ps.data
    w = stabilized_weights(ps) if weights is None else np.asarray(weights, dtype=float)
    if weight_truncation is not None:
        w = np.minimum(w, np.quantile(w, weight_truncation))
    summary = (float(w.min()), float(w.max()), float(w.mean()))
    a, b, c, d = _cells(data, w)
    if a + b == 0 or c + d == 0:
        raise ValueError("an exposure arm has zero total weight")
    log_or = _signed_infinity(a, b, c, d)
    sel = ps.confounder_set
    if not math.isfinite(log_or):
        return _analysis(estimator_id, log_or, None, Separation.COMPLETE, data.n, sel, summary)
    design = encode(data, [], include_exposure=True)
    fit = fit_logistic(design, data.outcome, w)
    slope = fit.coef(EXPOSURE)
    if abs(slope - log_or) > 1e-8 * max(1.0, abs(log_or)):
        logger.warning("IPW closed form %.12g disagrees with weighted fit %.12g", log_or, slope)
    return _analysis(estimator_id, log_or, fit.std_err(EXPOSURE), fit.separation, data.n, sel, summary)


def _exposure_effect(estimator_id, data, design, selected) -> PsAnalysis:
    a, b, c, d = data.counts()
    if min(a, b, c, d) == 0:
        return _analysis(estimator_id, _signed_infinity(a, b, c, d), None, Separation.COMPLETE, data.n, selected)
    fit = fit_logistic(design, data.outcome)
    coef = fit.coef(EXPOSURE)
    if fit.separation is Separation.COMPLETE:
        return _analysis(estimator_id, math.copysign(math.inf, coef), None, fit.separation, data.n, selected)
    return _analysis(estimator_id, coef, fit.std_err(EXPOSURE), fit.separation, data.n, selected)


def regression_adjust(
    dataset: Dataset | None,
    ps: PsModel,
    *,
    scale: str = "probability",
    estimator_id: str = "reg",
) -> PsAnalysis:
    """Outcome regression on intercept, exposure and the propensity score (one linear term).

    ``scale`` picks the PS on the probability or logit scale. A constant PS
    column is dropped, which reduces the estimate to the crude one.
    """
    data = ps.data
    n = data.n
    cols = [np.ones(n), np.asarray(data.exposure, dtype=float)]
    groups = {INTERCEPT: (0,), EXPOSURE: (1,)}
    covariate = ps.scores if scale == "probability" else np.log(ps.scores) - np.log1p(-ps.scores)
    if scale not in ("probability", "logit"):
        raise ValueError(f"unknown PS scale {scale!r}")
    if np.ptp(covariate) > 1e-12:
        cols.append(covariate)
        groups["ps"] = (2,)
    design = DesignMatrix(np.column_stack(cols), groups)
    return _exposure_effect(estimator_id, data, design, ps.confounder_set)


def true_multivariate(dataset: Dataset, true_confounders: Sequence[str]) -> PsAnalysis:
    """Outcome model on intercept, exposure and the true confounders."""
    names = tuple(true_confounders)
    data = complete_case(dataset, names)
    design = encode(data, names, include_exposure=True)
    return _exposure_effect(TRUE_MULTIVARIATE, data, design, names)


def _failed(estimator_id, exc, selected=()) -> PsAnalysis:
    return PsAnalysis(estimator_id, math.nan, selected_set=tuple(selected), error=f"{type(exc).__name__}: {exc}")


def run_selections(dataset: Dataset, oracle_set, candidate_pool, options: EstimatorOptions = EstimatorOptions()):
    """The four confounder sets, selected once and shared by the regression and IPW arms."""
    return {
        ORACLE: select_oracle(candidate_pool, oracle_set),
        CIE: select_cie(dataset, candidate_pool, options.cie_threshold, scale=options.cie_scale,
                        separation_policy=options.separation_policy),
        PVAL: select_pval(dataset, candidate_pool, options.pval_alpha, separation_policy=options.separation_policy),
        ALL: select_all(candidate_pool),
    }


def run_all_ten(
    dataset: Dataset,
    oracle_set: Sequence[str],
    candidate_pool: Sequence[str],
    options: EstimatorOptions = EstimatorOptions(),
    selections: dict[str, SelectionResult] | None = None,
) -> list[PsAnalysis]:
    """Crude, {reg, ipw} x {oracle, cie, pval, all} and the true-confounder model, in that order.

    A crude table with an empty cell short-circuits every estimator to the
    same signed infinity. Failures of one estimator are recorded on its
    record and never stop the others.
    """
    pool = list(candidate_pool)
    if not set(oracle_set) <= set(pool):
        raise ValueError("candidate pool must contain the oracle set")
    base = crude(dataset)
    if not math.isfinite(base.log_or):
        return [replace(base, estimator_id=e, std_err=None, ci95=None) for e in ESTIMATORS]
    if selections is None:
        selections = run_selections(dataset, oracle_set, pool, options)
    out = [base]
    ps_cache: dict[frozenset, PsModel | Exception] = {}

    def ps_for(method):
        chosen = selections[method].selected
        key = frozenset(chosen)
        if key not in ps_cache:
            try:
                ps_cache[key] = fit_propensity(dataset, chosen)
            except (SingularDesignError, ValueError, EmptyDatasetError) as exc:
                ps_cache[key] = exc
        return ps_cache[key], chosen

    reg, ipw = [], []
    for method in SELECTIONS:
        ps, chosen = ps_for(method)
        if isinstance(ps, Exception):
            reg.append(_failed(f"reg_{method}", ps, chosen))
            ipw.append(_failed(f"ipw_{method}", ps, chosen))
            continue
        try:
            reg.append(regression_adjust(dataset, ps, scale=options.ps_adjust_scale, estimator_id=f"reg_{method}"))
        except (SingularDesignError, ValueError) as exc:
            reg.append(_failed(f"reg_{method}", exc, chosen))
        try:
            ipw.append(ipw_estimate(dataset, ps, estimator_id=f"ipw_{method}",
                                    weight_truncation=options.weight_truncation))
        except (SingularDesignError, ValueError) as exc:
            ipw.append(_failed(f"ipw_{method}", exc, chosen))
    out.extend(reg)
    out.extend(ipw)
    try:
        out.append(true_multivariate(dataset, oracle_set))
    except (SingularDesignError, ValueError, EmptyDatasetError) as exc:
        out.append(_failed(TRUE_MULTIVARIATE, exc, oracle_set))
    return out
