"""Maximum-likelihood logistic regression by IRLS, with weights, inference and separation checks."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, gammaincc

from .tabular import EXPOSURE, INTERCEPT, DesignMatrix

SCORE_TOL = 1e-8
DEVIANCE_TOL = 1e-10
MAX_ITER = 100
MAX_HALVINGS = 10
SEPARATION_THRESHOLD = 15.0
PROB_EPS = 1e-6


class Separation(str, enum.Enum):
    NONE = "none"
    QUASI = "quasi"
    COMPLETE = "complete"


class SingularDesignError(np.linalg.LinAlgError):
    """The information matrix is singular at the starting point (collinear design)."""


@dataclass(frozen=True, eq=False)
class GlmFit:
    coefficients: np.ndarray
    model_covariance: np.ndarray
    sandwich_covariance: np.ndarray | None
    log_likelihood: float
    null_log_likelihood: float
    converged: bool
    separation: Separation
    iterations: int
    n_used: int
    groups: Mapping[str, tuple[int, ...]] = field(default_factory=dict)
    linear_predictor: np.ndarray | None = None
    history: np.ndarray | None = None
    weighted: bool = False
    separation_threshold: float = SEPARATION_THRESHOLD

    @property
    def covariance(self) -> np.ndarray:
        """Default covariance: sandwich for weighted fits, model-based otherwise."""
        if self.weighted and self.sandwich_covariance is not None:
            return self.sandwich_covariance
        return self.model_covariance

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    @property
    def fitted(self) -> np.ndarray:
        return expit(self.linear_predictor)

    def columns_of(self, group: str | int | Sequence[int]) -> list[int]:
        if isinstance(group, str):
            return list(self.groups[group])
        if isinstance(group, (int, np.integer)):
            return [int(group)]
        return [int(g) for g in group]

    def coef(self, group: str | int) -> float:
        (j,) = self.columns_of(group)
        return float(self.coefficients[j])

    def std_err(self, group: str | int) -> float:
        (j,) = self.columns_of(group)
        return float(self.std_errors[j])


@dataclass(frozen=True)
class TestResult:
    statistic: float
    df: int
    p_value: float


def logit(p):
    return np.log(p) - np.log1p(-p)


def chi2_sf(x: float, df: int) -> float:
    """Upper tail of the chi-squared distribution via the regularized incomplete gamma function."""
    if x <= 0:
        return 1.0
    if df <= 0:
        return 0.0
    return float(gammaincc(0.5 * df, 0.5 * x))


def _link_terms(eta):
    """Fitted probabilities and log(1 + e^eta), both from one exp(-|eta|)."""
    e = np.exp(-np.abs(eta))
    inv = 1.0 / (1.0 + e)
    p = np.where(eta >= 0, inv, e * inv)
    softplus = np.log1p(e) + np.maximum(eta, 0.0)
    return p, softplus


def _loglik(eta, y, w):
    _, softplus = _link_terms(eta)
    return float(np.dot(w, y * eta - softplus))


def _as_matrix(design) -> tuple[np.ndarray, Mapping[str, tuple[int, ...]], bool]:
    if isinstance(design, DesignMatrix):
        return design.columns, design.groups, design.includes_intercept
    x = np.asarray(design, dtype=float)
    if x.ndim != 2:
        raise ValueError("design must be two-dimensional")
    has_int = x.shape[0] > 0 and bool(np.all(x[:, 0] == 1.0))
    groups = {INTERCEPT: (0,)} if has_int else {}
    start = 1 if has_int else 0
    groups.update({f"x{j}": (j,) for j in range(start, x.shape[1])})
    return x, groups, has_int


def _cholesky(info):
    try:
        chol = np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        return None
    d = np.diag(chol)
    if d.min() <= 1e-7 * d.max():
        return None
    return chol


def _chol_solve(chol, b):
    z = np.linalg.solve(chol, b)
    return np.linalg.solve(chol.T, z)


def fit_logistic(
    design,
    response,
    weights=None,
    *,
    robust: bool | None = None,
    max_iter: int = MAX_ITER,
    separation_threshold: float = SEPARATION_THRESHOLD,
) -> GlmFit:
    """Fit a (weighted) Bernoulli-logit model by iteratively reweighted least squares.

    Starts from intercept = logit of the weighted response mean and zero
    slopes, halves steps that decrease the log-likelihood, and stops when the
    largest score component is below 1e-8 or the relative deviance change
    is below 1e-10. ``robust`` controls the sandwich covariance; by default
    it is computed only for weighted fits.

    Raises ``SingularDesignError`` when the design is collinear.
    """
    x, groups, has_int = _as_matrix(design)
    y = np.asarray(response, dtype=float)
    n, k = x.shape
    if len(y) != n:
        raise ValueError("design rows and response length differ")
    weighted = weights is not None
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if len(w) != n:
        raise ValueError("weights length differs from response")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    if not (np.any(y == 1) and np.any(y == 0)):
        raise ValueError("response needs both classes")
    if robust is None:
        robust = weighted

    wsum = w.sum()
    ybar = float(np.dot(w, y) / wsum)
    null_ll = float(np.dot(w, y) * math.log(ybar) + (wsum - np.dot(w, y)) * math.log1p(-ybar))

    beta = np.zeros(k)
    if has_int:
        beta[0] = math.log(ybar) - math.log1p(-ybar)
    wy = w * y
    eta = x @ beta
    p, sp = _link_terms(eta)
    ll = float(wy @ eta - w @ sp)
    history = [beta]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        score = x.T @ (wy - w * p)
        if np.max(np.abs(score)) < SCORE_TOL:
            converged = True
            it -= 1
            break
        info = (x.T * (w * p * (1.0 - p))) @ x
        chol = _cholesky(info)
        if chol is None:
            if it == 1:
                raise SingularDesignError("information matrix is singular; the design is collinear")
            break
        step = _chol_solve(chol, score)
        for _ in range(MAX_HALVINGS + 1):
            new_beta = beta + step
            new_eta = x @ new_beta
            new_p, sp = _link_terms(new_eta)
            new_ll = float(wy @ new_eta - w @ sp)
            if new_ll >= ll - 1e-12 * abs(ll):
                break
            step = step * 0.5
        else:
            break
        rel = abs(2.0 * (new_ll - ll)) / (abs(2.0 * new_ll) + 0.1)
        beta, eta, p, ll = new_beta, new_eta, new_p, new_ll
        history.append(beta)
        if rel < DEVIANCE_TOL:
            converged = True
            break

    info = (x.T * (w * p * (1.0 - p))) @ x
    chol = _cholesky(info)
    if chol is not None:
        cov = _chol_solve(chol, np.eye(k))
    else:
        cov = np.linalg.pinv(info)
    cov = 0.5 * (cov + cov.T)
    sandwich = None
    if robust:
        u = x * (w * (y - p))[:, None]
        meat = u.T @ u
        sandwich = cov @ meat @ cov
        sandwich = 0.5 * (sandwich + sandwich.T)

    fit = GlmFit(
        coefficients=beta,
        model_covariance=cov,
        sandwich_covariance=sandwich,
        log_likelihood=ll,
        null_log_likelihood=null_ll,
        converged=converged,
        separation=Separation.NONE,
        iterations=it,
        n_used=n,
        groups=dict(groups),
        linear_predictor=eta,
        history=np.array(history[-4:]),
        weighted=weighted,
        separation_threshold=separation_threshold,
    )
    flag = detect_separation(design if isinstance(design, DesignMatrix) else x, y, fit, weights=w)
    if flag is not Separation.NONE:
        object.__setattr__(fit, "separation", flag)
    return fit


def _diverging(history: np.ndarray, threshold: float) -> np.ndarray:
    """Columns whose coefficient exceeds ``threshold`` and grew in magnitude over the last iterates."""
    last = np.abs(history[-1])
    big = last > threshold
    if len(history) < 3:
        return big
    tail = np.abs(history[-3:])
    growing = np.all(np.diff(tail, axis=0) > 0, axis=0)
    return big & growing


def _zero_cell(col: np.ndarray, y: np.ndarray, w: np.ndarray) -> bool:
    on = (col == 1) & (w > 0)
    off = (col == 0) & (w > 0)
    return bool(
        not np.any(on & (y == 1)) or not np.any(on & (y == 0))
        or not np.any(off & (y == 1)) or not np.any(off & (y == 0))
    )


def detect_separation(design, response, fit: GlmFit, weights=None) -> Separation:
    """Classify the fit as free of separation, quasi-separated or completely separated.

    Complete: the final linear predictor strictly orders the two response
    classes, the exposure column's 2x2 table with the response has an empty
    cell, or the exposure coefficient is past the threshold and still
    growing. Quasi: some other 0/1 column has an empty 2x2 cell, some other
    coefficient diverges, or the iteration cap was hit.
    """
    x, groups, _ = _as_matrix(design)
    y = np.asarray(response, dtype=float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    keep = w > 0
    eta = fit.linear_predictor if fit.linear_predictor is not None else x @ fit.coefficients
    if eta[keep & (y == 1)].min() > eta[keep & (y == 0)].max():
        return Separation.COMPLETE
    diverging = _diverging(fit.history, fit.separation_threshold) if fit.history is not None else (
        np.abs(fit.coefficients) > fit.separation_threshold
    )
    exp_cols = groups.get(EXPOSURE, ())
    for j in exp_cols:
        if _zero_cell(x[:, j], y, w) or diverging[j]:
            return Separation.COMPLETE
    binary = design.binary_columns if isinstance(design, DesignMatrix) else _binary_columns(x)
    for j in binary:
        if j not in exp_cols and _zero_cell(x[:, j], y, w):
            return Separation.QUASI
    if diverging.any() or not fit.converged:
        return Separation.QUASI
    return Separation.NONE


def _binary_columns(x):
    is_bin = np.all((x == 0) | (x == 1), axis=0)
    if x.shape[0] and np.all(x[:, 0] == 1):
        is_bin[0] = False
    return np.flatnonzero(is_bin)


def wald_test(fit: GlmFit, column_group, *, robust: bool | None = None) -> TestResult:
    """Joint Wald test that the coefficients of one column group are zero."""
    cols = fit.columns_of(column_group)
    if robust is None:
        cov = fit.covariance
    elif robust:
        if fit.sandwich_covariance is None:
            raise ValueError("fit has no sandwich covariance")
        cov = fit.sandwich_covariance
    else:
        cov = fit.model_covariance
    c = fit.coefficients[cols]
    v = cov[np.ix_(cols, cols)]
    if not np.any(c):
        return TestResult(0.0, len(cols), 1.0)
    try:
        stat = float(c @ np.linalg.solve(v, c))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("covariance block is singular") from exc
    return TestResult(stat, len(cols), chi2_sf(stat, len(cols)))


def likelihood_ratio_test(full: GlmFit, reduced: GlmFit) -> TestResult:
    """2(l_full - l_reduced) against chi-squared with the column-count difference as df."""
    if full.n_used != reduced.n_used:
        raise ValueError("models were fitted on different rows")
    df = len(full.coefficients) - len(reduced.coefficients)
    if df < 0:
        raise ValueError("reduced model has more columns than the full model")
    stat = 2.0 * (full.log_likelihood - reduced.log_likelihood)
    if stat < -1e-8:
        raise ValueError(f"negative likelihood-ratio statistic {stat:.3g}: models not nested or not converged")
    stat = max(stat, 0.0)
    return TestResult(stat, df, chi2_sf(stat, df) if df > 0 else 1.0)


def null_fit_test(fit: GlmFit) -> TestResult:
    """LR test of ``fit`` against the intercept-only model on the same rows."""
    df = len(fit.coefficients) - 1
    stat = max(2.0 * (fit.log_likelihood - fit.null_log_likelihood), 0.0)
    return TestResult(stat, df, chi2_sf(stat, df) if df > 0 else 1.0)


def cox_snell_r2(fit: GlmFit) -> float:
    """Generalized R^2 = 1 - exp(2 (l0 - l1) / n), clamped to [0, 1)."""
    r2 = -math.expm1(2.0 * (fit.null_log_likelihood - fit.log_likelihood) / fit.n_used)
    return min(max(r2, 0.0), np.nextafter(1.0, 0.0))


@dataclass(frozen=True, eq=False)
class BatchFit:
    """Results of fitting several same-width designs against one response."""

    coefficients: np.ndarray  # (m, k)
    log_likelihood: np.ndarray  # (m,)
    null_log_likelihood: float
    converged: np.ndarray  # (m,) bool
    iterations: np.ndarray  # (m,) int
    diverging: np.ndarray  # (m, k) bool
    ordered: np.ndarray  # (m,) bool: linear predictor strictly orders the classes


def fit_logistic_batch(
    designs: np.ndarray,
    response,
    *,
    max_iter: int = MAX_ITER,
    separation_threshold: float = SEPARATION_THRESHOLD,
) -> BatchFit:
    """Unweighted IRLS on a stack of designs ``(m, n, k)`` sharing one response.

    Each member follows the same iteration, step-halving and stopping rules
    as ``fit_logistic``; first columns must be the intercept. Raises
    ``SingularDesignError`` if any member's design is collinear.
    """
    xs = np.asarray(designs, dtype=float)
    y = np.asarray(response, dtype=float)
    m, n, k = xs.shape
    if not (np.any(y == 1) and np.any(y == 0)):
        raise ValueError("response needs both classes")
    ybar = float(y.mean())
    null_ll = float(y.sum() * math.log(ybar) + (n - y.sum()) * math.log1p(-ybar))
    xt = np.ascontiguousarray(xs.transpose(0, 2, 1))
    # outer products of design rows, so information is one batched matrix-vector product
    outer = np.ascontiguousarray((xt[:, :, None, :] * xt[:, None, :, :]).reshape(m, k * k, n))

    def evaluate(xa, b):
        eta = np.matmul(xa, b[..., None])[..., 0]
        p, sp = _link_terms(eta)
        return eta, p, eta @ y - sp.sum(axis=1)

    beta = np.zeros((m, k))
    beta[:, 0] = math.log(ybar) - math.log1p(-ybar)
    eta, p, ll = evaluate(xs, beta)
    hist = [beta.copy()]
    converged = np.zeros(m, dtype=bool)
    iterations = np.zeros(m, dtype=int)
    active = np.arange(m)
    for it in range(1, max_iter + 1):
        if active.size == 0:
            break
        full = active.size == m
        xa = xs if full else xs[active]
        xta = xt if full else xt[active]
        pa = p[active]
        score = np.matmul(xta, (y - pa)[..., None])[..., 0]
        done = np.max(np.abs(score), axis=1) < SCORE_TOL
        if done.any():
            converged[active[done]] = True
            iterations[active[done]] = it - 1
            keep = ~done
            active, xa, xta, pa, score = active[keep], xa[keep], xta[keep], pa[keep], score[keep]
            full = False
            if active.size == 0:
                break
        oa = outer if full else outer[active]
        info = np.matmul(oa, (pa * (1.0 - pa))[..., None]).reshape(-1, k, k)
        if it == 1:
            try:
                d = np.diagonal(np.linalg.cholesky(info), axis1=1, axis2=2)
            except np.linalg.LinAlgError:
                d = None
            if d is None or np.any(d.min(axis=1) <= 1e-7 * d.max(axis=1)):
                raise SingularDesignError("information matrix is singular; the design is collinear")
        try:
            step = np.linalg.solve(info, score[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(a, s, rcond=None)[0] for a, s in zip(info, score)])
        b0, ll0 = beta[active], ll[active]
        new_beta = b0 + step
        new_eta, new_p, new_ll = evaluate(xa, new_beta)
        tol = 1e-12 * np.abs(ll0)
        bad = new_ll < ll0 - tol
        for _ in range(MAX_HALVINGS):
            if not bad.any():
                break
            idx = np.flatnonzero(bad)
            step[idx] *= 0.5
            new_beta[idx] = b0[idx] + step[idx]
            new_eta[idx], new_p[idx], new_ll[idx] = evaluate(xa[idx], new_beta[idx])
            bad[idx] = new_ll[idx] < ll0[idx] - tol[idx]
        ok = ~bad
        rel = np.abs(2.0 * (new_ll - ll0)) / (np.abs(2.0 * new_ll) + 0.1)
        upd = active[ok]
        beta[upd], eta[upd], p[upd], ll[upd] = new_beta[ok], new_eta[ok], new_p[ok], new_ll[ok]
        iterations[active] = it
        hist.append(beta.copy())
        fin = ok & (rel < DEVIANCE_TOL)
        converged[active[fin]] = True
        active = active[~(fin | bad)]
    if active.size:
        iterations[active] = max_iter

    hist = np.array(hist)
    big = np.abs(beta) > separation_threshold
    growing = np.zeros_like(big)
    for i in np.flatnonzero(big.any(axis=1)):
        t = iterations[i]
        tail = np.abs(hist[max(t - 2, 0): t + 1, i])
        growing[i] = np.all(np.diff(tail, axis=0) > 0, axis=0) if len(tail) >= 3 else True
    ordered = eta[:, y == 1].min(axis=1) > eta[:, y == 0].max(axis=1)
    return BatchFit(beta, ll, null_ll, converged, iterations, big & growing, ordered)


def zero_cell_columns(x: np.ndarray, y: np.ndarray, columns) -> np.ndarray:
    """For each listed 0/1 column, whether its 2x2 table with ``y`` has an empty cell."""
    cols = np.asarray(columns, dtype=int)
    if cols.size == 0:
        return np.zeros(0, dtype=bool)
    sub = x[:, cols]
    on_events = y @ sub
    on_total = sub.sum(axis=0)
    events, n = y.sum(), len(y)
    cells = np.stack([on_events, on_total - on_events, events - on_events, (n - events) - (on_total - on_events)])
    return np.any(cells == 0, axis=0)


def classify_separation(*, ordered: bool, exposure_problem: bool, other_zero_cell: bool,
                        other_diverging: bool, converged: bool) -> Separation:
    """Combine precomputed separation evidence using the ``detect_separation`` rules."""
    if ordered or exposure_problem:
        return Separation.COMPLETE
    if other_zero_cell or other_diverging or not converged:
        return Separation.QUASI
    return Separation.NONE
