"""Data-generating processes for the four simulation scenarios and the marginal odds-ratio oracle.

Scenarios I and II use uniform, Bernoulli and equiprobable categorical
covariates with fixed propensity and outcome models; II adds three
unobserved normal variables. Scenarios III and IV use models fitted to a
birth-defects registry, over a synthetic 37-variable pool whose informative
marginals (asthma, maternal height, referral source) come from
``calibrate_otis_marginals`` and are frozen in ``data/otis_laws.json``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .tabular import BINARY, CATEGORICAL, CONTINUOUS, CovariateSchema, Dataset, Variable, categorical

SCENARIO_IDS = ("I", "II", "III", "IV")


# --- laws and predictors ---------------------------------------------------

@dataclass(frozen=True)
class Law:
    """Marginal distribution of one covariate.

    kind is ``uniform`` (params low, high), ``bernoulli`` (p),
    ``categorical`` (level probabilities) or ``normal`` (mean, sd).
    """

    kind: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.kind == "categorical":
            probs = np.asarray(self.params)
            if np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, abs_tol=1e-9):
                raise ValueError("categorical probabilities must be nonnegative and sum to 1")
        elif self.kind == "bernoulli":
            if not 0 <= self.params[0] <= 1:
                raise ValueError("bernoulli p must be in [0, 1]")
        elif self.kind == "normal":
            if self.params[1] < 0:
                raise ValueError("normal sd must be nonnegative")
        elif self.kind != "uniform":
            raise ValueError(f"unknown law {self.kind!r}")

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(self.params[0], self.params[1], n)
        if self.kind == "bernoulli":
            return (rng.random(n) < self.params[0]).astype(float)
        if self.kind == "normal":
            return rng.normal(self.params[0], self.params[1], n)
        cum = np.cumsum(self.params)
        cum[-1] = 1.0
        return np.searchsorted(cum, rng.random(n), side="right").astype(np.int64)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Law":
        return cls(d["kind"], tuple(float(p) for p in d["params"]))


def uniform(low=0.0, high=1.0) -> Law:
    return Law("uniform", (low, high))


def bernoulli(p=0.5) -> Law:
    return Law("bernoulli", (p,))


def equiprobable(levels: int) -> Law:
    return Law("categorical", tuple([1.0 / levels] * levels))


def normal(mean=0.0, sd=1.0) -> Law:
    return Law("normal", (mean, sd))


@dataclass(frozen=True)
class Term:
    variable: str
    coefficient: float
    level: str | None = None  # categorical level label for dummy terms


@dataclass(frozen=True)
class LinearPredictor:
    intercept: float
    terms: tuple[Term, ...] = ()
    latent_terms: tuple[tuple[str, float], ...] = ()
    exposure_coef: float = 0.0

    def evaluate(self, schema: CovariateSchema, covariates: Mapping[str, np.ndarray],
                 latents: Mapping[str, np.ndarray] | None = None, exposure=None, n: int | None = None) -> np.ndarray:
        if n is None:
            n = len(next(iter(covariates.values())))
        eta = np.full(n, self.intercept, dtype=float)
        for t in self.terms:
            col = covariates[t.variable]
            if t.level is None:
                eta += t.coefficient * col
            else:
                var = schema[t.variable]
                eta += t.coefficient * (col == var.levels.index(t.level))
        for name, coef in self.latent_terms:
            eta += coef * latents[name]
        if self.exposure_coef and exposure is not None:
            eta += self.exposure_coef * exposure
        return eta

    def variables(self) -> set[str]:
        return {t.variable for t in self.terms}

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "exposure_coef": self.exposure_coef,
            "terms": [{"variable": t.variable, "level": t.level, "coefficient": t.coefficient} for t in self.terms],
            "latent_terms": [{"latent": n, "coefficient": c} for n, c in self.latent_terms],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LinearPredictor":
        return cls(
            float(d["intercept"]),
            tuple(Term(t["variable"], float(t["coefficient"]), t.get("level")) for t in d["terms"]),
            tuple((t["latent"], float(t["coefficient"])) for t in d["latent_terms"]),
            float(d.get("exposure_coef", 0.0)),
        )


@dataclass(frozen=True, eq=False)
class Scenario:
    id: str
    n: int
    schema: CovariateSchema
    laws: Mapping[str, Law]
    latents: tuple[tuple[str, float], ...]  # (name, variance)
    propensity: LinearPredictor
    outcome: LinearPredictor
    true_confounders: tuple[str, ...]
    latent_scale: str = "variance"

    @property
    def pool(self) -> list[str]:
        return self.schema.names

    @property
    def conditional_log_or(self) -> float:
        return self.outcome.exposure_coef

    def latent_sd(self, name: str) -> float:
        value = dict(self.latents)[name]
        return math.sqrt(value) if self.latent_scale == "variance" else value

    def to_dict(self) -> dict:
        variables = []
        for v in self.schema.variables:
            entry = {"name": v.name, "kind": v.kind, "law": self.laws[v.name].to_dict()}
            if v.kind == CATEGORICAL:
                entry["levels"] = list(v.levels)
                entry["reference"] = v.levels[v.reference]
            variables.append(entry)
        return {
            "id": self.id,
            "n": self.n,
            "latent_scale": self.latent_scale,
            "variables": variables,
            "latents": [{"name": n, "value": v} for n, v in self.latents],
            "propensity": self.propensity.to_dict(),
            "outcome": self.outcome.to_dict(),
            "true_confounders": list(self.true_confounders),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scenario":
        variables, laws = [], {}
        for e in d["variables"]:
            if e["kind"] == CATEGORICAL:
                levels = tuple(e["levels"])
                variables.append(Variable(e["name"], CATEGORICAL, levels, levels.index(e["reference"])))
            else:
                variables.append(Variable(e["name"], e["kind"]))
            laws[e["name"]] = Law.from_dict(e["law"])
        scenario = cls(
            id=d["id"],
            n=int(d["n"]),
            schema=CovariateSchema(tuple(variables)),
            laws=laws,
            latents=tuple((l["name"], float(l["value"])) for l in d["latents"]),
            propensity=LinearPredictor.from_dict(d["propensity"]),
            outcome=LinearPredictor.from_dict(d["outcome"]),
            true_confounders=tuple(d["true_confounders"]),
            latent_scale=d.get("latent_scale", "variance"),
        )
        scenario.validate()
        return scenario

    def validate(self):
        for lp in (self.propensity, self.outcome):
            for t in lp.terms:
                var = self.schema[t.variable]
                if t.level is not None and (var.kind != CATEGORICAL or t.level not in var.levels):
                    raise ValueError(f"{t.variable}: bad level {t.level!r}")
            names = {n for n, _ in self.latents}
            for name, _ in lp.latent_terms:
                if name not in names:
                    raise ValueError(f"unknown latent {name!r}")
        for name in self.true_confounders:
            if name not in self.schema:
                raise ValueError(f"true confounder {name!r} not in pool")
        for v in self.schema.variables:
            law = self.laws[v.name]
            if v.kind == CATEGORICAL and (law.kind != "categorical" or len(law.params) != v.level_count):
                raise ValueError(f"{v.name}: law does not match {v.level_count} levels")
            if v.kind == BINARY and law.kind != "bernoulli":
                raise ValueError(f"{v.name}: binary variables need a bernoulli law")
            if v.kind == CONTINUOUS and law.kind not in ("uniform", "normal"):
                raise ValueError(f"{v.name}: continuous variables need a uniform or normal law")

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TrueEffects:
    conditional_log_or: float
    marginal_log_or: float
    oracle_sample_size: int
    oracle_mc_error: float


# --- scenario definitions --------------------------------------------------

def _general_pool() -> tuple[list[Variable], dict[str, Law]]:
    """X1..X6 plus 24 noise candidates (7 uniform, 10 Bernoulli, 2x3, 3x4, 2x5 levels)."""
    variables = [
        Variable("X1", CONTINUOUS), Variable("X2", BINARY), Variable("X3", CONTINUOUS),
        Variable("X4", CONTINUOUS), categorical("X5", 3), categorical("X6", 3),
    ]
    laws = {"X1": uniform(), "X2": bernoulli(), "X3": uniform(), "X4": uniform(),
            "X5": equiprobable(3), "X6": equiprobable(3)}
    index = 7
    for count, kind, levels in ((7, CONTINUOUS, 0), (10, BINARY, 0), (2, CATEGORICAL, 3),
                                (3, CATEGORICAL, 4), (2, CATEGORICAL, 5)):
        for _ in range(count):
            name = f"X{index}"
            if kind == CATEGORICAL:
                variables.append(categorical(name, levels))
                laws[name] = equiprobable(levels)
            else:
                variables.append(Variable(name, kind))
                laws[name] = uniform() if kind == CONTINUOUS else bernoulli()
            index += 1
    return variables, laws


GENERAL_PROPENSITY = LinearPredictor(
    1.65,
    (Term("X1", -1.5), Term("X2", 1.0), Term("X3", -1.0), Term("X5", 0.6, "2"), Term("X5", 1.2, "3")),
)
GENERAL_OUTCOME = LinearPredictor(
    -3.25,
    (Term("X1", -1.5), Term("X2", -1.0), Term("X4", 2.0), Term("X6", -0.6, "2"), Term("X6", -1.2, "3")),
    exposure_coef=1.0,
)

REFERRAL_LEVELS = ("0", "1", "2", "3", "4", "5")  # professional, internet, other, support group, sponsor, TIS

# (name, kind, levels) in registry-table order; 37 of the 44 listed variables
OTIS_POOL = (
    ("asthma", BINARY, 2),
    ("mat_height", CONTINUOUS, 0),
    ("mat_age_group", CATEGORICAL, 4),
    ("race", CATEGORICAL, 4),
    ("comed_duration", CATEGORICAL, 5),
    ("education", CATEGORICAL, 3),
    ("multiple_birth", BINARY, 2),
    ("years_since_diagnosis", CONTINUOUS, 0),
    ("severity_1", CONTINUOUS, 0),
    ("severity_2", CONTINUOUS, 0),
    ("referral", CATEGORICAL, 6),
    ("ivf", BINARY, 2),
    ("history_birth_defects", BINARY, 2),
    ("smoking", BINARY, 2),
    ("infections", CATEGORICAL, 3),
    ("severity_3", CONTINUOUS, 0),
    ("severity_4", CONTINUOUS, 0),
    ("ses", CATEGORICAL, 3),
    ("n_other_diseases", BINARY, 2),
    ("vitamin", CATEGORICAL, 3),
    ("thyroid", BINARY, 2),
    ("psychiatric", BINARY, 2),
    ("gestational_age", CONTINUOUS, 0),
    ("intended_pregnancy", BINARY, 2),
    ("bmi", CATEGORICAL, 4),
    ("other_diseases", BINARY, 2),
    ("amniocentesis", BINARY, 2),
    ("chorionic_villus", BINARY, 2),
    ("primary_disease", BINARY, 2),
    ("other_teratogens", BINARY, 2),
    ("birth_gender", CATEGORICAL, 3),
    ("ultrasound_2", BINARY, 2),
    ("severity_5", CONTINUOUS, 0),
    ("imputation_1", BINARY, 2),
    ("imputation_2", BINARY, 2),
    ("country", CATEGORICAL, 3),
    ("mat_weight", CONTINUOUS, 0),
)

OTIS_PROPENSITY = LinearPredictor(
    9.68,
    (Term("asthma", -0.54), Term("mat_height", -0.05),
     Term("referral", -0.45, "1"), Term("referral", 0.34, "2"), Term("referral", -17.19, "3"),
     Term("referral", 2.14, "4"), Term("referral", -1.93, "5")),
)
OTIS_OUTCOME = LinearPredictor(8.23, (Term("asthma", 1.59), Term("mat_height", -0.07)), exposure_coef=1.03)
OTIS_OUTCOME_LATENT = LinearPredictor(
    10.5, (Term("asthma", 2.29), Term("mat_height", -0.10)), (("Z", 1.0),), exposure_coef=1.48,
)
OTIS_INFORMATIVE = ("asthma", "mat_height", "referral")


def default_otis_laws(scenario_id: str) -> dict[str, Law]:
    """Frozen calibrated marginals for asthma, maternal height (cm) and referral source."""
    text = resources.files("rareps").joinpath("data/otis_laws.json").read_text()
    return {k: Law.from_dict(v) for k, v in json.loads(text)["laws"][scenario_id].items()}


def _otis_pool(informative: Mapping[str, Law]) -> tuple[list[Variable], dict[str, Law]]:
    variables, laws = [], {}
    for name, kind, levels in OTIS_POOL:
        if name == "referral":
            variables.append(Variable(name, CATEGORICAL, REFERRAL_LEVELS, 0))
        elif kind == CATEGORICAL:
            variables.append(categorical(name, levels))
        else:
            variables.append(Variable(name, kind))
        if name in informative:
            laws[name] = informative[name]
        elif kind == CATEGORICAL:
            laws[name] = equiprobable(levels)
        elif kind == BINARY:
            laws[name] = bernoulli()
        else:
            laws[name] = normal()
    return variables, laws


_OVERRIDE_KEYS = {"n", "latent_scale", "laws"}


def build_scenario(scenario_id: str, overrides: Mapping | None = None) -> Scenario:
    """Fully parameterized scenario I, II, III or IV.

    ``overrides`` may set ``n``, ``latent_scale`` ("variance" reads N(0, v)
    as variance v, "sd" as standard deviation v) and ``laws`` (a mapping of
    variable name to Law or law dict).
    """
    overrides = dict(overrides or {})
    unknown = set(overrides) - _OVERRIDE_KEYS
    if unknown:
        raise ValueError(f"invalid override keys: {sorted(unknown)}")
    if scenario_id in ("I", "II"):
        variables, laws = _general_pool()
        propensity, outcome = GENERAL_PROPENSITY, GENERAL_OUTCOME
        latents: tuple = ()
        if scenario_id == "II":
            latents = (("Z1", 0.25), ("Z2", 0.25), ("Z3", 0.25))
            propensity = replace(propensity, latent_terms=(("Z1", 1.0), ("Z2", 1.0)))
            outcome = replace(outcome, latent_terms=(("Z2", 1.0), ("Z3", 1.0)))
        n, true = 600, ("X1", "X2")
    elif scenario_id in ("III", "IV"):
        variables, laws = _otis_pool(default_otis_laws(scenario_id))
        propensity = OTIS_PROPENSITY
        outcome = OTIS_OUTCOME if scenario_id == "III" else OTIS_OUTCOME_LATENT
        latents = () if scenario_id == "III" else (("Z", 3.9),)
        n, true = 439, ("asthma", "mat_height")
    else:
        raise ValueError(f"unknown scenario {scenario_id!r}")
    for name, law in dict(overrides.get("laws", {})).items():
        if name not in laws:
            raise ValueError(f"law override for unknown variable {name!r}")
        laws[name] = law if isinstance(law, Law) else Law.from_dict(law)
    scale = overrides.get("latent_scale", "variance")
    if scale not in ("variance", "sd"):
        raise ValueError("latent_scale must be 'variance' or 'sd'")
    n = int(overrides.get("n", n))
    if n < 1:
        raise ValueError("n must be positive")
    scenario = Scenario(scenario_id, n, CovariateSchema(tuple(variables)), laws, latents,
                        propensity, outcome, true, scale)
    scenario.validate()
    return scenario


# --- generation ------------------------------------------------------------

def _draw_latents(scenario: Scenario, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {name: rng.normal(0.0, scenario.latent_sd(name), n) for name, _ in scenario.latents}


def _expit(eta):
    return 1.0 / (1.0 + np.exp(-eta))


def generate(scenario: Scenario, rng: np.random.Generator) -> Dataset:
    """One simulated study: covariates, then latents, exposure and outcome, in that draw order.

    Latent variables drive exposure and outcome but are not part of the result.
    """
    n = scenario.n
    covariates = {v.name: scenario.laws[v.name].draw(n, rng) for v in scenario.schema.variables}
    latents = _draw_latents(scenario, n, rng)
    with np.errstate(over="ignore"):
        pa = _expit(scenario.propensity.evaluate(scenario.schema, covariates, latents, n=n))
        exposure = (rng.random(n) < pa).astype(np.int8)
        py = _expit(scenario.outcome.evaluate(scenario.schema, covariates, latents, exposure, n=n))
    outcome = (rng.random(n) < py).astype(np.int8)
    return Dataset(scenario.schema, exposure, outcome, covariates)


def _outcome_relevant(scenario: Scenario, n: int, rng: np.random.Generator):
    names = [v.name for v in scenario.schema.variables if v.name in scenario.outcome.variables()]
    covariates = {name: scenario.laws[name].draw(n, rng) for name in names}
    latents = {name: rng.normal(0.0, scenario.latent_sd(name), n)
               for name, _ in scenario.latents if name in dict(scenario.outcome.latent_terms)}
    return covariates, latents


def marginal_or_oracle(
    scenario: Scenario,
    sample_size: int = 10**7,
    rng: np.random.Generator | int | None = None,
    *,
    chunk_size: int = 10**6,
) -> TrueEffects:
    """Monte Carlo log marginal OR, logit E[P(Y=1|A=1,X)] - logit E[P(Y=1|A=0,X)].

    Covariates and latents are drawn from their laws and both exposure levels
    are imposed on every draw. The reported error is the delta-method
    standard error from the joint sample moments of the two probabilities.
    """
    if sample_size < 10**5:
        raise ValueError("sample_size must be at least 1e5")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    s1, s0, s11, s00, s10 = [], [], [], [], []
    done = 0
    while done < sample_size:
        m = min(chunk_size, sample_size - done)
        covariates, latents = _outcome_relevant(scenario, m, rng)
        eta0 = scenario.outcome.evaluate(scenario.schema, covariates, latents, n=m)
        p0 = _expit(eta0)
        p1 = _expit(eta0 + scenario.outcome.exposure_coef)
        s1.append(p1.sum()); s0.append(p0.sum())
        s11.append(p1 @ p1); s00.append(p0 @ p0); s10.append(p1 @ p0)
        done += m
    n = sample_size
    m1, m0 = math.fsum(s1) / n, math.fsum(s0) / n
    v11 = math.fsum(s11) / n - m1 * m1
    v00 = math.fsum(s00) / n - m0 * m0
    v10 = math.fsum(s10) / n - m1 * m0
    g1, g0 = 1.0 / (m1 * (1 - m1)), -1.0 / (m0 * (1 - m0))
    var = max(g1 * g1 * v11 + g0 * g0 * v00 + 2 * g1 * g0 * v10, 0.0) / n
    marginal = (math.log(m1) - math.log1p(-m1)) - (math.log(m0) - math.log1p(-m0))
    return TrueEffects(scenario.conditional_log_or, marginal, n, math.sqrt(var))


def event_statistics(totals: np.ndarray, unexposed: np.ndarray) -> dict[str, float]:
    """Mean/SD of total events and the zero / at-most-five unexposed-event fractions."""
    totals = np.asarray(totals, dtype=float)
    unexposed = np.asarray(unexposed)
    return {
        "events_mean": float(totals.mean()),
        "events_sd": float(totals.std(ddof=1)) if len(totals) > 1 else math.nan,
        "frac_zero_unexposed": float(np.mean(unexposed == 0)),
        "frac_le5_unexposed": float(np.mean(unexposed <= 5)),
    }


# --- calibration of the registry-based marginals ----------------------------

OTIS_IDS = ("III", "IV")


@dataclass(frozen=True)
class OtisTargets:
    """Target event statistics for scenarios III and IV plus soft association targets.

    Soft targets are generalized R² values of the registry data (exposure on
    referral source, asthma and maternal height; outcome on asthma and
    height) and the observed exposed fraction 319/463.
    """

    events_mean: Mapping[str, float] = field(default_factory=lambda: {"III": 34.1, "IV": 34.0})
    frac_zero_unexposed: Mapping[str, float] = field(default_factory=lambda: {"III": 0.006, "IV": 0.007})
    frac_le5_unexposed: Mapping[str, float] = field(default_factory=lambda: {"III": 0.59, "IV": 0.63})
    exposure_rate: float = 319 / 463
    r2_exposure: Mapping[str, float] = field(
        default_factory=lambda: {"referral": 0.162, "asthma": 0.006, "mat_height": 0.021})
    r2_outcome: Mapping[str, float] = field(default_factory=lambda: {"asthma": 0.028, "mat_height": 0.023})

    @classmethod
    def from_dict(cls, d: Mapping) -> "OtisTargets":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown target keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SearchConfig:
    asthma_bounds: tuple[float, float] = (0.01, 0.6)
    height_mean_bounds: tuple[float, float] = (145.0, 180.0)
    height_sd_bounds: tuple[float, float] = (3.0, 12.0)
    referral_logit_bounds: tuple[float, float] = (-6.0, 6.0)
    tolerance: tuple[float, float, float] = (1.0, 0.003, 0.03)  # events, zero-unexposed, <=5 fractions
    soft_weight: float = 1.0
    referral_prior: tuple[float, ...] = (0.5, 0.15, 0.15, 0.02, 0.16, 0.02)  # support group rare
    prior_weight: float = 1.0  # per unit of log-probability deviation from referral_prior
    pilot_replicates: int = 10_000
    pilot_seed: int = 20240611
    quadrature_nodes: int = 48

    def __post_init__(self):
        for name in ("asthma_bounds", "height_mean_bounds", "height_sd_bounds", "referral_logit_bounds"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name}: empty interval")
        if self.height_sd_bounds[0] <= 0:
            raise ValueError("height sd bounds must be positive")
        if len(self.referral_prior) != len(REFERRAL_LEVELS) or min(self.referral_prior) <= 0:
            raise ValueError("referral_prior needs one positive probability per referral level")
        if self.pilot_replicates < 1:
            raise ValueError("pilot_replicates must be positive")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SearchConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown search keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class CalibrationResult:
    laws: dict[str, dict[str, Law]]  # scenario id -> informative laws
    expected: dict[str, dict[str, float]]  # closed-form statistics per scenario
    pilot: dict[str, dict[str, float]]  # simulated statistics per scenario
    residuals: dict[str, dict[str, float]]  # pilot minus target
    accepted: bool

    def to_dict(self) -> dict:
        return {
            "laws": {sid: {k: v.to_dict() for k, v in laws.items()} for sid, laws in self.laws.items()},
            "expected": self.expected,
            "pilot": self.pilot,
            "residuals": self.residuals,
            "accepted": self.accepted,
        }

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


class CalibrationError(RuntimeError):
    def __init__(self, message: str, result: CalibrationResult):
        super().__init__(message)
        self.result = result


def check_law_bounds(laws: Mapping[str, Law], config: SearchConfig | None = None):
    """Reject informative laws outside the search box (e.g. a degenerate height sd)."""
    config = config or SearchConfig()
    p = laws["asthma"].params[0]
    mean, sd = laws["mat_height"].params
    for value, (lo, hi), what in ((p, config.asthma_bounds, "asthma prevalence"),
                                  (mean, config.height_mean_bounds, "height mean"),
                                  (sd, config.height_sd_bounds, "height sd")):
        if not lo <= value <= hi:
            raise ValueError(f"{what} {value} outside [{lo}, {hi}]")


def _entropy(p):
    p = np.clip(np.asarray(p, dtype=float), 1e-300, 1.0)
    q = np.clip(1.0 - p, 1e-300, 1.0)
    return -(p * np.log(p) + q * np.log(q))


def _r2_from_information(mi: float) -> float:
    # large-sample Cox-Snell R² for a per-observation log-likelihood gain mi
    return -math.expm1(-2.0 * mi)


def _projected_information(x, weights, p) -> float:
    """Log-likelihood gain per observation of a univariate logistic fit on x, in the population limit."""
    from .glm import fit_logistic

    m = len(x)
    design = np.column_stack([np.ones(2 * m), np.concatenate([x, x])])
    response = np.concatenate([np.ones(m), np.zeros(m)])
    w = np.concatenate([weights * p, weights * (1 - p)])
    fit = fit_logistic(design, response, w, robust=False)
    return (fit.log_likelihood - fit.null_log_likelihood) / w.sum()


def otis_expectations(laws: Mapping[str, Law], scenario_id: str, n: int = 439,
                      nodes: int = 48) -> dict[str, float]:
    """Exact event statistics implied by the informative laws for scenario III or IV.

    Subjects are independent, so total events ~ Binomial(n, q) and unexposed
    events ~ Binomial(n, r), with q and r expectations over asthma, height,
    referral source and the latent Z (Gauss-Hermite quadrature for the
    normal variables). Generalized R² values are population limits.
    """
    from scipy.stats import binom

    if scenario_id not in OTIS_IDS:
        raise ValueError(f"not a registry scenario: {scenario_id!r}")
    p_asthma = laws["asthma"].params[0]
    mean, sd = laws["mat_height"].params
    ref = np.asarray(laws["referral"].params)
    z, zw = np.polynomial.hermite_e.hermegauss(nodes)
    zw = zw / zw.sum()
    heights = mean + sd * z
    asthma, height, referral = np.meshgrid([0.0, 1.0], heights, np.arange(len(ref)), indexing="ij")
    pa = np.array([1 - p_asthma, p_asthma])
    weights = (pa[:, None, None] * zw[None, :, None] * ref[None, None, :]).ravel()
    covariates = {"asthma": asthma.ravel(), "mat_height": height.ravel(),
                  "referral": referral.ravel().astype(np.int64)}
    schema = CovariateSchema((Variable("asthma", BINARY), Variable("mat_height", CONTINUOUS),
                              Variable("referral", CATEGORICAL, REFERRAL_LEVELS, 0)))
    pi = _expit(OTIS_PROPENSITY.evaluate(schema, covariates))
    model = OTIS_OUTCOME if scenario_id == "III" else OTIS_OUTCOME_LATENT
    eta0 = model.evaluate(schema, covariates, {"Z": np.zeros(len(weights))})
    if model.latent_terms:
        latent = math.sqrt(3.9) * z
        p0 = _expit(eta0[:, None] + latent[None, :]) @ zw
        p1 = _expit(eta0[:, None] + model.exposure_coef + latent[None, :]) @ zw
    else:
        p0, p1 = _expit(eta0), _expit(eta0 + model.exposure_coef)
    py = pi * p1 + (1 - pi) * p0
    q = float(weights @ py)
    r = float(weights @ ((1 - pi) * p0))
    ea = float(weights @ pi)

    def by(values, axis):
        # conditional mean of values given asthma (axis (1, 2)), height (0, 2) or referral (0, 1)
        total = (weights * values).reshape(2, nodes, -1).sum(axis=axis)
        return total / weights.reshape(2, nodes, -1).sum(axis=axis)

    stats = {
        "events_mean": n * q,
        "events_sd": math.sqrt(n * q * (1 - q)),
        "frac_zero_unexposed": math.exp(n * math.log1p(-r)),
        "frac_le5_unexposed": float(binom.cdf(5, n, r)),
        "exposure_rate": ea,
        "r2_exposure_referral": _r2_from_information(float(_entropy(ea) - ref @ _entropy(by(pi, (0, 1))))),
        "r2_exposure_asthma": _r2_from_information(float(_entropy(ea) - pa @ _entropy(by(pi, (1, 2))))),
        "r2_exposure_mat_height": _r2_from_information(_projected_information(heights, zw, by(pi, (0, 2)))),
        "r2_outcome_asthma": _r2_from_information(float(_entropy(q) - pa @ _entropy(by(py, (1, 2))))),
        "r2_outcome_mat_height": _r2_from_information(_projected_information(heights, zw, by(py, (0, 2)))),
    }
    if not model.latent_terms:
        # true outcome model given A and the covariates
        cond = weights @ (pi * _entropy(p1) + (1 - pi) * _entropy(p0))
        stats["r2_outcome_model"] = _r2_from_information(float(_entropy(q) - cond))
    return stats


def check_event_targets(stats: Mapping[str, float], targets: OtisTargets, scenario_id: str,
                        tolerance=(1.0, 0.003, 0.03)) -> tuple[dict[str, float], bool]:
    """Residuals (achieved minus target) of the three event statistics and whether all are within tolerance."""
    keys = ("events_mean", "frac_zero_unexposed", "frac_le5_unexposed")
    resid = {k: stats[k] - getattr(targets, k)[scenario_id] for k in keys}
    return resid, all(abs(resid[k]) <= tol for k, tol in zip(keys, tolerance))


def _laws_from_vector(theta) -> dict[str, Law]:
    logits = np.concatenate([[0.0], theta[3:]])
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    return {
        "asthma": bernoulli(float(theta[0])),
        "mat_height": normal(float(theta[1]), float(theta[2])),
        "referral": Law("categorical", tuple(float(p) for p in probs)),
    }


def pilot_statistics(scenario: Scenario, replicates: int, seed: int) -> dict[str, float]:
    """Event statistics of ``replicates`` simulated datasets, replicate i drawn from stream (seed, i)."""
    totals, unexposed = np.empty(replicates), np.empty(replicates)
    for i in range(replicates):
        data = generate(scenario, np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, i]))))
        a, b, c, d = data.counts()
        totals[i], unexposed[i] = a + c, c
    return event_statistics(totals, unexposed)


def calibrate_otis_marginals(
    targets: OtisTargets | None = None,
    search_config: SearchConfig | None = None,
    *,
    initial: Mapping[str, Law] | None = None,
) -> CalibrationResult:
    """Fit asthma prevalence, height Normal(mean, sd) and referral probabilities to the event targets.

    Each scenario gets its own laws. The closed-form event statistics of
    ``otis_expectations`` are matched by bounded least squares (residuals
    scaled by the tolerances, soft association targets down-weighted), then
    checked with a pilot simulation. Raises CalibrationError, carrying the
    best laws and residuals, when a pilot misses any tolerance.
    """
    from scipy.optimize import least_squares

    targets = targets or OtisTargets()
    config = search_config or SearchConfig()
    tol_events, tol_zero, tol_le5 = config.tolerance
    soft = config.soft_weight
    log_prior = np.log(np.asarray(config.referral_prior) / sum(config.referral_prior))

    def residuals(theta, sid):
        s = otis_expectations(_laws_from_vector(theta), sid, nodes=config.quadrature_nodes)
        res = [
            (s["events_mean"] - targets.events_mean[sid]) / tol_events,
            (s["frac_zero_unexposed"] - targets.frac_zero_unexposed[sid]) / tol_zero,
            (s["frac_le5_unexposed"] - targets.frac_le5_unexposed[sid]) / tol_le5,
            soft * (s["exposure_rate"] - targets.exposure_rate) / 0.02,
        ]
        res += [soft * (s[f"r2_exposure_{k}"] - v) / 0.01 for k, v in targets.r2_exposure.items()]
        res += [soft * (s[f"r2_outcome_{k}"] - v) / 0.01 for k, v in targets.r2_outcome.items()]
        # keeps every referral level populated; the targets alone leave the mix under-determined
        probs = np.asarray(_laws_from_vector(theta)["referral"].params)
        res += list(config.prior_weight * (np.log(probs) - log_prior))
        return np.array(res)

    if initial is None:
        initial = {"asthma": bernoulli(0.2), "mat_height": normal(163.0, 7.0),
                   "referral": Law("categorical", config.referral_prior)}
    probs = np.asarray(initial["referral"].params)
    lo = [config.asthma_bounds[0], config.height_mean_bounds[0], config.height_sd_bounds[0]]
    hi = [config.asthma_bounds[1], config.height_mean_bounds[1], config.height_sd_bounds[1]]
    lo += [config.referral_logit_bounds[0]] * 5
    hi += [config.referral_logit_bounds[1]] * 5
    x0 = np.clip(np.concatenate([[initial["asthma"].params[0]], initial["mat_height"].params,
                                 np.log(probs[1:] / probs[0])]), lo, hi)

    laws, expected, pilot, resid, ok = {}, {}, {}, {}, True
    for sid in OTIS_IDS:
        solution = least_squares(residuals, x0, bounds=(lo, hi), x_scale="jac", args=(sid,))
        laws[sid] = _laws_from_vector(solution.x)
        check_law_bounds(laws[sid], config)
        expected[sid] = otis_expectations(laws[sid], sid, nodes=config.quadrature_nodes)
        pilot[sid] = pilot_statistics(build_scenario(sid, {"laws": laws[sid]}),
                                      config.pilot_replicates, config.pilot_seed)
        resid[sid], passed = check_event_targets(pilot[sid], targets, sid, config.tolerance)
        ok &= passed
    result = CalibrationResult(laws, expected, pilot, resid, bool(ok))
    if not ok:
        raise CalibrationError("pilot statistics outside tolerance", result)
    return result
