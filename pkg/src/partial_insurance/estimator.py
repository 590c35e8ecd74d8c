"""Multi-step GMM estimation and household-block bootstrap.

Income parameters are estimated from income moments alone; consumption
parameters are estimated conditional on them. Every fit starts at the
closed-form solution and refines it by Nelder-Mead followed by BFGS with
finite-difference gradients. Parameters are mapped to an unconstrained
space so every trial point is feasible:

* variances ``sigma2 = exp(l)``
* third moments ``gamma = g sigma^3`` (``g`` is the standardized skewness)
* fourth moments ``kappa = sigma^4 (g^2 + 1 + h^2)``
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.stats import norm

from ._validation import check_positive, check_positive_int, check_residual_panel, check_specification
from .consumption_model import (
    LinearConsumptionParams,
    QuadraticConsumptionParams,
    _linear_formulas,
    build_A,
    identify_linear,
    identify_quadratic,
    quadratic_moment_table,
)
from .income_model import (
    IdentificationError,
    IncomeParams,
    MeasurementErrorCalibration,
    _income_formulas,
    calibrate_uy,
    identify_income,
    income_param_names,
    lookup,
)
from .moments import (
    DEFAULT_MIN_CELLS,
    MomentKey,
    MomentVector,
    empirical_moments,
    income_spec_for,
    target_set,
)

log = logging.getLogger(__name__)

WEIGHTINGS = ("identity", "diagonal_tstat")
SE_METHODS = ("normal_iqr", "std_dev")
VAR_FLOOR = 1e-6
IQR_NORMAL = float(norm.ppf(0.75) - norm.ppf(0.25))


class ConvergenceError(RuntimeError):
    pass


class BootstrapError(RuntimeError):
    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = list(failures or [])


@dataclass(frozen=True)
class GmmConfig:
    weighting: str = "identity"
    max_iter: int = 5000
    tol: float = 1e-10
    specification: str = "income_4th"
    min_cells: int = DEFAULT_MIN_CELLS

    def __post_init__(self):
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}")
        check_positive_int(self.max_iter, "max_iter")
        check_positive(self.tol, "tol")
        check_specification(self.specification)
        check_positive_int(self.min_cells, "min_cells", minimum=0)


@dataclass(frozen=True)
class BootstrapConfig:
    replications: int = 500
    seed: int = 0
    se_method: str = "normal_iqr"
    max_failure_rate: float = 0.2

    def __post_init__(self):
        check_positive_int(self.replications, "replications")
        if self.se_method not in SE_METHODS:
            raise ValueError(f"se_method must be one of {SE_METHODS}")
        if self.se_method == "normal_iqr" and self.replications < 50:
            raise ValueError("normal_iqr standard errors need at least 50 replications")


@dataclass
class EstimateReport:
    """Point estimates with fit diagnostics and (after bootstrap) standard errors."""

    stage: str
    specification: str
    params: dict[str, float]
    objective: float
    moment_fit: list[dict]
    standard_errors: dict[str, float] = field(default_factory=dict)
    n_bootstrap: int = 0
    diagnostics: dict = field(default_factory=dict)

    def income_params(self) -> IncomeParams:
        names = IncomeParams.__dataclass_fields__
        return IncomeParams(**{k: self.params[k] for k in names})

    def consumption_params(self):
        if self.specification == "cons_quadratic":
            names = QuadraticConsumptionParams.__dataclass_fields__
            return QuadraticConsumptionParams(**{k: self.params[k] for k in names})
        names = LinearConsumptionParams.__dataclass_fields__
        return LinearConsumptionParams(**{k: self.params[k] for k in names})

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)

    @classmethod
    def from_dict(cls, data: dict) -> "EstimateReport":
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "EstimateReport":
        return cls.from_dict(json.loads(text))

    def to_text(self) -> str:
        """Aligned table: parameter, estimate, standard error in parentheses."""
        lines = [f"{self.stage} ({self.specification})", ""]
        width = max(len(k) for k in self.params) if self.params else 10
        for name, value in self.params.items():
            se = self.standard_errors.get(name)
            se_txt = f"({se:.3f})" if se is not None and np.isfinite(se) else ""
            lines.append(f"{name:<{width}}  {value:>9.3f}  {se_txt:>9}")
        for name, value in self.diagnostics.get("standardized", {}).items():
            lines.append(f"{name:<{width}}  {value:>9.3f}")
        lines += ["", f"GMM objective  {self.objective:.3e}", f"bootstrap replications  {self.n_bootstrap}"]
        return "\n".join(lines) + "\n"


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


# parameter transforms


def _pack_higher(s2, g3, k4, order):
    """Unconstrained coordinates (log variance, standardized skew, kurtosis slack)."""
    s2 = max(s2, VAR_FLOOR)
    out = [math.log(s2)]
    if order >= 3:
        g = g3 / s2**1.5
        out.append(g)
        if order >= 4:
            out.append(math.sqrt(max(k4 / s2**2 - g * g - 1.0, 0.0)))
    return out


def _unpack_higher(theta, order):
    s2 = math.exp(float(theta[0]))
    g = float(theta[1]) if order >= 3 else 0.0
    if order >= 4:
        k = s2 * s2 * (g * g + 1.0 + float(theta[2]) ** 2)
    else:
        # not identified at this order: Gaussian value, kept feasible
        k = s2 * s2 * max(3.0, g * g + 1.0)
    return s2, g * s2**1.5, k


def _order(specification: str) -> int:
    if specification == "cons_quadratic":
        return 2
    return {"2nd": 2, "3rd": 3, "4th": 4}[specification.rsplit("_", 1)[1]]


class _IncomeSpace:
    def __init__(self, specification: str, sigma2_uy: float):
        self.order = _order(specification)
        self.sigma2_uy = sigma2_uy
        self.width = 1 + (self.order >= 3) + (self.order >= 4)

    def pack(self, p: IncomeParams) -> np.ndarray:
        return np.array(
            _pack_higher(p.sigma2_zeta, p.gamma_zeta, p.kappa_zeta, self.order)
            + _pack_higher(p.sigma2_v, p.gamma_v, p.kappa_v, self.order)
        )

    def unpack(self, theta) -> IncomeParams:
        w = self.width
        sz, gz, kz = _unpack_higher(theta[:w], self.order)
        sv, gv, kv = _unpack_higher(theta[w:], self.order)
        return IncomeParams(sz, gz, kz, sv, gv, kv, self.sigma2_uy)

    def table(self, theta) -> dict:
        return _income_formulas(self.unpack(theta))


class _LinearSpace:
    def __init__(self, specification: str, ip: IncomeParams):
        self.order = _order(specification)
        self.ip = ip
        self.width = 1 + (self.order >= 3) + (self.order >= 4)

    def pack(self, lc: LinearConsumptionParams) -> np.ndarray:
        return np.array(
            [lc.phi1, lc.psi1]
            + _pack_higher(lc.sigma2_xi, lc.gamma_xi, lc.kappa_xi, self.order)
            + _pack_higher(lc.sigma2_uc, lc.gamma_uc, lc.kappa_uc, self.order)
        )

    def unpack(self, theta) -> LinearConsumptionParams:
        w = self.width
        sx, gx, kx = _unpack_higher(theta[2:2 + w], self.order)
        sc, gc, kc = _unpack_higher(theta[2 + w:], self.order)
        return LinearConsumptionParams(float(theta[0]), float(theta[1]), sx, gx, kx, sc, gc, kc)

    def table(self, theta) -> dict:
        return _linear_formulas(self.unpack(theta), self.ip)


class _QuadraticSpace:
    def __init__(self, ip: IncomeParams, centered: bool = True):
        self.ip = ip
        self.centered = centered

    def pack(self, qc: QuadraticConsumptionParams) -> np.ndarray:
        return np.array([qc.phi1, qc.psi1, qc.phi2, qc.psi2, qc.omega22,
                         math.log(max(qc.sigma2_xi, VAR_FLOOR)), math.log(max(qc.sigma2_uc, VAR_FLOOR))])

    def unpack(self, theta) -> QuadraticConsumptionParams:
        return QuadraticConsumptionParams(*map(float, theta[:5]), math.exp(float(theta[5])), math.exp(float(theta[6])))

    def table(self, theta) -> dict:
        return quadratic_moment_table(self.unpack(theta), self.ip, self.centered)


def _formula_names(keys: Sequence[MomentKey], example_table: dict) -> list[str]:
    """Formula-table entry for each key, resolved once up front."""
    names = {n: n for n in example_table}
    return [lookup(names, k) for k in keys]


def _weights(m: MomentVector, weighting: str) -> np.ndarray:
    if weighting == "identity":
        return np.ones(len(m))
    t = np.array([abs(e.value / e.se) if e.se and np.isfinite(e.se) and e.se > 0 else np.nan for e in m])
    if not np.all(np.isfinite(t)) or not np.any(t > 0):
        raise ValueError("diagonal_tstat weighting needs finite positive standard errors for every moment")
    return t / t.mean()


def _gmm(space, start_theta, m: MomentVector, cfg: GmmConfig):
    keys = m.keys
    target = m.values()
    names = _formula_names(keys, space.table(start_theta))
    w = _weights(m, cfg.weighting)
    scale = float(np.mean(target**2)) or 1.0

    def objective(theta):
        try:
            table = space.table(theta)
        except (OverflowError, ValueError):
            return np.inf
        pred = np.array([table[n] for n in names])
        val = float(np.sum(w * (target - pred) ** 2) / len(target) / scale)
        return val if np.isfinite(val) else np.inf

    f0 = objective(start_theta)
    info = {"start_objective": f0 * scale, "optimizer": []}
    if f0 <= 1e-26:
        info["optimizer"].append("closed form exact")
        return start_theta, f0 * scale, info, True

    nm = minimize(objective, start_theta, method="Nelder-Mead",
                  options={"maxiter": cfg.max_iter, "maxfev": 4 * cfg.max_iter,
                           "xatol": 1e-10, "fatol": cfg.tol, "adaptive": len(start_theta) > 4})
    info["optimizer"].append(f"nelder-mead: {nm.message}")
    bf = minimize(objective, nm.x, method="BFGS", options={"maxiter": cfg.max_iter, "gtol": 1e-10})
    info["optimizer"].append(f"bfgs: {bf.message}")
    candidates = [(f0, start_theta), (float(nm.fun), nm.x), (float(bf.fun), bf.x)]
    best_f, best = min(candidates, key=lambda c: c[0])
    # BFGS status 2 is precision loss at a flat optimum, which counts as done
    converged = bool(nm.success or bf.success or bf.status == 2)
    return np.asarray(best), best_f * scale, info, converged


def _moment_fit(all_keys, m_all: MomentVector, used: MomentVector, table: dict) -> list[dict]:
    used_keys = set(used.keys)
    rows = []
    for k in all_keys:
        e = m_all.entry(k)
        fitted = lookup(table, k)
        rows.append({"key": str(k), "empirical": e.value, "fitted": fitted, "gap": e.value - fitted,
                     "n_cells": e.n_cells, "se": e.se, "used": k in used_keys})
    return rows


def _select(m_all: MomentVector, min_cells: int):
    # a vector without any cell counts holds population moments: no floor
    if all(e.n_cells == 0 for e in m_all):
        min_cells = 0
    used, dropped = m_all.retained(min_cells)
    bad = [e.key for e in used if not np.isfinite(e.value)]
    if bad:
        used = used.subset([k for k in used.keys if k not in bad])
        dropped = dropped + bad
    if dropped:
        log.warning("moments below the %d-cell floor excluded: %s", min_cells, [str(k) for k in dropped])
    return used, dropped


def _as_moments(data, keys) -> MomentVector:
    if isinstance(data, MomentVector):
        return data.subset(keys)
    check_residual_panel(data)
    return empirical_moments(data, keys)


def _project_income(ip: IncomeParams) -> IncomeParams:
    vals = []
    for shock in ("zeta", "v"):
        s = max(getattr(ip, f"sigma2_{shock}"), VAR_FLOOR)
        g = getattr(ip, f"gamma_{shock}")
        k = max(getattr(ip, f"kappa_{shock}"), g * g / s + s * s)
        vals += [s, g, k]
    return IncomeParams(*vals, ip.sigma2_uy)


def estimate_income(rp, spec: str | None = None, cfg: GmmConfig | None = None,
                    cal: MeasurementErrorCalibration | float = 0.0) -> EstimateReport:
    """GMM fit of the income process to the targeted income moments.

    Parameters
    ----------
    rp : ResidualPanel or MomentVector
    spec : str, optional
        Income specification; defaults to ``cfg.specification``.
    cfg : GmmConfig
    cal : MeasurementErrorCalibration or float
        Calibrated income measurement-error variance.
    """
    cfg = cfg or GmmConfig()
    spec = check_specification(spec or cfg.specification, "income")
    sigma2_uy = float(cal) if isinstance(cal, (int, float)) else cal.sigma2_uy
    keys = target_set(spec)
    m_all = _as_moments(rp, keys)
    used, dropped = _select(m_all, cfg.min_cells)

    diagnostics = {"dropped_moments": [str(k) for k in dropped], "projected_start": False}
    try:
        start = identify_income(used, sigma2_uy)
    except IdentificationError as exc:
        start = _project_income(identify_income(used, sigma2_uy, check=False))
        diagnostics["projected_start"] = True
        diagnostics["start_error"] = str(exc)
        log.info("income closed form infeasible, projected: %s", exc)
    space = _IncomeSpace(spec, sigma2_uy)
    theta0 = space.pack(start)
    exact = len(used) == len(theta0) and not diagnostics["projected_start"]
    if exact:
        # exact identification: the closed form solves the moment conditions
        fit_params, objective, info, converged = start, 0.0, {"optimizer": ["closed form exact"]}, True
        table = _income_formulas(start)
        objective = float(np.mean([(e.value - lookup(table, e.key)) ** 2 for e in used]))
    else:
        theta, objective, info, converged = _gmm(space, theta0, used, cfg)
        fit_params = start if np.array_equal(theta, theta0) and not diagnostics["projected_start"] \
            else space.unpack(theta)
        if not converged:
            raise ConvergenceError(f"income GMM did not converge in {cfg.max_iter} iterations: {info}")
    diagnostics.update(info)
    diagnostics["start"] = start.to_dict()
    diagnostics["standardized"] = fit_params.standardized()
    diagnostics["estimated"] = income_param_names(spec)
    return EstimateReport(
        stage="income", specification=spec, params=fit_params.to_dict(), objective=float(objective),
        moment_fit=_moment_fit(keys, m_all, used, _income_formulas(fit_params)), diagnostics=diagnostics,
    )


def estimate_consumption(rp, ip: IncomeParams, spec: str | None = None,
                         cfg: GmmConfig | None = None, centered: bool = True) -> EstimateReport:
    """GMM fit of the consumption function with income parameters held fixed.

    ``centered`` selects demeaned-consumption predictions for the quadratic
    model, which matches residualized data; linear predictions are
    unaffected since consumption growth has mean zero there.
    """
    cfg = cfg or GmmConfig(specification=spec or "cons_linear_2nd")
    spec = check_specification(spec or cfg.specification, "consumption")
    keys = target_set(spec)
    if not isinstance(rp, MomentVector):
        check_residual_panel(rp, need_consumption=True)
    m_all = _as_moments(rp, keys)
    used, dropped = _select(m_all, cfg.min_cells)
    diagnostics = {"dropped_moments": [str(k) for k in dropped], "projected_start": False}

    if spec == "cons_quadratic":
        A, cond = build_A(ip, centered=centered)
        diagnostics["A_condition_number"] = cond
        start = identify_quadratic(used, ip, centered=centered)
        if start.sigma2_xi < VAR_FLOOR or start.sigma2_uc < VAR_FLOOR:
            diagnostics["projected_start"] = True
            start = QuadraticConsumptionParams(
                start.phi1, start.psi1, start.phi2, start.psi2, start.omega22,
                max(start.sigma2_xi, VAR_FLOOR), max(start.sigma2_uc, VAR_FLOOR),
            )
        space = _QuadraticSpace(ip, centered)
        table_of = lambda p: quadratic_moment_table(p, ip, centered)  # noqa: E731
    else:
        start = identify_linear(used, ip, check=False)
        if start.violations():
            diagnostics["projected_start"] = True
            diagnostics["start_error"] = "; ".join(start.violations())
            start = _project_linear(start)
        space = _LinearSpace(spec, ip)
        table_of = lambda p: _linear_formulas(p, ip)  # noqa: E731

    theta0 = space.pack(start)
    exact = len(used) == len(theta0) and not diagnostics["projected_start"]
    if exact:
        fit_params, info = start, {"optimizer": ["closed form exact"]}
        table = table_of(start)
        objective = float(np.mean([(e.value - lookup(table, e.key)) ** 2 for e in used]))
    else:
        theta, objective, info, converged = _gmm(space, theta0, used, cfg)
        fit_params = start if np.array_equal(theta, theta0) else space.unpack(theta)
        if not converged:
            raise ConvergenceError(f"consumption GMM did not converge in {cfg.max_iter} iterations: {info}")
    diagnostics.update(info)
    diagnostics["start"] = start.to_dict()
    diagnostics["income_params"] = ip.to_dict()
    return EstimateReport(
        stage="consumption", specification=spec, params=fit_params.to_dict(), objective=float(objective),
        moment_fit=_moment_fit(keys, m_all, used, table_of(fit_params)), diagnostics=diagnostics,
    )


def _project_linear(lc: LinearConsumptionParams) -> LinearConsumptionParams:
    sx = max(lc.sigma2_xi, VAR_FLOOR)
    sc = max(lc.sigma2_uc, VAR_FLOOR)
    kx = max(lc.kappa_xi, lc.gamma_xi**2 / sx + sx * sx)
    kc = max(lc.kappa_uc, lc.gamma_uc**2 / sc + sc * sc)
    return LinearConsumptionParams(lc.phi1, lc.psi1, sx, lc.gamma_xi, kx, sc, lc.gamma_uc, kc)


# bootstrap


def iqr_difference(values: np.ndarray) -> float:
    """Interquartile range from sorted differences (exactly shift invariant)."""
    x = np.sort(np.asarray(values, dtype=float))
    n = len(x)
    if n == 0:
        return float("nan")
    if n == 1:
        return 0.0
    pos25, pos75 = 0.25 * (n - 1), 0.75 * (n - 1)
    i, j = int(math.floor(pos25)), int(math.floor(pos75))
    fi, fj = pos25 - i, pos75 - j
    di = x[min(i + 1, n - 1)] - x[i]
    dj = x[min(j + 1, n - 1)] - x[j]
    return float((x[j] - x[i]) + fj * dj - fi * di)


def normal_iqr_se(values) -> float:
    """Interquartile range divided by that of the standard normal (about 1.349)."""
    return iqr_difference(values) / IQR_NORMAL


def std_dev_se(values) -> float:
    x = np.asarray(values, dtype=float)
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


@dataclass
class BootstrapResult:
    standard_errors: dict[str, float]
    replications: list[dict]
    n_failed: int
    failures: list[str]

    @property
    def n_success(self) -> int:
        return len(self.replications)

    def to_frame(self):
        import pandas as pd

        return pd.DataFrame(self.replications)


def bootstrap(panel, pipeline: Callable, bc: BootstrapConfig | None = None, jobs: int = 1) -> BootstrapResult:
    """Household-block bootstrap of a full estimation pipeline.

    Replication ``r`` resamples households with an RNG seeded by
    ``(seed, r)`` and re-runs ``pipeline`` on the draw; ``pipeline`` maps a
    panel to a flat dict of estimates. Failed replications are dropped and
    counted; more than ``max_failure_rate`` failures aborts.
    """
    bc = bc or BootstrapConfig()

    def one(r: int):
        rng = np.random.default_rng(np.random.SeedSequence([bc.seed, r]))
        sample = panel.resample(rng)
        try:
            out = pipeline(sample)
        except Exception as exc:  # any stage may fail on a degenerate draw
            return r, None, f"replication {r}: {type(exc).__name__}: {exc}"
        return r, {k: float(v) for k, v in out.items()}, None

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, range(bc.replications)))
    else:
        results = [one(r) for r in range(bc.replications)]
    results.sort(key=lambda t: t[0])
    reps = [dict(out, replication=r) for r, out, _ in results if out is not None]
    failures = [msg for _, out, msg in results if out is None]
    if len(failures) > bc.max_failure_rate * bc.replications:
        raise BootstrapError(
            f"{len(failures)} of {bc.replications} bootstrap replications failed", failures=failures[:20]
        )
    if failures:
        log.warning("bootstrap: %d failed replications dropped", len(failures))
    se_fn = normal_iqr_se if bc.se_method == "normal_iqr" else std_dev_se
    names = [k for k in (reps[0] if reps else {}) if k != "replication"]
    ses = {k: se_fn([rep[k] for rep in reps]) for k in names}
    return BootstrapResult(ses, reps, len(failures), failures)


# full pipeline


@dataclass(frozen=True)
class PipelineSpec:
    """Everything one estimation run needs, from residual regressions to GMM."""

    specification: str = "cons_quadratic"
    income_terms: tuple[str, ...] = ("1", "wave")
    consumption_terms: tuple[str, ...] | None = None
    me_share: float = 0.04
    sigma2_uy: float | None = None
    gmm: GmmConfig = field(default_factory=GmmConfig)
    centered: bool = True

    @property
    def income_specification(self) -> str:
        return income_spec_for(self.specification)


@dataclass
class PipelineResult:
    residuals: object
    sigma2_uy: float
    income: EstimateReport
    consumption: EstimateReport | None

    def flat(self) -> dict[str, float]:
        out = dict(self.income.params)
        if self.consumption is not None:
            out.update(self.consumption.params)
        return out


def run_pipeline(panel, ps: PipelineSpec) -> PipelineResult:
    """Residualize, compute moments, then estimate income and consumption."""
    from .residualize import residualize_panel

    rp = residualize_panel(panel, ps.income_terms, ps.consumption_terms)
    if ps.sigma2_uy is None:
        sigma2_uy = calibrate_uy(panel, MeasurementErrorCalibration(ps.me_share))
    else:
        sigma2_uy = float(ps.sigma2_uy)
    gi = GmmConfig(ps.gmm.weighting, ps.gmm.max_iter, ps.gmm.tol, ps.income_specification, ps.gmm.min_cells)
    inc = estimate_income(rp, ps.income_specification, gi, sigma2_uy)
    cons = None
    if ps.specification.startswith("cons"):
        gc = GmmConfig(ps.gmm.weighting, ps.gmm.max_iter, ps.gmm.tol, ps.specification, ps.gmm.min_cells)
        cons = estimate_consumption(rp, inc.income_params(), ps.specification, gc, ps.centered)
    return PipelineResult(rp, sigma2_uy, inc, cons)


def make_pipeline(ps: PipelineSpec) -> Callable:
    """Closure for :func:`bootstrap` returning flat estimates."""

    def pipeline(panel):
        return run_pipeline(panel, ps).flat()

    return pipeline


# scikit-learn style wrappers

from sklearn.base import BaseEstimator, TransformerMixin  # noqa: E402


class Residualizer(TransformerMixin, BaseEstimator):
    """Panel to residual-growth transformer."""

    def __init__(self, income_terms=("1", "wave"), consumption_terms=None):
        self.income_terms = income_terms
        self.consumption_terms = consumption_terms

    def fit(self, X, y=None):
        self.n_households_in_ = X.n_households
        return self

    def transform(self, X):
        from .residualize import residualize_panel

        return residualize_panel(X, tuple(self.income_terms),
                                 None if self.consumption_terms is None else tuple(self.consumption_terms))


class IncomeProcessEstimator(BaseEstimator):
    """GMM estimator of the income process on a residual panel or moment vector."""

    def __init__(self, specification="income_4th", sigma2_uy=0.0, weighting="identity",
                 max_iter=5000, tol=1e-10, min_cells=DEFAULT_MIN_CELLS):
        self.specification = specification
        self.sigma2_uy = sigma2_uy
        self.weighting = weighting
        self.max_iter = max_iter
        self.tol = tol
        self.min_cells = min_cells

    def _cfg(self) -> GmmConfig:
        return GmmConfig(self.weighting, self.max_iter, self.tol, self.specification, self.min_cells)

    def fit(self, X, y=None):
        check_specification(self.specification, "income")
        self.report_ = estimate_income(X, self.specification, self._cfg(), self.sigma2_uy)
        self.params_ = self.report_.income_params()
        return self

    def predict(self, keys=None) -> MomentVector:
        from .income_model import predict_income_moments

        return predict_income_moments(self.params_, keys or self.specification)

    def score(self, X, y=None) -> float:
        """Negative GMM objective on ``X``."""
        keys = target_set(self.specification)
        m = _as_moments(X, keys)
        fit = self.predict(keys)
        return -float(np.mean((m.values() - fit.values(keys)) ** 2))


class ConsumptionEstimator(BaseEstimator):
    """GMM estimator of the consumption function given income parameters."""

    def __init__(self, specification="cons_quadratic", income_params=None, weighting="identity",
                 max_iter=5000, tol=1e-10, min_cells=DEFAULT_MIN_CELLS, centered=True):
        self.specification = specification
        self.income_params = income_params
        self.weighting = weighting
        self.max_iter = max_iter
        self.tol = tol
        self.min_cells = min_cells
        self.centered = centered

    def fit(self, X, y=None):
        check_specification(self.specification, "consumption")
        if self.income_params is None:
            raise ValueError("income_params must be set before fitting consumption")
        cfg = GmmConfig(self.weighting, self.max_iter, self.tol, self.specification, self.min_cells)
        self.report_ = estimate_consumption(X, self.income_params, self.specification, cfg, self.centered)
        self.params_ = self.report_.consumption_params()
        return self

    def predict(self, keys=None) -> MomentVector:
        from .consumption_model import predict_linear_moments, predict_quadratic_moments

        keys = keys or self.specification
        if self.specification == "cons_quadratic":
            return predict_quadratic_moments(self.params_, self.income_params, keys, centered=self.centered)
        return predict_linear_moments(self.params_, self.income_params, keys, validate=False)
