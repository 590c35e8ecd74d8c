"""Permanent-transitory income process with non-Gaussian shocks.

Log income is ``y_t = P_t + v_t + u_t`` with ``P_t = P_{t-1} + zeta_t``.
Shocks are annual, data are biennial, so observed growth is
``dy_t = zeta_t + zeta_{t-1} + v_t - v_{t-2} + u_t - u_{t-2}``.
Measurement error ``u`` is Gaussian with externally calibrated variance.
"""

from __future__ import annotations

from functools import lru_cache
from dataclasses import asdict, dataclass, fields
from typing import Iterable

import numpy as np

from .moments import K, MomentEntry, MomentKey, MomentVector, standardize, target_set

FEAS_TOL = 1e-12


class IdentificationError(ValueError):
    """Closed-form identification produced infeasible values.

    ``moments`` holds the offending inputs and ``values`` the partial results.
    """

    def __init__(self, message, moments=None, values=None):
        super().__init__(message)
        self.moments = dict(moments or {})
        self.values = dict(values or {})


def moment_feasible(sigma2: float, gamma: float, kappa: float, tol: float = FEAS_TOL) -> bool:
    """Whether (sigma2, gamma, kappa) are central moments of some distribution."""
    if sigma2 < -tol:
        return False
    if sigma2 <= tol:
        return abs(gamma) <= tol and abs(kappa) <= tol
    scale = max(sigma2**2, abs(kappa), 1e-300)
    return kappa - gamma**2 / sigma2 - sigma2**2 >= -tol * scale


@dataclass(frozen=True)
class IncomeParams:
    """Central moments of the annual permanent and transitory shocks."""

    sigma2_zeta: float
    gamma_zeta: float
    kappa_zeta: float
    sigma2_v: float
    gamma_v: float
    kappa_v: float
    sigma2_uy: float = 0.0

    @classmethod
    def gaussian(cls, sigma2_zeta: float, sigma2_v: float, sigma2_uy: float = 0.0) -> "IncomeParams":
        return cls(sigma2_zeta, 0.0, 3 * sigma2_zeta**2, sigma2_v, 0.0, 3 * sigma2_v**2, sigma2_uy)

    @classmethod
    def from_standardized(cls, sigma2_zeta, skew_zeta, kurt_zeta, sigma2_v, skew_v, kurt_v, sigma2_uy=0.0):
        return cls(
            sigma2_zeta, skew_zeta * sigma2_zeta**1.5, kurt_zeta * sigma2_zeta**2,
            sigma2_v, skew_v * sigma2_v**1.5, kurt_v * sigma2_v**2, sigma2_uy,
        )

    @classmethod
    def from_dict(cls, data: dict) -> "IncomeParams":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown income parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "IncomeParams":
        data = self.to_dict()
        data.update(changes)
        return IncomeParams(**data)

    def violations(self) -> list[str]:
        out = []
        for name in ("sigma2_zeta", "sigma2_v", "sigma2_uy"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                out.append(f"{name}={value} must be a finite non-negative number")
        for shock in ("zeta", "v"):
            s, g, k = (getattr(self, f"{m}_{shock}") for m in ("sigma2", "gamma", "kappa"))
            if not all(np.isfinite([s, g, k])):
                out.append(f"{shock}: non-finite moments")
            elif not moment_feasible(s, g, k):
                out.append(f"{shock}: kappa={k} below gamma^2/sigma2 + sigma2^2 (sigma2={s}, gamma={g})")
        return out

    def validate(self) -> "IncomeParams":
        bad = self.violations()
        if bad:
            raise ValueError("invalid income parameters: " + "; ".join(bad))
        return self

    @property
    def feasible(self) -> bool:
        return not self.violations()

    @property
    def kappa_uy(self) -> float:
        return 3.0 * self.sigma2_uy**2

    @property
    def sigma_bar(self) -> float:
        return self.sigma2_zeta + self.sigma2_v + self.sigma2_uy

    def standardized(self) -> dict[str, float]:
        out = {}
        for shock in ("zeta", "v"):
            s = getattr(self, f"sigma2_{shock}")
            if s > 0:
                out[f"skew_{shock}"] = standardize(getattr(self, f"gamma_{shock}"), s, 3)
                out[f"kurt_{shock}"] = standardize(getattr(self, f"kappa_{shock}"), s, 4)
        return out


@dataclass(frozen=True)
class MeasurementErrorCalibration:
    """Income measurement-error variance as a share of the variance of log income."""

    share: float = 0.04
    var_log_income: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.share <= 1.0:
            raise ValueError(f"share must lie in [0, 1], got {self.share}")
        if self.var_log_income is not None and self.var_log_income < 0:
            raise ValueError("var_log_income must be non-negative")

    @property
    def sigma2_uy(self) -> float:
        if self.share == 0:
            return 0.0
        if self.var_log_income is None:
            raise ValueError("var_log_income not set; run calibrate_uy on the panel first")
        return self.share * self.var_log_income


def _income_formulas(p: IncomeParams) -> dict[str, float]:
    sz, gz, kz = p.sigma2_zeta, p.gamma_zeta, p.kappa_zeta
    sv, gv, kv = p.sigma2_v, p.gamma_v, p.kappa_v
    su = p.sigma2_uy
    cross3 = -kv - 3 * sv**2 - 6 * su**2 - 6 * sz * sv - 6 * sz * su - 12 * sv * su
    return {
        "y^2": 2 * sz + 2 * sv + 2 * su,
        "y*y[-2]": -sv - su,
        "y^3": 2 * gz,
        "y^2*y[-2]": gv,
        "y*y[-2]^2": -gv,
        "y^4": (
            2 * kz + 2 * kv + 6 * sz**2 + 6 * sv**2 + 12 * su**2
            + 24 * sz * sv + 24 * sv * su + 24 * sz * su
        ),
        "y^2*y[-2]^2": (
            kv + 4 * sz**2 + 3 * sv**2 + 6 * su**2 + 8 * sz * sv + 8 * sz * su + 12 * sv * su
        ),
        "y^3*y[-2]": cross3,
        "y*y[-2]^3": cross3,
    }


def _resolve_keys(keys) -> list[MomentKey]:
    if isinstance(keys, str):
        return target_set(keys)
    return [k if isinstance(k, MomentKey) else K(k) for k in keys]


@lru_cache(maxsize=None)
def _canonical_name(name: str) -> MomentKey:
    return K(name).canonical()


def lookup(table: dict[str, float], key: MomentKey) -> float:
    """Find a key in a formula table up to a stationary time shift."""
    canon = key.canonical()
    for name, value in table.items():
        if _canonical_name(name) == canon:
            return value
    raise KeyError(f"no analytic expression for {key}")


def predict_income_moments(p: IncomeParams, keys="income_4th", validate: bool = True) -> MomentVector:
    """Population moments of biennial income growth.

    Parameters
    ----------
    p : IncomeParams
    keys : str or iterable
        A target-set name or explicit moment keys.
    validate : bool
        Reject infeasible parameters. The optimizer passes ``False`` for
        speed since its parameterization is feasible by construction.
    """
    if validate:
        p.validate()
    table = _income_formulas(p)
    return MomentVector([MomentEntry(k, lookup(table, k), 0) for k in _resolve_keys(keys)])


def identify_income(
    m: MomentVector,
    cal: MeasurementErrorCalibration | float,
    check: bool = True,
) -> IncomeParams:
    """Closed-form income parameters from targeted moments.

    Variances come first, then third moments, then the transitory and
    finally the permanent fourth moments. Orders absent from ``m`` default
    to the Gaussian values (zero third moment, ``3 sigma^4``).

    Raises
    ------
    IdentificationError
        When ``check`` is set and the implied values are infeasible.
    """
    su = cal if isinstance(cal, (int, float)) else cal.sigma2_uy
    su = float(su)

    def need(name):
        try:
            return m[name]
        except KeyError:
            raise IdentificationError(f"moment {name} required for income identification") from None

    e2, e11 = need("y^2"), need("y*y[-2]")
    # E(y * (y[-2] + y + y[+2])) / 2 using stationarity of the lead term
    sz = 0.5 * (e2 + 2 * e11)
    sv = -e11 - su
    used = {"y^2": e2, "y*y[-2]": e11}

    if "y^3" in m and "y^2*y[-2]" in m and "y*y[-2]^2" in m:
        e3, e21, e12 = m["y^3"], m["y^2*y[-2]"], m["y*y[-2]^2"]
        gz = 0.5 * (e3 + e21 + e12)
        gv = -e12
        used.update({"y^3": e3, "y^2*y[-2]": e21, "y*y[-2]^2": e12})
    else:
        gz = gv = 0.0

    if "y^4" in m and "y^2*y[-2]^2" in m:
        e4, e22 = m["y^4"], m["y^2*y[-2]^2"]
        kv = e22 - 4 * sz**2 - 3 * sv**2 - 6 * su**2 - 8 * sz * sv - 8 * sz * su - 12 * sv * su
        kz = 0.5 * e4 - kv - 3 * sz**2 - 3 * sv**2 - 6 * su**2 - 12 * sz * sv - 12 * sz * su - 12 * sv * su
        used.update({"y^4": e4, "y^2*y[-2]^2": e22})
    else:
        kz, kv = 3 * sz**2, 3 * sv**2

    p = IncomeParams(sz, gz, kz, sv, gv, kv, su)
    if check:
        bad = p.violations()
        if bad:
            raise IdentificationError(
                "closed-form income parameters infeasible: " + "; ".join(bad),
                moments=used,
                values=p.to_dict(),
            )
    return p


def calibrate_uy(panel, cal: MeasurementErrorCalibration) -> float:
    """Measurement-error variance: share times the mean per-wave variance of log income."""
    if cal.share == 0:
        return 0.0
    variances = []
    for wave in panel.waves:
        x = panel.column("log_income", wave)
        x = x[np.isfinite(x)]
        if x.size < 2:
            raise ValueError(f"wave {wave}: fewer than 2 households with log income")
        variances.append(np.var(x, ddof=1))
    if not variances:
        raise ValueError("panel has no waves")
    return cal.share * float(np.mean(variances))


def income_param_names(specification: str) -> list[str]:
    """Parameters freely estimated under an income specification."""
    names = ["sigma2_zeta", "sigma2_v"]
    if specification in ("income_3rd", "income_4th"):
        names += ["gamma_zeta", "gamma_v"]
    if specification == "income_4th":
        names += ["kappa_zeta", "kappa_v"]
    return names

