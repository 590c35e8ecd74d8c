"""Linear and quadratic consumption functions at biennial frequency.

Consumption growth responds to annual shocks; over two years

``dc_t = xi_t + xi_{t-1} + phi1 z_t + psi1 v_t + uc_t - uc_{t-2}``

with ``z_t = zeta_t + zeta_{t-1}``. The quadratic form adds
``phi2 z_t^2 + psi2 v_t^2 + omega22 z_t v_t``. Only the transitory shock of
the observation year enters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .income_model import IdentificationError, IncomeParams, _resolve_keys, lookup, moment_feasible
from .moments import MomentEntry, MomentVector

A_COND_LIMIT = 1e10


@dataclass(frozen=True)
class LinearConsumptionParams:
    """Transmission parameters plus moments of taste shifts and consumption error."""

    phi1: float
    psi1: float
    sigma2_xi: float = 0.0
    gamma_xi: float = 0.0
    kappa_xi: float | None = None
    sigma2_uc: float = 0.0
    gamma_uc: float = 0.0
    kappa_uc: float | None = None

    def __post_init__(self):
        # unset fourth moments default to the Gaussian value
        if self.kappa_xi is None:
            object.__setattr__(self, "kappa_xi", 3.0 * self.sigma2_xi**2)
        if self.kappa_uc is None:
            object.__setattr__(self, "kappa_uc", 3.0 * self.sigma2_uc**2)

    @classmethod
    def from_dict(cls, data: dict) -> "LinearConsumptionParams":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown linear consumption parameters: {sorted(unknown)}")
        return cls(**{k: (None if v is None else float(v)) for k, v in data.items()})

    def to_dict(self) -> dict:
        return asdict(self)

    def violations(self, check_higher: bool = True) -> list[str]:
        out = []
        for name in ("phi1", "psi1"):
            if not np.isfinite(getattr(self, name)):
                out.append(f"{name} must be finite")
        for shock in ("xi", "uc"):
            s, g, k = (getattr(self, f"{m}_{shock}") for m in ("sigma2", "gamma", "kappa"))
            if not np.isfinite(s) or s < 0:
                out.append(f"sigma2_{shock}={s} must be non-negative")
            elif check_higher and not moment_feasible(s, g, k):
                out.append(f"{shock}: infeasible (sigma2={s}, gamma={g}, kappa={k})")
        return out

    def validate(self, check_higher: bool = True):
        bad = self.violations(check_higher)
        if bad:
            raise ValueError("invalid consumption parameters: " + "; ".join(bad))
        return self


@dataclass(frozen=True)
class QuadraticConsumptionParams:
    """Quadratic transmission parameters plus variances of taste shifts and error."""

    phi1: float
    psi1: float
    phi2: float = 0.0
    psi2: float = 0.0
    omega22: float = 0.0
    sigma2_xi: float = 0.0
    sigma2_uc: float = 0.0

    @classmethod
    def from_dict(cls, data: dict) -> "QuadraticConsumptionParams":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown quadratic consumption parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def transmissions(self) -> np.ndarray:
        return np.array([self.phi1, self.psi1, self.phi2, self.psi2, self.omega22])

    def violations(self) -> list[str]:
        out = []
        if not np.all(np.isfinite(self.transmissions)):
            out.append("transmission parameters must be finite")
        for name in ("sigma2_xi", "sigma2_uc"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                out.append(f"{name}={value} must be non-negative")
        return out

    def validate(self):
        bad = self.violations()
        if bad:
            raise ValueError("invalid consumption parameters: " + "; ".join(bad))
        return self

    def as_linear(self) -> LinearConsumptionParams:
        return LinearConsumptionParams(self.phi1, self.psi1, self.sigma2_xi, sigma2_uc=self.sigma2_uc)


@dataclass(frozen=True)
class StructuralShares:
    """Financial-wealth share ``pi`` and annuitization factor ``thetaY``."""

    pi: float
    thetaY: float

    def __post_init__(self):
        for name in ("pi", "thetaY"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


def _linear_formulas(lc: LinearConsumptionParams, ip: IncomeParams) -> dict[str, float]:
    f, s = lc.phi1, lc.psi1
    sz, gz, kz = ip.sigma2_zeta, ip.gamma_zeta, ip.kappa_zeta
    sv, gv, kv = ip.sigma2_v, ip.gamma_v, ip.kappa_v
    su = ip.sigma2_uy
    sx, gx, kx = lc.sigma2_xi, lc.gamma_xi, lc.kappa_xi
    sc, gc, kc = lc.sigma2_uc, lc.gamma_uc, lc.kappa_uc
    f2, s2 = f * f, s * s
    cc31 = -kc - 3 * sc**2 - 6 * sx * sc - 6 * f2 * sz * sc - 3 * s2 * sv * sc
    # terms shared by the two squared-income times squared-consumption moments
    yc22 = (
        4 * sz * sx + 4 * f2 * sz**2 + 2 * s2 * sz * sv + 4 * sz * sc
        + 4 * sv * sx + 4 * f2 * sv * sz + 4 * sv * sc
        + 4 * su * sx + 4 * f2 * su * sz + 2 * s2 * su * sv + 4 * su * sc
    )
    return {
        "c^2": 2 * sx + 2 * f2 * sz + s2 * sv + 2 * sc,
        "c*c[-2]": -sc,
        "y*c": 2 * f * sz + s * sv,
        "y*c[-2]": -s * sv,
        "c^3": 2 * gx + 2 * f**3 * gz + s**3 * gv,
        "c^2*c[-2]": gc,
        "c*c[-2]^2": -gc,
        "y^2*c": 2 * f * gz + s * gv,
        "y*c^2": 2 * f2 * gz + s2 * gv,
        "y^2*c[-2]": s * gv,
        "y*c[-2]^2": -s2 * gv,
        "y[-2]^2*c": 0.0,
        "y*y[+2]*c": -s * gv,
        "y*y[+2]*c[-2]": 0.0,
        "y*y[+2]*c[+2]": 0.0,
        "c^4": (
            2 * kx + 2 * f2**2 * kz + s2**2 * kv + 2 * kc
            + 6 * sx**2 + 6 * f2**2 * sz**2 + 6 * sc**2
            + 24 * f2 * sx * sz + 12 * s2 * sx * sv + 24 * sx * sc
            + 12 * f2 * s2 * sz * sv + 24 * f2 * sz * sc + 12 * s2 * sv * sc
        ),
        "c^2*c[-2]^2": (
            4 * sx**2 + 8 * f2 * sx * sz + 4 * s2 * sx * sv + 8 * sx * sc + 4 * f2**2 * sz**2
            + 4 * f2 * s2 * sz * sv + 8 * f2 * sz * sc + s2**2 * sv**2 + 4 * s2 * sv * sc
            + kc + 3 * sc**2
        ),
        "c^3*c[-2]": cc31,
        "c*c[-2]^3": cc31,
        "y^2*c^2": (
            4 * sz * sx + 2 * f2 * kz + 6 * f2 * sz**2 + 2 * s2 * sz * sv + 4 * sz * sc
            + 4 * sv * sx + 4 * f2 * sv * sz + s2 * kv + s2 * sv**2 + 4 * sv * sc
            + 4 * su * sx + 4 * f2 * su * sz + 2 * s2 * su * sv + 4 * su * sc + 8 * f * s * sz * sv
        ),
        "y^3*c": (
            2 * f * kz + 6 * f * sz**2 + s * kv + 3 * s * sv**2
            + 6 * s * sz * sv + 12 * f * sz * sv + 12 * f * sz * su + 6 * s * sv * su
        ),
        "y*c^3": (
            2 * f**3 * kz + 6 * f**3 * sz**2 + s**3 * kv + 12 * f * sx * sz + 6 * s * sx * sv
            + 6 * f * s2 * sz * sv + 6 * f2 * s * sz * sv + 12 * f * sz * sc + 6 * s * sv * sc
        ),
        "y^2*c[-2]^2": yc22 + s2 * kv + s2 * sv**2,
        "y[-2]^2*c^2": yc22 + 2 * s2 * sv**2,
        "y^3*c[-2]": -s * kv - 3 * s * sv**2 - 6 * s * sz * sv - 6 * s * sv * su,
        "y*c[-2]^3": -s**3 * kv - 6 * s * sv * sx - 6 * f2 * s * sv * sz - 6 * s * sv * sc,
    }


def _quadratic_formulas(qc: QuadraticConsumptionParams, ip: IncomeParams) -> dict[str, float]:
    f1, s1, f2, s2, w = qc.phi1, qc.psi1, qc.phi2, qc.psi2, qc.omega22
    sz, gz, kz = ip.sigma2_zeta, ip.gamma_zeta, ip.kappa_zeta
    sv, gv, kv = ip.sigma2_v, ip.gamma_v, ip.kappa_v
    su = ip.sigma2_uy
    sx, sc = qc.sigma2_xi, qc.sigma2_uc
    sbar = sz + sv + su
    lead_c = -2 * f2 * sz * (sv + su) - s2 * sv * (sv + su)
    return {
        "c^2": (
            2 * sx + 2 * f1**2 * sz + s1**2 * sv
            + 2 * f2**2 * (kz + 3 * sz**2) + s2**2 * kv + 2 * w**2 * sz * sv + 2 * sc
            + 4 * f1 * f2 * gz + 2 * s1 * s2 * gv + 4 * f2 * s2 * sz * sv
        ),
        "c*c[-2]": 4 * f2**2 * sz**2 + 4 * f2 * s2 * sz * sv + s2**2 * sv**2 - sc,
        "y*c": 2 * f1 * sz + s1 * sv + 2 * f2 * gz + s2 * gv,
        "y*c[-2]": -s1 * sv - s2 * gv,
        "y^2*c": (
            2 * f1 * gz + s1 * gv
            + 2 * f2 * (kz + 3 * sz**2 + 2 * sz * sv + 2 * sz * su)
            + s2 * (kv + sv**2 + 2 * sz * sv + 2 * sv * su)
            + 4 * w * sz * sv
        ),
        "y^2*c[-2]": s1 * gv + 4 * f2 * sz * sbar + s2 * (kv + sv * (2 * sz + sv + 2 * su)),
        "y[-2]^2*c": 4 * f2 * sz * sbar + 2 * s2 * sv * sbar,
        "y*y[+2]*c": (
            -s1 * gv - 2 * f2 * sz * (sv + su) - s2 * (kv + sv * su) - 2 * w * sz * sv
        ),
        "y*y[+2]*c[-2]": lead_c,
        "y*y[+2]*c[+2]": lead_c,
    }


def predict_linear_moments(lc: LinearConsumptionParams, ip: IncomeParams, keys="cons_linear_4th",
                           validate: bool = True) -> MomentVector:
    """Population joint moments of biennial income and consumption growth, linear model."""
    if validate:
        ip.validate()
        lc.validate()
    table = _linear_formulas(lc, ip)
    return MomentVector([MomentEntry(k, lookup(table, k), 0) for k in _resolve_keys(keys)])


def consumption_mean(qc: QuadraticConsumptionParams, ip: IncomeParams) -> float:
    """Mean of biennial consumption growth implied by the quadratic terms."""
    return 2 * qc.phi2 * ip.sigma2_zeta + qc.psi2 * ip.sigma2_v


# E(f(y)) for the income factor of each single-consumption key
def _income_factor_means(ip: IncomeParams) -> dict[str, float]:
    e2 = 2 * ip.sigma_bar
    e11 = -(ip.sigma2_v + ip.sigma2_uy)
    return {
        "y*c": 0.0, "y*c[-2]": 0.0, "y^2*c": e2, "y^2*c[-2]": e2,
        "y[-2]^2*c": e2, "y*y[+2]*c": e11, "y*y[+2]*c[-2]": e11, "y*y[+2]*c[+2]": e11,
    }


def quadratic_moment_table(qc: QuadraticConsumptionParams, ip: IncomeParams,
                           centered: bool = False) -> dict[str, float]:
    """Analytic values of the quadratic-model targets, keyed by their canonical names."""
    table = _quadratic_formulas(qc, ip)
    if centered:
        mu = consumption_mean(qc, ip)
        table["c^2"] -= mu**2
        table["c*c[-2]"] -= mu**2
        for name, ey in _income_factor_means(ip).items():
            table[name] -= mu * ey
    return table


def predict_quadratic_moments(qc: QuadraticConsumptionParams, ip: IncomeParams, keys="cons_quadratic",
                              centered: bool = False, validate: bool = True) -> MomentVector:
    """Population joint moments under the quadratic consumption function.

    Parameters
    ----------
    centered : bool
        The quadratic terms give consumption growth a nonzero mean. With
        ``False`` the moments are raw products of growth rates; with ``True``
        consumption growth is demeaned first, which is what first-stage
        residuals with an intercept deliver.
    """
    if validate:
        ip.validate()
        qc.validate()
    table = quadratic_moment_table(qc, ip, centered)
    return MomentVector([MomentEntry(k, lookup(table, k), 0) for k in _resolve_keys(keys)])


def _need(m: MomentVector, name: str) -> float:
    try:
        return m[name]
    except KeyError:
        raise IdentificationError(f"moment {name} required for consumption identification") from None


def identify_linear(m: MomentVector, ip: IncomeParams, check: bool = True) -> LinearConsumptionParams:
    """Closed-form linear consumption parameters.

    Uses the exactly identifying subset of the moments present: second order
    always, third and fourth order for the taste and error moments when
    available.
    """
    sz, sv, su = ip.sigma2_zeta, ip.sigma2_v, ip.sigma2_uy
    if sz <= 0 or sv <= 0:
        raise IdentificationError(
            "transmission parameters need positive shock variances",
            values={"sigma2_zeta": sz, "sigma2_v": sv},
        )
    yc, ycl = _need(m, "y*c"), _need(m, "y*c[-2]")
    c2, cc = _need(m, "c^2"), _need(m, "c*c[-2]")
    # E(c * (y[-2] + y + y[+2])) / 2 with E(y[-2] c) = 0 in the model
    phi1 = (yc + ycl) / (2 * sz)
    psi1 = -ycl / sv
    sc = -cc
    sx = 0.5 * (c2 + 2 * cc) - phi1**2 * sz - 0.5 * psi1**2 * sv

    gx = gc = 0.0
    kx, kc = 3 * sx**2, 3 * sc**2
    if _has(m, "c^3") and _has(m, "c^2*c[-2]"):
        gc = m["c^2*c[-2]"]
        gx = 0.5 * (m["c^3"] - 2 * phi1**3 * ip.gamma_zeta - psi1**3 * ip.gamma_v)
    if _has(m, "c^4") and _has(m, "c^2*c[-2]^2"):
        f2, s2 = phi1**2, psi1**2
        kc = m["c^2*c[-2]^2"] - (
            4 * sx**2 + 8 * f2 * sx * sz + 4 * s2 * sx * sv + 8 * sx * sc + 4 * f2**2 * sz**2
            + 4 * f2 * s2 * sz * sv + 8 * f2 * sz * sc + s2**2 * sv**2 + 4 * s2 * sv * sc
            + 3 * sc**2
        )
        rest = (
            2 * f2**2 * ip.kappa_zeta + s2**2 * ip.kappa_v + 2 * kc
            + 6 * sx**2 + 6 * f2**2 * sz**2 + 6 * sc**2
            + 24 * f2 * sx * sz + 12 * s2 * sx * sv + 24 * sx * sc
            + 12 * f2 * s2 * sz * sv + 24 * f2 * sz * sc + 12 * s2 * sv * sc
        )
        kx = 0.5 * (m["c^4"] - rest)
    lc = LinearConsumptionParams(phi1, psi1, sx, gx, kx, sc, gc, kc)
    if check:
        bad = lc.violations()
        if bad:
            raise IdentificationError(
                "closed-form linear consumption parameters infeasible: " + "; ".join(bad),
                moments={str(e.key): e.value for e in m},
                values=lc.to_dict(),
            )
    return lc


def _has(m: MomentVector, name: str) -> bool:
    return name in m


def build_A(ip: IncomeParams, centered: bool = False) -> tuple[np.ndarray, float]:
    """Coefficient matrix linking five joint moments to the transmissions.

    Rows match ``E(yc), E(y^2 c), E(y c[-2]), E(y^2 c[-2]), E(y y[+2] c)``;
    columns match ``phi1, psi1, phi2, psi2, omega22``. With ``centered``
    the rows describe demeaned consumption growth.

    Returns
    -------
    A : ndarray of shape (5, 5)
    cond : float
        2-norm condition number (``inf`` when singular).
    """
    sz, gz, kz = ip.sigma2_zeta, ip.gamma_zeta, ip.kappa_zeta
    sv, gv, kv = ip.sigma2_v, ip.gamma_v, ip.kappa_v
    su = ip.sigma2_uy
    sb = ip.sigma_bar
    A = np.array([
        [2 * sz, sv, 2 * gz, gv, 0.0],
        [2 * gz, gv, 2 * (kz + sz * (2 * sb + sz)), kv + sv * (2 * sb - sv), 4 * sz * sv],
        [0.0, -sv, 0.0, -gv, 0.0],
        [0.0, gv, 4 * sz * sb, kv + sv * (2 * sb - sv), 0.0],
        [0.0, -gv, -2 * sz * (sb - sz), -kv - sv * su, -2 * sz * sv],
    ])
    if centered:
        ey = np.array([0.0, 2 * sb, 0.0, 2 * sb, -(sv + su)])
        A[:, 2] -= 2 * sz * ey
        A[:, 3] -= sv * ey
    try:
        cond = float(np.linalg.cond(A))
    except np.linalg.LinAlgError:
        cond = float("inf")
    if not np.isfinite(cond):
        cond = float("inf")
    return A, cond


QUADRATIC_B_KEYS = ("y*c", "y^2*c", "y*c[-2]", "y^2*c[-2]", "y*y[+2]*c")


def identify_quadratic(m: MomentVector, ip: IncomeParams, centered: bool = False,
                       cond_limit: float = A_COND_LIMIT) -> QuadraticConsumptionParams:
    """Closed-form quadratic consumption parameters via ``A^{-1} b``.

    The consumption-error variance then follows from the autocovariance of
    consumption growth and the taste variance from its variance.
    """
    A, cond = build_A(ip, centered=centered)
    if not cond < cond_limit:
        raise IdentificationError(
            f"coefficient matrix near-singular (condition number {cond:.3g} >= {cond_limit:.0e})",
            values={"condition_number": cond, "A": A.tolist()},
        )
    b = np.array([_need(m, k) for k in QUADRATIC_B_KEYS])
    f1, s1, f2, s2, w = np.linalg.solve(A, b)
    sz, gz, kz = ip.sigma2_zeta, ip.gamma_zeta, ip.kappa_zeta
    sv, gv, kv = ip.sigma2_v, ip.gamma_v, ip.kappa_v
    mu = 2 * f2 * sz + s2 * sv
    shift = mu**2 if centered else 0.0
    c2, cc = _need(m, "c^2") + shift, _need(m, "c*c[-2]") + shift
    sc = 4 * f2**2 * sz**2 + 4 * f2 * s2 * sz * sv + s2**2 * sv**2 - cc
    sx = 0.5 * (
        c2 - 2 * f1**2 * sz - s1**2 * sv - 2 * f2**2 * (kz + 3 * sz**2) - s2**2 * kv
        - 2 * w**2 * sz * sv - 2 * sc - 4 * f1 * f2 * gz - 2 * s1 * s2 * gv - 4 * f2 * s2 * sz * sv
    )
    return QuadraticConsumptionParams(*map(float, (f1, s1, f2, s2, w, sx, sc)))


def passthrough(qc: QuadraticConsumptionParams, zeta, v=0.0):
    """Marginal responses of consumption growth to the permanent and transitory shock."""
    zeta = np.asarray(zeta, dtype=float)
    v = np.asarray(v, dtype=float)
    dP = qc.phi1 + 2 * qc.phi2 * zeta + qc.omega22 * v
    dT = qc.psi1 + 2 * qc.psi2 * v + qc.omega22 * zeta
    if dP.ndim == 0:
        return float(dP), float(dT)
    return dP, dT


def passthrough_grid(qc: QuadraticConsumptionParams, zetas, vs) -> list[dict[str, float]]:
    """Rows of (zeta, v, dP, dT) over the lattice ``zetas x vs``."""
    rows = []
    for z in zetas:
        for v in vs:
            dP, dT = passthrough(qc, float(z), float(v))
            rows.append({"zeta": float(z), "v": float(v), "dP": dP, "dT": dT})
    return rows


def linear_bias(qc: QuadraticConsumptionParams, ip: IncomeParams) -> tuple[float, float]:
    """Probability limits of the linear transmissions when the truth is quadratic."""
    if ip.sigma2_zeta <= 0 or ip.sigma2_v <= 0:
        raise ValueError("linear_bias needs positive shock variances")
    phi = qc.phi1 + qc.phi2 * ip.gamma_zeta / ip.sigma2_zeta
    psi = qc.psi1 + qc.psi2 * ip.gamma_v / ip.sigma2_v
    return phi, psi


def structural_map(s: StructuralShares) -> QuadraticConsumptionParams:
    """Transmission parameters implied by the wealth share and annuitization factor."""
    pi, th = s.pi, s.thetaY
    return QuadraticConsumptionParams(
        phi1=1 - pi,
        psi1=(1 - pi) * th,
        phi2=0.5 * (1 - pi) * pi,
        psi2=0.5 * (1 - pi) * th * (1 - (1 - pi) * th),
        omega22=(1 - pi) * th * pi,
    )

