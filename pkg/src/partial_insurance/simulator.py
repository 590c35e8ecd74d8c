"""Synthetic household panels with non-Gaussian annual shocks.

Each shock is drawn from a two-component normal mixture matched to its
first four central moments. Shocks arrive annually; income and consumption
are recorded only at biennial waves.

Randomness is organized in blocks of ``BLOCK`` households. Block ``b`` draws
from ``SeedSequence([seed, b])``, so any range of blocks can be generated
on its own and the result does not depend on chunking or scheduling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from .consumption_model import LinearConsumptionParams, QuadraticConsumptionParams
from .income_model import IncomeParams, moment_feasible
from .moments import MomentKey, MomentVector, moment_from_arrays, target_set
from .panel import Panel

log = logging.getLogger(__name__)

BLOCK = 1024
_P_GRID = (0.5, 0.3, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001)
# tried only when the coarse grid fails, e.g. close to the feasibility frontier
_P_FINE = tuple(np.round(np.geomspace(0.4999, 1e-4, 400), 12))
_SCAN = 4001


class MixtureError(ValueError):
    """Target moments outside the reach of the two-normal family, or no convergence."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


@dataclass(frozen=True)
class ShockSpec:
    """Target central moments of a mean-zero shock; ``kappa`` defaults to Gaussian."""

    sigma2: float
    gamma: float = 0.0
    kappa: float | None = None

    def __post_init__(self):
        if self.kappa is None:
            object.__setattr__(self, "kappa", 3.0 * self.sigma2**2)
        if not moment_feasible(self.sigma2, self.gamma, self.kappa):
            raise ValueError(
                f"infeasible shock moments: sigma2={self.sigma2}, gamma={self.gamma}, kappa={self.kappa}"
            )

    @property
    def skewness(self) -> float:
        return self.gamma / self.sigma2**1.5 if self.sigma2 > 0 else 0.0

    @property
    def kurtosis(self) -> float:
        return self.kappa / self.sigma2**2 if self.sigma2 > 0 else 3.0


@dataclass(frozen=True)
class MixtureRepresentation:
    """``p N(mu1, sigma1^2) + (1 - p) N(mu2, sigma2_c^2)``; ``sigma1``/``sigma2_c`` are std devs."""

    p: float
    mu1: float
    sigma1: float
    mu2: float
    sigma2_c: float

    def central_moments(self) -> tuple[float, float, float, float]:
        """Mean and second to fourth central moments."""
        w = np.array([self.p, 1 - self.p])
        mu = np.array([self.mu1, self.mu2])
        var = np.array([self.sigma1, self.sigma2_c]) ** 2
        mean = float(w @ mu)
        d = mu - mean
        m2 = float(w @ (d**2 + var))
        m3 = float(w @ (d**3 + 3 * d * var))
        m4 = float(w @ (d**4 + 6 * d**2 * var + 3 * var**2))
        return mean, m2, m3, m4

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        u = rng.random(size)
        z = rng.standard_normal(size)
        first = u < self.p
        return np.where(first, self.mu1 + self.sigma1 * z, self.mu2 + self.sigma2_c * z)


def _std_moments(p, m1, a, b):
    m2 = -p * m1 / (1 - p)
    return (
        p * (m1**2 + a) + (1 - p) * (m2**2 + b),
        p * (m1**3 + 3 * m1 * a) + (1 - p) * (m2**3 + 3 * m2 * b),
        p * (m1**4 + 6 * m1**2 * a + 3 * a**2) + (1 - p) * (m2**4 + 6 * m2**2 * b + 3 * b**2),
    )


def _variances(p, m1, skew):
    """Component variances matching unit variance and the skewness, given p and mu1."""
    m2 = -p * m1 / (1 - p)
    det = 3 * p * (1 - p) * (m2 - m1)
    r1 = 1 - p * m1**2 - (1 - p) * m2**2
    r2 = skew - p * m1**3 - (1 - p) * m2**3
    a = (3 * (1 - p) * m2 * r1 - (1 - p) * r2) / det
    b = (p * r2 - 3 * p * m1 * r1) / det
    return a, b


def _solve_standardized(skew: float, kurt: float):
    if abs(skew) < 1e-12:
        if abs(kurt - 3.0) <= 1e-9:
            return 0.5, 0.0, 1.0, 0.0, 1.0
        if kurt < 3.0:
            raise MixtureError(
                f"symmetric target with kurtosis {kurt:.4g} < 3 is outside the scale-mixture family"
            )
        t = np.sqrt(kurt / 3.0 - 1.0)
        p = min(0.5, 1.5 / kurt)
        a = 1 + t * np.sqrt((1 - p) / p)
        b = 1 - t * np.sqrt(p / (1 - p))
        return p, 0.0, float(np.sqrt(a)), 0.0, float(np.sqrt(b))

    best = None
    for p in _P_GRID + _P_FINE:
        bound = np.sqrt((1 - p) / p)
        # the minority component sits in the tail the skewness points to
        sign = np.sign(skew)
        grid = sign * np.geomspace(1e-9 * bound, bound * (1 - 1e-9), _SCAN)
        a, b = _variances(p, grid, skew)
        ok = (a > 0) & (b > 0)
        if not ok.any():
            continue
        resid = _std_moments(p, grid, a, b)[2] - kurt
        for i in np.flatnonzero(ok[:-1] & ok[1:] & (np.sign(resid[:-1]) != np.sign(resid[1:]))):

            def f(m1, p=p):
                aa, bb = _variances(p, m1, skew)
                return _std_moments(p, m1, aa, bb)[2] - kurt

            m1 = brentq(f, grid[i], grid[i + 1], xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
            a1, b1 = _variances(p, m1, skew)
            if a1 > 0 and b1 > 0:
                return p, m1, float(np.sqrt(a1)), -p * m1 / (1 - p), float(np.sqrt(b1))
        i = int(np.argmin(np.where(ok, np.abs(resid), np.inf)))
        if best is None or abs(resid[i]) < best[0]:
            best = (abs(resid[i]), p, grid[i])
    raise MixtureError(
        f"no two-normal mixture with skewness {skew:.4g} and kurtosis {kurt:.4g}",
        residuals={"closest_kurtosis_gap": None if best is None else float(best[0])},
    )


def solve_mixture(s: ShockSpec) -> MixtureRepresentation:
    """Two-normal mixture with mean zero and central moments ``(sigma2, gamma, kappa)``.

    Works in standardized units: for each mixing weight on a grid the mean
    constraint fixes ``mu2``, the variance and skewness equations are linear
    in the component variances, and the kurtosis equation is solved for
    ``mu1`` by bracketing root search.
    """
    if s.sigma2 == 0:
        return MixtureRepresentation(0.5, 0.0, 0.0, 0.0, 0.0)
    sd = np.sqrt(s.sigma2)
    p, m1, s1, m2, s2 = _solve_standardized(s.skewness, s.kurtosis)
    mix = MixtureRepresentation(float(p), float(m1 * sd), float(s1 * sd), float(m2 * sd), float(s2 * sd))
    _, v2, v3, v4 = mix.central_moments()
    resid = (v2 - s.sigma2, v3 - s.gamma, v4 - s.kappa)
    scale = (s.sigma2, s.sigma2**1.5, s.sigma2**2)
    if max(abs(r) / sc for r, sc in zip(resid, scale)) > 1e-8:
        raise MixtureError("mixture solver did not converge", residuals=resid)
    return mix


ConsumptionParams = LinearConsumptionParams | QuadraticConsumptionParams


@dataclass(frozen=True)
class SimConfig:
    """Simulation design.

    Taste-shift and consumption-error moments are read from ``consumption``;
    ``sigma2_xi`` and ``uc_variance`` are views of those fields.
    """

    n_households: int
    waves: Sequence[int]
    zeta_spec: ShockSpec
    v_spec: ShockSpec
    uy_variance: float = 0.0
    consumption: ConsumptionParams = field(default_factory=lambda: LinearConsumptionParams(0.0, 0.0))
    attrition: float = 0.0
    seed: int = 0
    initial_permanent_var: float = 0.0
    demographics: bool = False
    annual_periods_per_wave: int = 2

    def __post_init__(self):
        waves = tuple(int(w) for w in self.waves)
        object.__setattr__(self, "waves", waves)
        if self.n_households < 1:
            raise ValueError("n_households must be at least 1")
        if len(waves) < 1 or any(b - a != 2 for a, b in zip(waves, waves[1:])):
            raise ValueError("waves must be consecutive biennial years")
        if self.annual_periods_per_wave != 2:
            raise ValueError("only biennial observation (2 annual periods per wave) is supported")
        if not 0.0 <= self.attrition < 1.0:
            raise ValueError("attrition must lie in [0, 1)")
        if self.uy_variance < 0 or self.initial_permanent_var < 0:
            raise ValueError("variances must be non-negative")
        self.consumption.validate()

    @property
    def sigma2_xi(self) -> float:
        return self.consumption.sigma2_xi

    @property
    def uc_variance(self) -> float:
        return self.consumption.sigma2_uc

    @property
    def income_params(self) -> IncomeParams:
        z, v = self.zeta_spec, self.v_spec
        return IncomeParams(z.sigma2, z.gamma, z.kappa, v.sigma2, v.gamma, v.kappa, self.uy_variance)

    @property
    def years(self) -> np.ndarray:
        """Annual calendar years with shocks; the year before the first wave anchors levels."""
        return np.arange(self.waves[0] - 3, self.waves[-1] + 1)

    @property
    def n_blocks(self) -> int:
        return -(-self.n_households // BLOCK)


@dataclass
class Archive:
    """Every latent draw of a simulation, on household-by-year or household-by-wave grids."""

    household_ids: np.ndarray
    years: np.ndarray
    waves: np.ndarray
    zeta: np.ndarray
    v: np.ndarray
    xi: np.ndarray
    uy: np.ndarray
    uc: np.ndarray
    permanent0: np.ndarray
    observed: np.ndarray
    consumption: ConsumptionParams

    def _col(self, year):
        return year - self.years[0]

    def growth(self) -> tuple[np.ndarray, np.ndarray]:
        """Biennial growth rebuilt from latent components, NaN where unobserved."""
        n, T = len(self.household_ids), len(self.waves)
        dy = np.full((n, T), np.nan)
        dc = np.full((n, T), np.nan)
        q = self.consumption
        phi2 = getattr(q, "phi2", 0.0)
        psi2 = getattr(q, "psi2", 0.0)
        omega = getattr(q, "omega22", 0.0)
        for j in range(1, T):
            t = self._col(self.waves[j])
            z = self.zeta[:, t] + self.zeta[:, t - 1]
            v = self.v[:, t]
            ok = self.observed[:, j] & self.observed[:, j - 1]
            y = z + v - self.v[:, t - 2] + self.uy[:, j] - self.uy[:, j - 1]
            c = (self.xi[:, t] + self.xi[:, t - 1] + q.phi1 * z + q.psi1 * v
                 + phi2 * z**2 + psi2 * v**2 + omega * z * v + self.uc[:, j] - self.uc[:, j - 1])
            dy[ok, j] = y[ok]
            dc[ok, j] = c[ok]
        return dy, dc

    def to_frame(self):
        frames = []
        for name, mat, axis in (("zeta", self.zeta, self.years), ("v", self.v, self.years),
                                ("xi", self.xi, self.years), ("uy", self.uy, self.waves),
                                ("uc", self.uc, self.waves)):
            ii, jj = np.meshgrid(np.arange(len(self.household_ids)), np.arange(len(axis)), indexing="ij")
            frames.append(pd.DataFrame({
                "household_id": self.household_ids[ii.ravel()], "year": axis[jj.ravel()],
                "component": name, "value": mat.ravel(),
            }))
        frames.append(pd.DataFrame({
            "household_id": self.household_ids, "year": self.years[0],
            "component": "permanent0", "value": self.permanent0,
        }))
        return pd.concat(frames, ignore_index=True)


def _household_id(i: int) -> str:
    return f"h{i:08d}"


def _mixtures(cfg: SimConfig) -> dict[str, MixtureRepresentation]:
    q = cfg.consumption
    gx = getattr(q, "gamma_xi", 0.0)
    kx = getattr(q, "kappa_xi", 3.0 * q.sigma2_xi**2)
    gc = getattr(q, "gamma_uc", 0.0)
    kc = getattr(q, "kappa_uc", 3.0 * q.sigma2_uc**2)
    return {
        "zeta": solve_mixture(cfg.zeta_spec),
        "v": solve_mixture(cfg.v_spec),
        "xi": solve_mixture(ShockSpec(q.sigma2_xi, gx, kx)),
        "uc": solve_mixture(ShockSpec(q.sigma2_uc, gc, kc)),
    }


def _simulate_block(cfg: SimConfig, mixes, b: int):
    start = b * BLOCK
    n = min(BLOCK, cfg.n_households - start)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, b]))
    n_years = len(cfg.years)
    T = len(cfg.waves)
    zeta = mixes["zeta"].sample(rng, (n, n_years))
    v = mixes["v"].sample(rng, (n, n_years))
    xi = mixes["xi"].sample(rng, (n, n_years))
    uy = np.sqrt(cfg.uy_variance) * rng.standard_normal((n, T))
    uc = mixes["uc"].sample(rng, (n, T))
    perm0 = np.sqrt(cfg.initial_permanent_var) * rng.standard_normal(n)
    stay = rng.random((n, T)) >= cfg.attrition
    stay[:, 0] = True
    observed = np.cumprod(stay, axis=1).astype(bool)
    demo = None
    if cfg.demographics:
        age0 = rng.integers(30, 56, size=n)
        college = rng.random(n) < 0.5
        log_wealth = rng.normal(11.0, 1.2, size=n)
        demo = (age0, college, log_wealth)
    return dict(zeta=zeta, v=v, xi=xi, uy=uy, uc=uc, permanent0=perm0, observed=observed,
                ids=np.array([_household_id(start + i) for i in range(n)]), demo=demo)


def _levels(cfg: SimConfig, d) -> tuple[np.ndarray, np.ndarray]:
    """Log income and log consumption at each wave."""
    years = cfg.years
    q = cfg.consumption
    phi2 = getattr(q, "phi2", 0.0)
    psi2 = getattr(q, "psi2", 0.0)
    omega = getattr(q, "omega22", 0.0)
    # permanent component: P at year (first wave - 3) is the initial draw
    perm = d["permanent0"][:, None] + np.cumsum(d["zeta"], axis=1) - d["zeta"][:, :1]
    cols = np.array([w - years[0] for w in cfg.waves])
    log_y = perm[:, cols] + d["v"][:, cols] + d["uy"]
    n, T = log_y.shape
    cstar = np.zeros((n, T))
    for j in range(1, T):
        t = cols[j]
        z = d["zeta"][:, t] + d["zeta"][:, t - 1]
        v = d["v"][:, t]
        dc = (d["xi"][:, t] + d["xi"][:, t - 1] + q.phi1 * z + q.psi1 * v
              + phi2 * z**2 + psi2 * v**2 + omega * z * v)
        cstar[:, j] = cstar[:, j - 1] + dc
    log_c = cstar + d["uc"]
    return log_y, log_c


def simulate_blocks(cfg: SimConfig, first_block: int = 0, last_block: int | None = None):
    """Wide arrays and archive for a range of household blocks.

    Returns ``(ids, log_income, log_consumption, archive, demographics)`` with
    unobserved cells set to NaN.
    """
    last_block = cfg.n_blocks if last_block is None else min(last_block, cfg.n_blocks)
    mixes = _mixtures(cfg)
    parts = [_simulate_block(cfg, mixes, b) for b in range(first_block, last_block)]
    cat = {k: np.concatenate([p[k] for p in parts]) for k in
           ("zeta", "v", "xi", "uy", "uc", "permanent0", "observed", "ids")}
    log_y, log_c = _levels(cfg, cat)
    log_y[~cat["observed"]] = np.nan
    log_c[~cat["observed"]] = np.nan
    archive = Archive(cat["ids"], cfg.years, np.array(cfg.waves), cat["zeta"], cat["v"], cat["xi"],
                      cat["uy"], cat["uc"], cat["permanent0"], cat["observed"], cfg.consumption)
    demo = None
    if cfg.demographics:
        demo = tuple(np.concatenate([p["demo"][k] for p in parts]) for k in range(3))
    return cat["ids"], log_y, log_c, archive, demo


def simulate_panel(cfg: SimConfig) -> tuple[Panel, Archive]:
    """Simulated panel and the archive of its latent draws."""
    ids, log_y, log_c, archive, demo = simulate_blocks(cfg)
    n, T = log_y.shape
    waves = np.array(cfg.waves)
    obs = archive.observed
    ii, jj = np.nonzero(obs)
    cols = {"household_id": ids[ii], "wave": waves[jj], "log_income": log_y[ii, jj],
            "log_consumption": log_c[ii, jj]}
    if demo is not None:
        age0, college, log_wealth = demo
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2**31]))
        cols["male_age"] = age0[ii] + 2 * jj
        cols["education_group"] = np.where(college[ii], "some_college", "no_college")
        cols["wealth"] = np.exp(log_wealth[ii] + 0.1 * rng.standard_normal(len(ii)))
    panel = Panel(pd.DataFrame(cols), meta={"simulated": True, "seed": cfg.seed})
    return panel, archive


def oracle_moments(archive: Archive, keys="cons_quadratic") -> MomentVector:
    """Target moments computed straight from latent components."""
    if isinstance(keys, str):
        keys = target_set(keys)
    keys = [k if isinstance(k, MomentKey) else MomentKey.parse(k) for k in keys]
    dy, dc = archive.growth()
    return MomentVector([moment_from_arrays(dy, dc, k) for k in keys])
