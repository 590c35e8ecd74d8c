"""First-stage regressions: unexplained biennial growth of income and consumption.

Regressors are given as term strings:

``"1"``
    intercept
``"wave"``
    wave dummies
``"age"``
    a covariate; numeric columns enter linearly, others as dummies
``"C(x)"``
    force dummies for ``x``
``"d(x)"``, ``"lag(x)"``
    change ``x_t - x_{t-2}`` and lag ``x_{t-2}`` of a numeric covariate
``"a*b"``
    interaction: every pairwise product of the columns of ``a`` and ``b``
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.linalg import qr, solve_triangular

from .panel import Panel

log = logging.getLogger(__name__)

PIVOT_TOL = 1e-10
VARIABLES = {"income": "log_income", "consumption": "log_consumption",
             "log_income": "log_income", "log_consumption": "log_consumption"}
DEFAULT_TERMS = ("1", "wave")


class RegressionError(ValueError):
    pass


@dataclass(frozen=True)
class GrowthMatrix:
    """Biennial growth on a household-by-wave grid, NaN where undefined."""

    household_ids: np.ndarray
    waves: np.ndarray
    values: np.ndarray

    def entries(self) -> dict[tuple[str, int], float]:
        out = {}
        for i, j in zip(*np.nonzero(np.isfinite(self.values))):
            out[(str(self.household_ids[i]), int(self.waves[j]))] = float(self.values[i, j])
        return out


def biennial_growth(panel: Panel, variable: str) -> GrowthMatrix:
    """``x_t - x_{t-2}`` wherever both waves are observed."""
    if variable not in VARIABLES:
        raise ValueError(f"variable must be one of {sorted(VARIABLES)}")
    ids, grid, mat = panel.wide(VARIABLES[variable])
    g = np.full_like(mat, np.nan)
    if mat.shape[1] > 1:
        g[:, 1:] = mat[:, 1:] - mat[:, :-1]
    return GrowthMatrix(ids, grid, g)


@dataclass(frozen=True)
class RegressionSpec:
    dependent: str
    regressors: tuple[str, ...] = DEFAULT_TERMS

    def __post_init__(self):
        if self.dependent not in ("income_growth", "consumption_growth"):
            raise ValueError("dependent must be income_growth or consumption_growth")
        object.__setattr__(self, "regressors", tuple(self.regressors))


@dataclass
class ResidualPanel:
    """Unexplained growth ``dy`` and ``dc`` on a household-by-wave grid.

    Households are sorted by id so every reduction over them runs in a
    fixed order.
    """

    household_ids: np.ndarray
    waves: np.ndarray
    dy: np.ndarray | None
    dc: np.ndarray | None
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        n, t = len(self.household_ids), len(self.waves)
        for name in ("dy", "dc"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (n, t):
                raise ValueError(f"{name} has shape {arr.shape}, expected {(n, t)}")

    @property
    def n_households(self) -> int:
        return len(self.household_ids)

    def records(self, household) -> list[tuple[int, float | None, float | None]]:
        i = int(np.searchsorted(self.household_ids, str(household)))
        if i >= self.n_households or self.household_ids[i] != str(household):
            raise KeyError(household)
        out = []
        for j, w in enumerate(self.waves):
            y = None if self.dy is None or np.isnan(self.dy[i, j]) else float(self.dy[i, j])
            c = None if self.dc is None or np.isnan(self.dc[i, j]) else float(self.dc[i, j])
            if y is not None or c is not None:
                out.append((int(w), y, c))
        return out

    def to_frame(self):
        ii, jj = np.meshgrid(np.arange(self.n_households), np.arange(len(self.waves)), indexing="ij")
        data = {"household_id": self.household_ids[ii.ravel()], "wave": self.waves[jj.ravel()]}
        data["dy"] = self.dy.ravel() if self.dy is not None else np.nan
        data["dc"] = self.dc.ravel() if self.dc is not None else np.nan
        df = pd.DataFrame(data)
        return df[df["dy"].notna() | df["dc"].notna()].reset_index(drop=True)

    @classmethod
    def from_frame(cls, df) -> "ResidualPanel":
        ids = np.array(sorted(df["household_id"].astype(str).unique()))
        waves = np.sort(df["wave"].astype(int).unique())
        if len(waves):
            waves = np.arange(waves[0], waves[-1] + 1, 2)
        rows = np.searchsorted(ids, df["household_id"].astype(str).to_numpy())
        cols = (df["wave"].astype(int).to_numpy() - waves[0]) // 2
        out = {}
        for name in ("dy", "dc"):
            mat = np.full((len(ids), len(waves)), np.nan)
            if name in df:
                mat[rows, cols] = df[name].astype(float).to_numpy()
            out[name] = mat
        return cls(ids, waves, out["dy"], out["dc"])


_CALL = re.compile(r"^(C|d|lag)\((\w+)\)$")


class _Design:
    """Builds named design columns for the cells of a growth grid."""

    def __init__(self, panel: Panel, ids: np.ndarray, waves: np.ndarray):
        self.panel = panel
        self.ids = ids
        self.waves = waves
        self._wide: dict = {}

    def _grid(self, name: str) -> np.ndarray:
        if name not in self._wide:
            df = self.panel._df
            if name not in df.columns:
                raise RegressionError(f"regressor references absent covariate {name!r}")
            pid, grid, _ = self.panel.wide("log_income")
            rows = np.searchsorted(pid, df["household_id"].to_numpy())
            cols = (df["wave"].to_numpy() - grid[0]) // 2
            mat = np.full((len(pid), len(grid)), None, dtype=object)
            mat[rows, cols] = df[name].to_numpy()
            self._wide[name] = mat
        return self._wide[name]

    def _numeric(self, name: str) -> bool:
        return self.panel._df[name].dtype.kind in "biuf"

    def _values(self, name: str, rows, cols, lag: int = 0) -> np.ndarray:
        mat = self._grid(name)
        c = cols - lag
        out = np.full(len(rows), None, dtype=object)
        ok = c >= 0
        out[ok] = mat[rows[ok], c[ok]]
        return out

    @staticmethod
    def _dummies(values: np.ndarray, label: str):
        codes, levels = pd.factorize(pd.Series(values), sort=True)
        present = codes >= 0
        cols, names = [], []
        for k, lev in enumerate(levels):
            cols.append(np.where(present, (codes == k).astype(float), np.nan))
            names.append(f"{label}[{lev}]")
        return cols, names

    def term(self, term: str, rows, cols):
        term = term.strip()
        if "*" in term:
            parts = [p for p in term.split("*")]
            acc_cols, acc_names = self.term(parts[0], rows, cols)
            for part in parts[1:]:
                c2, n2 = self.term(part, rows, cols)
                acc_cols = [a * b for a in acc_cols for b in c2]
                acc_names = [f"{a}:{b}" for a in acc_names for b in n2]
            return acc_cols, acc_names
        if term == "1":
            return [np.ones(len(rows))], ["1"]
        if term == "wave":
            return self._dummies(self.waves[cols], "wave")
        m = _CALL.match(term)
        if m:
            fn, name = m.groups()
            if fn == "C":
                return self._dummies(self._values(name, rows, cols), name)
            if not self._numeric(name):
                raise RegressionError(f"{fn}({name}) needs a numeric covariate")
            now = self._values(name, rows, cols).astype(float)
            prev = self._values(name, rows, cols, lag=1).astype(float)
            if fn == "d":
                return [now - prev], [term]
            return [prev], [term]
        if term in self.panel._df.columns:
            if self._numeric(term):
                return [self._values(term, rows, cols).astype(float)], [term]
            return self._dummies(self._values(term, rows, cols), term)
        raise RegressionError(f"regressor references absent covariate {term!r}")


def _design_matrix(panel: Panel, g: GrowthMatrix, terms: Sequence[str], rows, cols):
    design = _Design(panel, g.household_ids, g.waves)
    columns, names = [], []
    for term in terms:
        c, n = design.term(term, rows, cols)
        columns += c
        names += n
    if not columns:
        return np.empty((len(rows), 0)), []
    return np.column_stack(columns), names


def residualize(growth: GrowthMatrix, spec: RegressionSpec | Sequence[str], panel: Panel) -> ResidualPanel:
    """OLS residuals of growth on the requested regressors.

    Collinear columns (relative pivot below 1e-10 in a column-pivoted QR)
    are dropped and listed in ``report['dropped']``. Cells with missing
    regressors get no residual.
    """
    terms = spec.regressors if isinstance(spec, RegressionSpec) else tuple(spec)
    dependent = spec.dependent if isinstance(spec, RegressionSpec) else "income_growth"
    rows, cols = np.nonzero(np.isfinite(growth.values))
    y = growth.values[rows, cols]
    X, names = _design_matrix(panel, growth, terms, rows, cols)
    complete = np.all(np.isfinite(X), axis=1) if X.shape[1] else np.ones(len(y), bool)
    rows, cols, y, X = rows[complete], cols[complete], y[complete], X[complete]
    report = {"dependent": dependent, "columns": names, "dropped": [], "n_cells": int(len(y)),
              "missing_regressors": int((~complete).sum())}

    resid = y.copy()
    if X.shape[1]:
        if len(y) < 2 * X.shape[1]:
            raise RegressionError(
                f"{len(y)} cells for {X.shape[1]} regressor columns; need at least twice as many"
            )
        Q, R, piv = qr(X, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        rank = int(np.sum(diag > PIVOT_TOL * diag[0])) if diag.size and diag[0] > 0 else 0
        if rank == 0:
            raise RegressionError("design matrix has rank zero")
        kept = np.sort(piv[:rank])
        report["dropped"] = [names[j] for j in sorted(piv[rank:])]
        Qr = Q[:, :rank]
        coef = solve_triangular(R[:rank, :rank], Qr.T @ y)
        report["coefficients"] = {names[piv[k]]: float(coef[k]) for k in range(rank)}
        resid = y - Qr @ (Qr.T @ y)
        # one refinement step tightens orthogonality
        resid = resid - Qr @ (Qr.T @ resid)
        report["rank"] = rank
        report["kept"] = [names[j] for j in kept]
        if report["dropped"]:
            log.info("residualize(%s): dropped collinear columns %s", dependent, report["dropped"])

    out = np.full(growth.values.shape, np.nan)
    out[rows, cols] = resid
    is_income = dependent == "income_growth"
    return ResidualPanel(
        growth.household_ids, growth.waves,
        out if is_income else None, None if is_income else out,
        {dependent: report},
    )


def residualize_panel(panel: Panel, income_terms: Sequence[str] = DEFAULT_TERMS,
                      consumption_terms: Sequence[str] | None = None) -> ResidualPanel:
    """Residualize income and consumption growth; consumption reuses income terms by default."""
    if consumption_terms is None:
        consumption_terms = income_terms
    ry = residualize(biennial_growth(panel, "income"), RegressionSpec("income_growth", income_terms), panel)
    rc = residualize(biennial_growth(panel, "consumption"),
                     RegressionSpec("consumption_growth", consumption_terms), panel)
    report = dict(ry.report)
    report.update(rc.report)
    return ResidualPanel(ry.household_ids, ry.waves, ry.dy, rc.dc, report)


def raw_growth_panel(panel: Panel) -> ResidualPanel:
    """Growth without any first stage, for covariate-free simulated data."""
    gy = biennial_growth(panel, "income")
    gc = biennial_growth(panel, "consumption")
    return ResidualPanel(gy.household_ids, gy.waves, gy.values, gc.values, {})
