"""Household panel at biennial frequency: ingestion, cleaning and subsamples."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

REQUIRED = ("household_id", "wave", "log_income", "log_consumption")
OPTIONAL = ("wealth", "male_age", "education_group")
EDUCATION_GROUPS = ("no_college", "some_college")
WEALTH_SPLITS = ("below_median", "above_median")
JUMP_RATIO = 10.0
PRODUCT_TRIM_SHARE = 0.0025


class PanelError(ValueError):
    pass


@dataclass(frozen=True)
class Observation:
    household_id: str
    wave: int
    log_income: float = float("nan")
    log_consumption: float = float("nan")
    covariates: Mapping[str, object] = field(default_factory=dict)
    wealth: float | None = None
    male_age: int | None = None
    education_group: str | None = None


@dataclass(frozen=True)
class RowDiagnostic:
    line: int
    reason: str


class Panel:
    """Immutable household-by-wave panel.

    Parameters
    ----------
    frame : DataFrame
        One row per (household, wave) with the required columns; other
        columns beyond the optional ones are covariates.
    meta : dict, optional
        Metadata carried through cleaning, e.g. trimming cut-offs.
    rejected : sequence of RowDiagnostic, optional
        Rows dropped during ingestion.
    """

    def __init__(self, frame: pd.DataFrame, meta: dict | None = None, rejected=()):
        missing = [c for c in REQUIRED if c not in frame.columns]
        if missing:
            raise PanelError(f"missing required columns: {missing}")
        df = frame.copy()
        df["household_id"] = df["household_id"].astype(str)
        df["wave"] = df["wave"].astype(np.int64)
        for col in ("log_income", "log_consumption"):
            df[col] = df[col].astype(float)
        for col in OPTIONAL:
            if col not in df.columns:
                df[col] = np.nan if col != "education_group" else None
        dup = df.duplicated(["household_id", "wave"], keep=False)
        if dup.any():
            first = df.loc[dup, ["household_id", "wave"]].iloc[0]
            raise PanelError(
                f"duplicate (household, wave) pair: ({first['household_id']}, {first['wave']})"
            )
        df = df.sort_values(["household_id", "wave"], kind="mergesort").reset_index(drop=True)
        if len(df):
            parity = df["wave"] % 2
            if parity.nunique() > 1:
                raise PanelError("waves must lie on a single biennial grid (mixed parity)")
        self._df = df
        self.meta = dict(meta or {})
        self.rejected = tuple(rejected)
        self._wide_cache: dict = {}

    # construction
    @classmethod
    def from_observations(cls, observations: Iterable[Observation]) -> "Panel":
        rows = []
        for o in observations:
            row = {
                "household_id": o.household_id, "wave": o.wave,
                "log_income": o.log_income, "log_consumption": o.log_consumption,
                "wealth": np.nan if o.wealth is None else o.wealth,
                "male_age": np.nan if o.male_age is None else o.male_age,
                "education_group": o.education_group,
            }
            row.update(o.covariates)
            rows.append(row)
        return cls(pd.DataFrame(rows, columns=None if rows else list(REQUIRED)))

    @classmethod
    def from_arrays(cls, ids, waves, log_income, log_consumption, **columns) -> "Panel":
        data = {"household_id": ids, "wave": waves, "log_income": log_income,
                "log_consumption": log_consumption}
        data.update(columns)
        return cls(pd.DataFrame(data))

    # views
    @property
    def frame(self) -> pd.DataFrame:
        """Copy of the underlying table."""
        return self._df.copy()

    @property
    def waves(self) -> list[int]:
        """Observed wave universe, sorted."""
        return sorted(int(w) for w in self._df["wave"].unique())

    @property
    def wave_grid(self) -> np.ndarray:
        """Contiguous biennial grid spanning the observed waves."""
        w = self.waves
        if not w:
            return np.array([], dtype=np.int64)
        return np.arange(w[0], w[-1] + 1, 2, dtype=np.int64)

    @property
    def households(self) -> list[str]:
        return list(pd.unique(self._df["household_id"]))

    @property
    def n_households(self) -> int:
        return int(self._df["household_id"].nunique())

    @property
    def covariate_names(self) -> list[str]:
        return [c for c in self._df.columns if c not in REQUIRED + OPTIONAL]

    def __len__(self) -> int:
        return len(self._df)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Panel):
            return NotImplemented
        return self._df.equals(other._df)

    def __repr__(self) -> str:
        return f"Panel({self.n_households} households, {len(self)} observations, waves={self.waves})"

    def observations(self) -> Iterable[Observation]:
        covs = self.covariate_names
        for row in self._df.itertuples(index=False):
            r = row._asdict()
            yield Observation(
                r["household_id"], int(r["wave"]), r["log_income"], r["log_consumption"],
                {c: r[c] for c in covs},
                None if pd.isna(r["wealth"]) else float(r["wealth"]),
                None if pd.isna(r["male_age"]) else int(r["male_age"]),
                r["education_group"] if isinstance(r["education_group"], str) else None,
            )

    def column(self, name: str, wave: int | None = None) -> np.ndarray:
        df = self._df if wave is None else self._df[self._df["wave"] == wave]
        return df[name].to_numpy()

    def wide(self, variable: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Household-by-grid matrix of a variable, NaN where unobserved.

        Returns household ids (sorted), grid waves and the matrix.
        """
        if variable not in self._wide_cache:
            ids, inv = np.unique(self._df["household_id"].to_numpy(), return_inverse=True)
            grid = self.wave_grid
            col = ((self._df["wave"].to_numpy() - grid[0]) // 2) if len(grid) else np.array([], int)
            mat = np.full((len(ids), len(grid)), np.nan)
            mat[inv, col] = self._df[variable].to_numpy(dtype=float)
            self._wide_cache[variable] = (ids, grid, mat)
        ids, grid, mat = self._wide_cache[variable]
        return ids, grid, mat.copy()

    def with_frame(self, frame: pd.DataFrame, **meta) -> "Panel":
        new_meta = dict(self.meta)
        new_meta.update(meta)
        return Panel(frame, new_meta)

    def select_households(self, ids: Iterable[str]) -> "Panel":
        keep = set(map(str, ids))
        return self.with_frame(self._df[self._df["household_id"].isin(keep)])

    def resample(self, rng: np.random.Generator) -> "Panel":
        """Household-block bootstrap draw; duplicates receive fresh ids."""
        df = self._df
        codes, uniques = pd.factorize(df["household_id"], sort=True)
        n = len(uniques)
        starts = np.searchsorted(codes, np.arange(n))
        ends = np.searchsorted(codes, np.arange(n), side="right")
        draw = rng.integers(0, n, size=n)
        lengths = ends[draw] - starts[draw]
        rows = np.concatenate([np.arange(starts[d], ends[d]) for d in draw]) if n else np.array([], int)
        out = df.iloc[rows].copy()
        out["household_id"] = np.repeat([f"b{j:07d}" for j in range(n)], lengths)
        return Panel(out, dict(self.meta))


def load_panel(path, schema: Mapping[str, str] | None = None) -> Panel:
    """Read a UTF-8 CSV panel with a header row.

    ``schema`` maps canonical field names (``household_id``, ``wave``,
    ``log_income``, ``log_consumption`` and optionally ``wealth``,
    ``male_age``, ``education_group``) to CSV column names. Unmapped columns
    become covariates. Rows with unparseable or non-finite values are
    rejected and listed in ``Panel.rejected``; blank cells count as missing.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"panel file not found: {path}")
    schema = dict(schema or {})
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    rename = {}
    for canon in REQUIRED + OPTIONAL:
        src = schema.get(canon, canon)
        if src in raw.columns:
            rename[src] = canon
        elif canon in REQUIRED:
            raise PanelError(f"missing required column {src!r} (for {canon})")
    raw = raw.rename(columns=rename)

    rejected = []
    good = np.ones(len(raw), dtype=bool)
    parsed = {}
    for col in ("wave",):
        vals = pd.to_numeric(raw[col], errors="coerce")
        bad = vals.isna() | (vals != np.round(vals))
        parsed[col] = vals
        _reject(rejected, good, bad, f"{col} is not an integer")
    for col in ("log_income", "log_consumption", "wealth", "male_age"):
        if col not in raw.columns:
            continue
        text = raw[col].str.strip()
        blank = text == ""
        vals = pd.to_numeric(text.where(~blank, None), errors="coerce")
        bad = ~blank & ~np.isfinite(vals.to_numpy(dtype=float, na_value=np.nan))
        parsed[col] = vals
        _reject(rejected, good, bad, f"{col} is not a finite number")
    ids_blank = raw["household_id"].str.strip() == ""
    _reject(rejected, good, ids_blank, "household_id is blank")
    if "education_group" in raw.columns:
        edu = raw["education_group"].str.strip()
        bad = (edu != "") & ~edu.isin(EDUCATION_GROUPS)
        _reject(rejected, good, bad, f"education_group not in {EDUCATION_GROUPS}")
        parsed["education_group"] = edu.where(edu != "", None)

    frame = raw.copy()
    for col, vals in parsed.items():
        frame[col] = vals
    for col in frame.columns:
        if col in REQUIRED + OPTIONAL:
            continue
        num = pd.to_numeric(frame[col], errors="coerce")
        if num.notna().all():
            frame[col] = num
    frame = frame[good]
    if rejected:
        log.warning("load_panel: rejected %d rows from %s", len(rejected), path)
    rejected.sort(key=lambda d: d.line)
    return Panel(frame, rejected=rejected)


def _reject(rejected: list, good: np.ndarray, bad, reason: str) -> None:
    bad = np.asarray(bad, dtype=bool)
    for i in np.flatnonzero(bad & good):
        # header is line 1
        rejected.append(RowDiagnostic(int(i) + 2, reason))
    good &= ~bad


def write_panel(panel: Panel, path) -> None:
    from ._io import atomic_write_frame

    atomic_write_frame(panel.frame, path)


@dataclass(frozen=True)
class TrimReport:
    jumps: int
    products: int
    cutoffs: dict

    @property
    def total(self) -> int:
        return self.jumps + self.products


def _jump_flags(levels: np.ndarray) -> np.ndarray:
    """Observations to drop for >=10-fold jumps between adjacent waves.

    A jump followed by an opposite jump over a contiguous stretch is a
    spike: the observations between the two jumps are dropped. A jump
    without such a reversal drops the later observation. Dropping only
    removes adjacent pairs, so one pass suffices.
    """
    drop = np.zeros(levels.shape, dtype=bool)
    lim = np.log(JUMP_RATIO)
    g = levels[:, 1:] - levels[:, :-1]
    with np.errstate(invalid="ignore"):
        ext = np.abs(g) >= lim - 1e-12
    for i in np.flatnonzero(ext.any(axis=1)):
        js = np.flatnonzero(ext[i])
        signs = np.sign(g[i, js])
        a = 0
        while a < len(js):
            j = js[a]
            if a + 1 < len(js) and signs[a + 1] != signs[a] and np.all(np.isfinite(g[i, j:js[a + 1] + 1])):
                drop[i, j + 1:js[a + 1] + 1] = True
                a += 2
            else:
                drop[i, j + 1] = True
                a += 1
    return drop


def _product_flags(levels: np.ndarray, cutoff: float | None):
    """Flag middles of growth pairs whose product falls at or below the cut-off."""
    g = levels[:, 1:] - levels[:, :-1]
    prod = g[:, :-1] * g[:, 1:]
    finite = prod[np.isfinite(prod)]
    if cutoff is None:
        cutoff = float(np.quantile(finite, PRODUCT_TRIM_SHARE)) if finite.size else -np.inf
        # only genuine reversals qualify
        cutoff = min(cutoff, 0.0)
    flags = np.zeros(levels.shape, dtype=bool)
    hit = np.isfinite(prod) & (prod <= cutoff) & (prod < 0)
    flags[:, 1:-1] = hit
    return flags, cutoff


def trim_outliers(panel: Panel) -> tuple[Panel, TrimReport]:
    """Remove extreme jumps and reversal outliers in income or consumption.

    The reversal cut-off is the 0.25th percentile of the pooled products of
    adjacent biennial growth rates. It is computed once and stored in the
    returned panel's metadata; re-trimming reuses it, so the operation is
    idempotent.
    """
    if len(panel) == 0:
        return panel, TrimReport(0, 0, {})
    stored = panel.meta.get("trim_cutoffs", {})
    jump = None
    mats = {}
    for var in ("log_income", "log_consumption"):
        ids, grid, mat = panel.wide(var)
        mats[var] = mat
        flags = _jump_flags(mat)
        jump = flags if jump is None else jump | flags
    cutoffs = {}
    prod = np.zeros_like(jump)
    for var, mat in mats.items():
        flags, cutoffs[var] = _product_flags(np.where(jump, np.nan, mat), stored.get(var))
        prod |= flags & ~jump
    drop = jump | prod
    df = panel.frame
    row_hh = np.searchsorted(ids, df["household_id"].to_numpy())
    row_w = (df["wave"].to_numpy() - grid[0]) // 2
    keep = ~drop[row_hh, row_w]
    report = TrimReport(int(jump.sum()), int(prod.sum()), cutoffs)
    log.info("trim_outliers: %d jump and %d reversal observations removed", report.jumps, report.products)
    return panel.with_frame(df[keep], trim_cutoffs=cutoffs), report


@dataclass(frozen=True)
class SubsampleFilter:
    """Household-level subsample selection; unset axes are ignored."""

    age_bracket: tuple[int, int] | None = None
    wealth_split: str | None = None
    education: str | None = None

    def __post_init__(self):
        if self.age_bracket is not None:
            lo, hi = self.age_bracket
            if lo > hi:
                raise ValueError(f"age bracket lower bound {lo} exceeds upper bound {hi}")
            object.__setattr__(self, "age_bracket", (lo, hi))
        if self.wealth_split is not None and self.wealth_split not in WEALTH_SPLITS:
            raise ValueError(f"wealth_split must be one of {WEALTH_SPLITS}")
        if self.education is not None and self.education not in EDUCATION_GROUPS:
            raise ValueError(f"education must be one of {EDUCATION_GROUPS}")

    @classmethod
    def from_dict(cls, data: Mapping | None) -> "SubsampleFilter":
        data = dict(data or {})
        unknown = set(data) - {"age_bracket", "wealth_split", "education", "name"}
        if unknown:
            raise ValueError(f"unknown filter fields: {sorted(unknown)}")
        age = data.get("age_bracket")
        if isinstance(age, Mapping):
            age = (age["lo"], age["hi"])
        return cls(tuple(age) if age is not None else None, data.get("wealth_split"), data.get("education"))

    @property
    def is_empty(self) -> bool:
        return self.age_bracket is None and self.wealth_split is None and self.education is None

    def label(self) -> str:
        parts = []
        if self.age_bracket:
            parts.append(f"age{self.age_bracket[0]}-{self.age_bracket[1]}")
        if self.wealth_split:
            parts.append(self.wealth_split)
        if self.education:
            parts.append(self.education)
        return "_".join(parts) or "all"


def _household_stat(df: pd.DataFrame, col: str, how: str) -> pd.Series:
    grouped = df.groupby("household_id", sort=True)[col]
    if how == "mean":
        return grouped.mean()
    return grouped.agg(lambda s: s.dropna().iloc[0] if s.notna().any() else None)


def _require(stat: pd.Series, axis: str) -> None:
    absent = stat.index[stat.isna()].tolist()
    if absent:
        shown = ", ".join(absent[:20]) + (" ..." if len(absent) > 20 else "")
        raise PanelError(f"{axis} filter: field missing for {len(absent)} households: {shown}")


def apply_filter(panel: Panel, f: SubsampleFilter) -> Panel:
    """Keep whole households satisfying every set axis of ``f``.

    Wealth uses each household's time-averaged wealth against the median
    across households; households at the median go to the high group. Age
    uses the household's mean male age. Education uses the first recorded
    group.
    """
    if f.is_empty:
        return panel
    df = panel.frame
    keep = pd.Series(True, index=pd.Index(sorted(df["household_id"].unique()), name="household_id"))
    if f.wealth_split is not None:
        w = _household_stat(df, "wealth", "mean")
        _require(w, "wealth")
        med = float(np.median(w.to_numpy()))
        above = w >= med
        keep &= above if f.wealth_split == "above_median" else ~above
    if f.age_bracket is not None:
        age = _household_stat(df, "male_age", "mean")
        _require(age, "age")
        lo, hi = f.age_bracket
        keep &= (age >= lo) & (age <= hi)
    if f.education is not None:
        edu = _household_stat(df, "education_group", "first")
        _require(edu, "education")
        keep &= edu == f.education
    return panel.select_households(keep.index[keep.to_numpy()])
