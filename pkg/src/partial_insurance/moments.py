"""Cross-sectional moments of biennial income and consumption growth.

A moment is identified by a :class:`MomentKey`, a product of terms such as
``y^2*c[-2]`` meaning E((dy_t)^2 * dc_{t-2}). Leads are in calendar years
and must be multiples of two (the panel is observed every other year).
Moments pool every (household, wave) cell where all terms of the key are
observed, i.e. pairwise deletion under stationarity.
"""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from ._io import atomic_write_text

SERIES = ("y", "c")
LEADS = (-2, 0, 2)
DEFAULT_MIN_CELLS = 30

_TERM_RE = re.compile(r"^([yc])(?:\[([+-]?\d+)\])?(?:\^(\d))?$")


class MomentKeyError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Term:
    series: str
    lead: int
    power: int

    def __str__(self) -> str:
        text = self.series
        if self.lead:
            text += f"[{self.lead:+d}]"
        if self.power != 1:
            text += f"^{self.power}"
        return text


_LEAD_RANK = {0: 0, -2: 1, 2: 2}


def _term_order(term: Term) -> tuple:
    return (SERIES.index(term.series), _LEAD_RANK.get(term.lead, 3), term.lead)


@dataclass(frozen=True)
class MomentKey:
    """Product of growth terms; hashable and ordered canonically."""

    terms: tuple[Term, ...]

    def __post_init__(self):
        terms = tuple(sorted(self.terms, key=_term_order))
        seen = set()
        for t in terms:
            if t.series not in SERIES:
                raise MomentKeyError(f"unknown series {t.series!r}")
            if t.lead not in LEADS:
                raise MomentKeyError(f"lead must be one of {LEADS}, got {t.lead}")
            if not 1 <= t.power <= 4:
                raise MomentKeyError(f"power must be in 1..4, got {t.power}")
            if (t.series, t.lead) in seen:
                raise MomentKeyError(f"duplicate term {t.series}[{t.lead}]")
            seen.add((t.series, t.lead))
        if not terms:
            raise MomentKeyError("empty moment key")
        if len(terms) > 3:
            raise MomentKeyError("at most 3 distinct terms")
        if sum(t.power for t in terms) > 4:
            raise MomentKeyError("total power must be <= 4")
        object.__setattr__(self, "terms", terms)

    @classmethod
    def parse(cls, text: str) -> "MomentKey":
        text = text.strip()
        if text.startswith("E(") and text.endswith(")"):
            text = text[2:-1]
        terms = []
        for piece in text.replace(" ", "").split("*"):
            match = _TERM_RE.match(piece)
            if match is None:
                raise MomentKeyError(f"cannot parse term {piece!r} in {text!r}")
            series, lead, power = match.groups()
            terms.append(Term(series, int(lead or 0), int(power or 1)))
        return cls(tuple(terms))

    @property
    def order(self) -> int:
        return sum(t.power for t in self.terms)

    def shifted(self, years: int) -> "MomentKey":
        return MomentKey(tuple(Term(t.series, t.lead + years, t.power) for t in self.terms))

    def canonical(self) -> "MomentKey":
        """Stationary representative: the shift with the smallest lead span anchored at 0.

        E(y^2*c[+2]) and E(y[-2]^2*c) describe the same population moment.
        Among the admissible shifts, the one closest to the written form
        anchored at lead 0 with the lowest leads wins.
        """
        leads = [t.lead for t in self.terms]
        candidates = []
        for shift in range(-4, 5, 2):
            new = [lead + shift for lead in leads]
            if all(lead in LEADS for lead in new) and 0 in new:
                candidates.append(shift)
        if not candidates:
            return self
        # prefer keys whose lowest lead is as low as possible
        best = min(candidates, key=lambda s: (min(leads) + s, abs(s)))
        return self.shifted(best) if best else self

    def equivalent(self, other: "MomentKey") -> bool:
        return self.canonical() == other.canonical()

    def __str__(self) -> str:
        return "*".join(str(t) for t in self.terms)

    def __repr__(self) -> str:
        return f"MomentKey('{self}')"

    def __lt__(self, other: "MomentKey") -> bool:
        return _sort_key(self) < _sort_key(other)


def _sort_key(key: MomentKey) -> tuple:
    return (key.order, tuple(_term_order(t) + (t.power,) for t in key.terms))


def K(text: str) -> MomentKey:
    """Shorthand for :meth:`MomentKey.parse`."""
    return MomentKey.parse(text)


# Target lists: income (2nd / 2nd+3rd / 2nd-4th) and joint consumption-income.
_INCOME = {
    2: ["y^2", "y*y[-2]"],
    3: ["y^3", "y^2*y[-2]", "y*y[-2]^2"],
    4: ["y^4", "y^2*y[-2]^2", "y^3*y[-2]", "y*y[-2]^3"],
}
_CONS_LINEAR = {
    2: ["c^2", "c*c[-2]", "y*c", "y*c[-2]"],
    3: [
        "c^3", "c^2*c[-2]", "c*c[-2]^2", "y^2*c", "y*c^2", "y^2*c[-2]",
        "y*c[-2]^2", "y[-2]^2*c", "y*y[+2]*c", "y*y[+2]*c[-2]", "y*y[+2]*c[+2]",
    ],
    4: [
        "c^4", "c^2*c[-2]^2", "c^3*c[-2]", "c*c[-2]^3", "y^2*c^2", "y^3*c",
        "y*c^3", "y^2*c[-2]^2", "y[-2]^2*c^2", "y^3*c[-2]", "y*c[-2]^3",
    ],
}
_CONS_QUADRATIC = [
    "c^2", "c*c[-2]", "y*c", "y*c[-2]", "y^2*c", "y^2*c[-2]", "y[-2]^2*c",
    "y*y[+2]*c", "y*y[+2]*c[-2]", "y*y[+2]*c[+2]",
]

SPECIFICATIONS = (
    "income_2nd", "income_3rd", "income_4th",
    "cons_linear_2nd", "cons_linear_3rd", "cons_linear_4th",
    "cons_quadratic",
)


def target_set(model: str) -> list[MomentKey]:
    """Moments targeted by one of the seven model specifications."""
    if model not in SPECIFICATIONS:
        raise ValueError(f"unknown specification {model!r}; expected one of {SPECIFICATIONS}")
    if model == "cons_quadratic":
        return [K(s) for s in _CONS_QUADRATIC]
    order = {"2nd": 2, "3rd": 3, "4th": 4}[model.rsplit("_", 1)[1]]
    table = _INCOME if model.startswith("income") else _CONS_LINEAR
    return [K(s) for o in range(2, order + 1) for s in table[o]]


def income_spec_for(specification: str) -> str:
    """Income specification paired with a consumption specification."""
    if specification.startswith("income"):
        return specification
    if specification == "cons_quadratic":
        return "income_4th"
    return "income_" + specification.rsplit("_", 1)[1]


def standardize(central: float, variance: float, order: int) -> float:
    """Standardized skewness (order 3) or kurtosis (order 4)."""
    if variance <= 0:
        raise ValueError(f"variance must be positive, got {variance}")
    if order == 3:
        return central / variance**1.5
    if order == 4:
        return central / variance**2
    raise ValueError(f"order must be 3 or 4, got {order}")


@dataclass
class MomentEntry:
    key: MomentKey
    value: float
    n_cells: int
    se: float = float("nan")


@dataclass
class MomentVector:
    """Ordered collection of moments, with cell counts and optional s.e."""

    entries: list[MomentEntry] = field(default_factory=list)

    def __post_init__(self):
        keys = [e.key for e in self.entries]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate moment keys")

    @classmethod
    def from_values(cls, values: dict, n_cells: int = 0) -> "MomentVector":
        entries = []
        for key, value in values.items():
            key = key if isinstance(key, MomentKey) else K(key)
            entries.append(MomentEntry(key, float(value), n_cells))
        return cls(entries)

    def __iter__(self) -> Iterator[MomentEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def keys(self) -> list[MomentKey]:
        return [e.key for e in self.entries]

    def _find(self, key) -> MomentEntry:
        key = key if isinstance(key, MomentKey) else K(key)
        for e in self.entries:
            if e.key == key:
                return e
        canon = key.canonical()
        for e in self.entries:
            if e.key.canonical() == canon:
                return e
        raise KeyError(str(key))

    def __getitem__(self, key) -> float:
        return self._find(key).value

    def __contains__(self, key) -> bool:
        try:
            self._find(key)
        except KeyError:
            return False
        return True

    def get(self, key, default=None):
        try:
            return self[key]
        except KeyError:
            return default

    def entry(self, key) -> MomentEntry:
        return self._find(key)

    def subset(self, keys: Iterable) -> "MomentVector":
        return MomentVector([self._find(k) for k in keys])

    def values(self, keys: Sequence | None = None) -> np.ndarray:
        if keys is None:
            return np.array([e.value for e in self.entries])
        return np.array([self[k] for k in keys])

    def sorted(self) -> "MomentVector":
        return MomentVector(sorted(self.entries, key=lambda e: _sort_key(e.key)))

    def retained(self, min_cells: int = DEFAULT_MIN_CELLS) -> tuple["MomentVector", list[MomentKey]]:
        """Split into entries meeting the cell floor and the dropped keys."""
        keep = [e for e in self.entries if e.n_cells >= min_cells]
        dropped = [e.key for e in self.entries if e.n_cells < min_cells]
        return MomentVector(keep), dropped

    def to_csv(self, path) -> None:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["key", "value", "n_cells", "se"])
        for e in self.entries:
            writer.writerow([str(e.key), repr(e.value), e.n_cells, repr(e.se)])
        atomic_write_text(path, buf.getvalue())

    @classmethod
    def from_csv(cls, path) -> "MomentVector":
        entries = []
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                se = row.get("se")
                entries.append(
                    MomentEntry(
                        K(row["key"]),
                        float(row["value"]),
                        int(row["n_cells"]),
                        float(se) if se not in (None, "") else float("nan"),
                    )
                )
        return cls(entries)


def _shifted(arr: np.ndarray, k: int) -> np.ndarray:
    """Column-shifted view: out[:, j] = arr[:, j + k], NaN outside range."""
    if k == 0:
        return arr
    out = np.full_like(arr, np.nan)
    if k > 0:
        out[:, :-k] = arr[:, k:]
    else:
        out[:, -k:] = arr[:, :k]
    return out


def household_contributions(dy: np.ndarray, dc: np.ndarray | None, key: MomentKey):
    """Per-household sums of the key's product and counts of valid cells."""
    prod = None
    for term in key.terms:
        src = dy if term.series == "y" else dc
        if src is None:
            raise MomentKeyError(f"{key} needs consumption growth, none available")
        if term.lead % 2:
            raise MomentKeyError("leads must be multiples of 2 years")
        piece = _shifted(src, term.lead // 2) ** term.power
        prod = piece if prod is None else prod * piece
    valid = ~np.isnan(prod)
    sums = np.where(valid, prod, 0.0).sum(axis=1)
    counts = valid.sum(axis=1)
    return sums, counts


def moment_from_arrays(dy, dc, key: MomentKey) -> MomentEntry:
    """Pooled moment with a household-clustered standard error."""
    sums, counts = household_contributions(dy, dc, key)
    n = int(counts.sum())
    if n == 0:
        return MomentEntry(key, float("nan"), 0)
    value = float(sums.sum() / n)
    resid = sums - value * counts
    se = float(np.sqrt(np.sum(resid**2)) / n)
    return MomentEntry(key, value, n, se)


def empirical_moment(rp, key) -> tuple[float, int]:
    """Value and cell count of one moment on a residual panel."""
    key = key if isinstance(key, MomentKey) else K(key)
    e = moment_from_arrays(rp.dy, rp.dc, key)
    return e.value, e.n_cells


def empirical_moments(rp, keys: Iterable) -> MomentVector:
    keys = [k if isinstance(k, MomentKey) else K(k) for k in keys]
    return MomentVector([moment_from_arrays(rp.dy, rp.dc, k) for k in keys])


class MomentAccumulator:
    """Streams per-household sufficient statistics over chunks of households.

    Used when a panel is too large to hold at once; the result equals
    :func:`moment_from_arrays` on the concatenated arrays.
    """

    def __init__(self, keys: Iterable):
        self.keys = [k if isinstance(k, MomentKey) else K(k) for k in keys]
        size = len(self.keys)
        self.s = np.zeros(size)
        self.n = np.zeros(size)
        self.ss = np.zeros(size)
        self.sn = np.zeros(size)
        self.nn = np.zeros(size)

    def add(self, dy, dc=None) -> None:
        for j, key in enumerate(self.keys):
            sums, counts = household_contributions(dy, dc, key)
            self.s[j] += sums.sum()
            self.n[j] += counts.sum()
            self.ss[j] += np.dot(sums, sums)
            self.sn[j] += np.dot(sums, counts)
            self.nn[j] += np.dot(counts.astype(float), counts)

    def result(self) -> MomentVector:
        entries = []
        for j, key in enumerate(self.keys):
            n = self.n[j]
            value = self.s[j] / n
            var_sum = self.ss[j] - 2 * value * self.sn[j] + value**2 * self.nn[j]
            se = np.sqrt(max(var_sum, 0.0)) / n
            entries.append(MomentEntry(key, float(value), int(n), float(se)))
        return MomentVector(entries)


def per_wave_moments(rp, key) -> dict[int, tuple[float, int]]:
    """Diagnostic: the moment computed separately for each base wave."""
    key = key if isinstance(key, MomentKey) else K(key)
    prod = None
    for term in key.terms:
        src = rp.dy if term.series == "y" else rp.dc
        piece = _shifted(src, term.lead // 2) ** term.power
        prod = piece if prod is None else prod * piece
    out = {}
    for j, wave in enumerate(rp.waves):
        col = prod[:, j]
        ok = ~np.isnan(col)
        if ok.any():
            out[int(wave)] = (float(col[ok].mean()), int(ok.sum()))
    return out


def raw_growth_summary(rp) -> dict[str, float]:
    """Variance, autocovariance and standardized skewness/kurtosis of dy, dc."""
    out = {}
    for name, arr in (("y", rp.dy), ("c", rp.dc)):
        if arr is None:
            continue
        x = arr[~np.isnan(arr)]
        if x.size < 2:
            continue
        var = float(np.mean(x**2))
        out[f"var_{name}"] = var
        out[f"autocov_{name}"] = moment_from_arrays(
            rp.dy, rp.dc, K(f"{name}*{name}[-2]")
        ).value
        out[f"skew_{name}"] = standardize(float(np.mean(x**3)), var, 3)
        out[f"kurt_{name}"] = standardize(float(np.mean(x**4)), var, 4)
    return out
