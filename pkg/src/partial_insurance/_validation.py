"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numbers

import numpy as np

from .moments import SPECIFICATIONS, MomentVector


def check_specification(name: str, family: str | None = None) -> str:
    if name not in SPECIFICATIONS:
        raise ValueError(f"unknown specification {name!r}; expected one of {SPECIFICATIONS}")
    if family == "income" and not name.startswith("income"):
        raise ValueError(f"{name!r} is not an income specification")
    if family == "consumption" and not name.startswith("cons"):
        raise ValueError(f"{name!r} is not a consumption specification")
    return name


def check_residual_panel(rp, need_consumption: bool = False):
    for attr in ("household_ids", "waves", "dy", "dc"):
        if not hasattr(rp, attr):
            raise TypeError(f"expected a ResidualPanel, got {type(rp).__name__}")
    if rp.dy is None:
        raise ValueError("residual panel has no income growth")
    if need_consumption and rp.dc is None:
        raise ValueError("residual panel has no consumption growth")
    return rp


def check_moment_vector(m) -> MomentVector:
    if not isinstance(m, MomentVector):
        raise TypeError(f"expected a MomentVector, got {type(m).__name__}")
    bad = [str(e.key) for e in m if not np.isfinite(e.value)]
    if bad:
        raise ValueError(f"non-finite moments: {bad}")
    return m


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_positive(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, numbers.Real) or not value > 0:
        raise ValueError(f"{name} must be a positive number, got {value!r}")
    return float(value)


def check_share(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, numbers.Real) or not 0 <= value <= 1:
        raise ValueError(f"{name} must lie in [0, 1], got {value!r}")
    return float(value)
