"""Hypothesis strategies for feasible parameter draws."""

from hypothesis import strategies as st

from partial_insurance.consumption_model import LinearConsumptionParams, QuadraticConsumptionParams
from partial_insurance.income_model import IncomeParams

variances = st.floats(0.005, 0.1)
skews = st.floats(-3.0, 0.0)


@st.composite
def shock_triples(draw):
    s2 = draw(variances)
    g = draw(skews)
    k = draw(st.floats(g * g + 1.5, 60.0))
    return s2, g * s2**1.5, k * s2**2


@st.composite
def income_params(draw, sigma2_uy=None):
    sz, gz, kz = draw(shock_triples())
    sv, gv, kv = draw(shock_triples())
    su = draw(st.floats(0.0, 0.02)) if sigma2_uy is None else sigma2_uy
    return IncomeParams(sz, gz, kz, sv, gv, kv, su)


@st.composite
def linear_params(draw):
    sx, gx, kx = draw(shock_triples())
    sc, gc, kc = draw(shock_triples())
    return LinearConsumptionParams(draw(st.floats(0.0, 1.0)), draw(st.floats(-0.5, 1.0)), sx, gx, kx, sc, gc, kc)


@st.composite
def quadratic_params(draw):
    return QuadraticConsumptionParams(
        draw(st.floats(0.0, 1.0)), draw(st.floats(-0.5, 1.0)), draw(st.floats(-0.2, 0.2)),
        draw(st.floats(-0.2, 0.2)), draw(st.floats(-1.0, 1.0)), draw(variances), draw(variances),
    )
