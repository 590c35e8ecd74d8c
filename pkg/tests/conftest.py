import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from partial_insurance.consumption_model import LinearConsumptionParams, QuadraticConsumptionParams  # noqa: E402
from partial_insurance.income_model import IncomeParams  # noqa: E402
from partial_insurance.panel import Panel  # noqa: E402
from partial_insurance.simulator import ShockSpec, SimConfig  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

WAVES = tuple(range(1999, 2021, 2))

# income process, 2nd-4th moments targeted
BASELINE_INCOME = dict(sigma2_zeta=0.030, gamma_zeta=-0.004, kappa_zeta=0.039,
                   sigma2_v=0.031, gamma_v=-0.008, kappa_v=0.048)
# quadratic consumption function
BASELINE_QUADRATIC = dict(phi1=0.134, psi1=-0.003, phi2=-0.040, psi2=0.015, omega22=0.320,
                   sigma2_xi=0.019, sigma2_uc=0.044)
SIGMA2_UY = 0.004


@pytest.fixture
def baseline_income():
    return IncomeParams(**BASELINE_INCOME, sigma2_uy=SIGMA2_UY)


@pytest.fixture
def baseline_quadratic():
    return QuadraticConsumptionParams(**BASELINE_QUADRATIC)


def sim_config(n=2000, consumption=None, seed=0, **kw):
    z = BASELINE_INCOME
    return SimConfig(
        n_households=n, waves=kw.pop("waves", WAVES),
        zeta_spec=ShockSpec(z["sigma2_zeta"], z["gamma_zeta"], z["kappa_zeta"]),
        v_spec=ShockSpec(z["sigma2_v"], z["gamma_v"], z["kappa_v"]),
        uy_variance=kw.pop("uy_variance", SIGMA2_UY),
        consumption=consumption or QuadraticConsumptionParams(**BASELINE_QUADRATIC),
        seed=seed, **kw,
    )


def linear_truth(phi1=0.15, psi1=0.0):
    return LinearConsumptionParams(phi1, psi1, sigma2_xi=0.019, sigma2_uc=0.044)


def small_panel(n=6, waves=(2001, 2003, 2005, 2007), seed=0, **cols):
    rng = np.random.default_rng(seed)
    ids = np.repeat([f"h{i}" for i in range(n)], len(waves))
    w = np.tile(waves, n)
    return Panel.from_arrays(ids, w, rng.normal(10, 0.5, len(ids)), rng.normal(9.5, 0.3, len(ids)), **cols)
