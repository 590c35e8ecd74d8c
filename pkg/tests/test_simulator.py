import numpy as np
import pandas as pd
import pytest
from conftest import linear_truth, sim_config
from hypothesis import given, settings
from hypothesis import strategies as st
from strategies import shock_triples

from partial_insurance.consumption_model import LinearConsumptionParams
from partial_insurance.income_model import predict_income_moments
from partial_insurance.moments import empirical_moments, target_set
from partial_insurance.residualize import raw_growth_panel
from partial_insurance.simulator import (
    MixtureError,
    ShockSpec,
    SimConfig,
    oracle_moments,
    simulate_blocks,
    simulate_panel,
    solve_mixture,
)


def mc_check(x, target, order, z=3.0):
    """Sample central moment of ``x`` against ``target`` within ``z`` MC s.e."""
    d = x - x.mean()
    m = np.mean(d**order)
    se = np.std(d**order) / np.sqrt(len(x))
    assert abs(m - target) < z * se, (order, m, target, se)


class TestMixture:
    def test_gaussian_degenerate(self):
        mix = solve_mixture(ShockSpec(1.0, 0.0, 3.0))
        assert mix.mu1 == mix.mu2 == 0.0
        assert mix.sigma1 == pytest.approx(1.0) and mix.sigma2_c == pytest.approx(1.0)

    def test_baseline_shock_sampled(self):
        s = ShockSpec(0.030, -0.004, 0.039)
        x = solve_mixture(s).sample(np.random.default_rng(0), 10**7)
        assert abs(x.mean()) < 3 * x.std() / np.sqrt(len(x))
        mc_check(x, s.sigma2, 2)
        mc_check(x, s.gamma, 3)
        mc_check(x, s.kappa, 4)

    def test_platykurtic_symmetric_unreachable(self):
        with pytest.raises(MixtureError):
            solve_mixture(ShockSpec(1.0, 0.0, 2.0))

    def test_infeasible_spec(self):
        with pytest.raises(ValueError):
            ShockSpec(1.0, 1.0, 1.5)

    @given(shock_triples())
    @settings(max_examples=60)
    def test_moments_matched(self, t):
        s2, g, k = t
        if abs(g) < 1e-12 * s2**1.5 and k < 3 * s2**2:
            with pytest.raises(MixtureError):
                solve_mixture(ShockSpec(s2, g, k))
            return
        mix = solve_mixture(ShockSpec(s2, g, k))
        mean, v2, v3, v4 = mix.central_moments()
        assert abs(mean) < 1e-12
        assert v2 == pytest.approx(s2, rel=1e-8)
        assert v3 == pytest.approx(g, rel=1e-8, abs=1e-8 * s2**1.5)
        assert v4 == pytest.approx(k, rel=1e-8)


class TestSimulate:
    def test_seed_determinism(self):
        cfg = sim_config(1500, seed=11, attrition=0.1)
        a, _ = simulate_panel(cfg)
        b, _ = simulate_panel(cfg)
        pd.testing.assert_frame_equal(a.frame, b.frame)
        c, _ = simulate_panel(sim_config(1500, seed=12, attrition=0.1))
        assert not a.frame["log_income"].equals(c.frame["log_income"])

    def test_block_split_matches_whole(self):
        cfg = sim_config(2500, seed=3)
        ids, y, c, _, _ = simulate_blocks(cfg)
        ids2, y2, _, _, _ = simulate_blocks(cfg, 1, 3)
        np.testing.assert_array_equal(ids[1024:], ids2)
        # levels of later blocks do not depend on earlier blocks
        np.testing.assert_array_equal(y[1024:], y2)

    def test_zero_variance_constant(self):
        zero = ShockSpec(0.0, 0.0, 0.0)
        cfg = SimConfig(20, (2001, 2003, 2005), zero, zero,
                        consumption=LinearConsumptionParams(0.3, 0.1, sigma2_xi=0.0, sigma2_uc=0.0))
        panel, _ = simulate_panel(cfg)
        assert np.all(panel.column("log_income") == 0.0)
        assert np.all(panel.column("log_consumption") == 0.0)

    def test_no_insurance_identity(self):
        cfg = sim_config(300, LinearConsumptionParams(1.0, 1.0, sigma2_xi=0.0, sigma2_uc=0.0), seed=5)
        panel, arc = simulate_panel(cfg)
        dc = raw_growth_panel(panel).dc
        for j in range(1, len(arc.waves)):
            t = arc.waves[j] - arc.years[0]
            expect = arc.zeta[:, t] + arc.zeta[:, t - 1] + arc.v[:, t]
            np.testing.assert_allclose(dc[:, j], expect, atol=1e-12)

    @pytest.mark.parametrize("model", ["linear", "quadratic"])
    def test_oracle_matches_moments_module(self, model):
        cons = linear_truth() if model == "linear" else None
        spec = "cons_linear_4th" if model == "linear" else "cons_quadratic"
        panel, arc = simulate_panel(sim_config(800, cons, seed=9, attrition=0.05))
        a = oracle_moments(arc, spec)
        b = empirical_moments(raw_growth_panel(panel), target_set(spec))
        np.testing.assert_allclose(a.values(), b.values(), rtol=1e-12, atol=1e-12)

    def test_martingale_increments(self):
        _, arc = simulate_panel(sim_config(20000, seed=1))
        inc = arc.zeta.ravel()
        assert abs(inc.mean()) < 4 * inc.std() / np.sqrt(inc.size)

    def test_attrition_monotone_and_unbiased(self, baseline_income):
        panel, arc = simulate_panel(sim_config(40000, linear_truth(), seed=4, attrition=0.3))
        obs = arc.observed
        assert np.all(obs[:, 0])
        assert not np.any(obs[:, 1:] & ~obs[:, :-1])
        m = empirical_moments(raw_growth_panel(panel), target_set("income_2nd"))
        pred = predict_income_moments(baseline_income, "income_2nd")
        for e in m:
            assert abs(e.value - pred[e.key]) < 4 * e.se, e.key

    def test_archive_third_moment_and_error_autocovariance(self, baseline_income):
        cfg = sim_config(60000, linear_truth(), seed=21)
        _, arc = simulate_panel(cfg)
        m = oracle_moments(arc, ["y^3", "c*c[+2]"])
        for key, target in (("y^3", 2 * baseline_income.gamma_zeta), ("c*c[+2]", -0.044)):
            e = m.entry(key)
            assert abs(e.value - target) < 4 * e.se, (key, e.value, target, e.se)

    def test_demographics(self):
        panel, _ = simulate_panel(sim_config(50, seed=2, demographics=True))
        assert {"male_age", "education_group", "wealth"} <= set(panel.frame.columns)
        ages = panel.frame.groupby("household_id")["male_age"].apply(lambda a: np.diff(a.to_numpy()))
        assert all(np.all(d == 2) for d in ages)

    def test_archive_frame(self):
        _, arc = simulate_panel(sim_config(3, seed=0))
        df = arc.to_frame()
        assert set(df["component"]) == {"zeta", "v", "xi", "uy", "uc", "permanent0"}
        assert not df.duplicated(["household_id", "year", "component"]).any()

    @given(st.integers(1, 4), st.integers(2, 6))
    @settings(max_examples=10)
    def test_shapes(self, n, T):
        cfg = sim_config(n, waves=tuple(range(2001, 2001 + 2 * T, 2)))
        panel, arc = simulate_panel(cfg)
        assert len(panel) == n * T
        assert arc.zeta.shape == (n, len(cfg.years))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            sim_config(0)
        with pytest.raises(ValueError):
            sim_config(10, waves=(2001, 2002))
        with pytest.raises(ValueError):
            sim_config(10, attrition=1.0)
