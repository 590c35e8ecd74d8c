import numpy as np
import pytest
from conftest import linear_truth, sim_config
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from partial_insurance.consumption_model import predict_linear_moments, predict_quadratic_moments
from partial_insurance.estimator import (
    IQR_NORMAL,
    BootstrapConfig,
    BootstrapError,
    ConsumptionEstimator,
    ConvergenceError,
    EstimateReport,
    GmmConfig,
    IncomeProcessEstimator,
    PipelineSpec,
    Residualizer,
    bootstrap,
    estimate_consumption,
    estimate_income,
    iqr_difference,
    make_pipeline,
    normal_iqr_se,
    run_pipeline,
    std_dev_se,
)
from partial_insurance.income_model import IdentificationError, identify_income, predict_income_moments
from partial_insurance.moments import empirical_moments, target_set
from partial_insurance.residualize import residualize_panel
from partial_insurance.simulator import simulate_panel


@pytest.fixture(scope="module")
def quad_panel():
    return simulate_panel(sim_config(20000, seed=0))[0]


@pytest.fixture(scope="module")
def linear_panel():
    return simulate_panel(sim_config(20000, linear_truth(), seed=1))[0]


@pytest.fixture(scope="module")
def small_linear_panel():
    return simulate_panel(sim_config(600, linear_truth(), seed=2))[0]


class TestConfig:
    def test_gmm_validation(self):
        with pytest.raises(ValueError):
            GmmConfig(weighting="optimal")
        with pytest.raises(ValueError):
            GmmConfig(tol=0.0)
        with pytest.raises(ValueError):
            GmmConfig(max_iter=0)
        with pytest.raises(ValueError):
            GmmConfig(specification="income_3rd_and_a_half")

    def test_bootstrap_validation(self):
        assert BootstrapConfig().replications == 500
        with pytest.raises(ValueError):
            BootstrapConfig(replications=49)
        assert BootstrapConfig(replications=10, se_method="std_dev").replications == 10


class TestIncome:
    def test_exact_second_order_is_closed_form(self, quad_panel):
        rp = residualize_panel(quad_panel)
        rep = estimate_income(rp, "income_2nd", cal=0.004)
        closed = identify_income(empirical_moments(rp, target_set("income_2nd")), 0.004)
        for k, v in closed.to_dict().items():
            assert rep.params[k] == pytest.approx(v, abs=1e-10)
        assert rep.objective <= 1e-20

    def test_population_moments_zero_objective(self, baseline_income):
        m = predict_income_moments(baseline_income)
        rep = estimate_income(m, "income_4th", cal=baseline_income.sigma2_uy)
        assert rep.objective <= 1e-20
        for k, v in baseline_income.to_dict().items():
            assert rep.params[k] == pytest.approx(v, abs=1e-10)

    def test_recovery_and_kurtosis(self, quad_panel):
        rep = estimate_income(residualize_panel(quad_panel), "income_4th", cal=0.004)
        assert abs(rep.params["sigma2_zeta"] - 0.030) <= 0.003
        assert 10 <= rep.diagnostics["standardized"]["kurt_zeta"] < 100
        assert rep.objective <= rep.diagnostics["start_objective"]
        assert [row["key"] for row in rep.moment_fit] == [str(k) for k in target_set("income_4th")]

    def test_tstat_weighting_runs(self, quad_panel):
        rp = residualize_panel(quad_panel)
        rep = estimate_income(rp, cfg=GmmConfig(weighting="diagonal_tstat"), cal=0.004)
        assert abs(rep.params["sigma2_zeta"] - 0.030) <= 0.003

    def test_non_convergence(self, quad_panel):
        rp = residualize_panel(quad_panel)
        with pytest.raises(ConvergenceError):
            estimate_income(rp, "income_4th", GmmConfig(max_iter=1), cal=0.004)

    def test_infeasible_start_projected(self, baseline_income):
        vals = {str(e.key): e.value for e in predict_income_moments(baseline_income)}
        vals["y^2*y[-2]^2"] -= 0.05
        from partial_insurance.moments import MomentVector

        rep = estimate_income(MomentVector.from_values(vals, n_cells=10**5), "income_4th", cal=0.004)
        assert rep.diagnostics["projected_start"]
        p = rep.income_params()
        assert p.feasible

    def test_floor_drops_required_moment(self, small_linear_panel, caplog):
        rp = residualize_panel(small_linear_panel)
        # 600 households give 6000 variance cells but only 5400 lag cells
        with pytest.raises(IdentificationError, match=r"y\*y\[-2\]"):
            estimate_income(rp, "income_2nd", GmmConfig(specification="income_2nd", min_cells=5500), cal=0.004)
        assert "y*y[-2]" in caplog.text


class TestConsumption:
    def test_linear_recovery(self, linear_panel):
        res = run_pipeline(linear_panel, PipelineSpec("cons_linear_2nd", sigma2_uy=0.004))
        assert abs(res.consumption.params["phi1"] - 0.15) <= 0.03
        assert abs(res.consumption.params["psi1"]) <= 0.03

    def test_quadratic_recovery(self, quad_panel):
        res = run_pipeline(quad_panel, PipelineSpec("cons_quadratic", sigma2_uy=0.004))
        phi2 = res.consumption.params["phi2"]
        assert phi2 < 0 and abs(phi2 + 0.040) <= 0.026
        assert res.consumption.diagnostics["A_condition_number"] < 1e8

    @pytest.mark.parametrize("centered", [True, False])
    def test_quadratic_population_moments_exact(self, baseline_income, baseline_quadratic, centered):
        m = predict_quadratic_moments(baseline_quadratic, baseline_income, centered=centered)
        rep = estimate_consumption(m, baseline_income, "cons_quadratic", centered=centered)
        assert rep.objective <= 1e-20
        for k, v in baseline_quadratic.to_dict().items():
            assert rep.params[k] == pytest.approx(v, abs=1e-8)

    def test_linear_population_moments_exact(self, baseline_income):
        lc = linear_truth()
        m = predict_linear_moments(lc, baseline_income, "cons_linear_4th")
        rep = estimate_consumption(m, baseline_income, "cons_linear_4th")
        assert rep.objective <= 1e-20
        for k, v in lc.to_dict().items():
            assert rep.params[k] == pytest.approx(v, abs=1e-8)

    def test_objective_not_above_start(self, quad_panel):
        res = run_pipeline(quad_panel, PipelineSpec("cons_quadratic", sigma2_uy=0.004))
        d = res.consumption.diagnostics
        assert res.consumption.objective <= d["start_objective"]

    def test_missing_consumption(self, quad_panel, baseline_income):
        rp = residualize_panel(quad_panel)
        rp.dc = None
        with pytest.raises(ValueError):
            estimate_consumption(rp, baseline_income, "cons_linear_2nd")


class TestPipeline:
    def test_determinism(self, small_linear_panel):
        ps = PipelineSpec("cons_linear_4th", sigma2_uy=0.004)
        a = run_pipeline(small_linear_panel, ps)
        b = run_pipeline(small_linear_panel, ps)
        assert a.income.to_json() == b.income.to_json()
        assert a.consumption.to_json() == b.consumption.to_json()

    def test_calibrated_uy(self, small_linear_panel):
        res = run_pipeline(small_linear_panel, PipelineSpec("income_2nd", me_share=0.04))
        assert res.consumption is None and res.sigma2_uy > 0

    def test_report_round_trip(self, small_linear_panel):
        rep = run_pipeline(small_linear_panel, PipelineSpec("cons_linear_2nd", sigma2_uy=0.004)).consumption
        back = EstimateReport.from_json(rep.to_json())
        assert back.to_json() == rep.to_json()
        assert back.consumption_params() == rep.consumption_params()
        text = rep.to_text()
        assert "phi1" in text and "GMM objective" in text


class TestNormalIqr:
    def test_divisor(self):
        assert IQR_NORMAL == pytest.approx(1.3489795, abs=1e-7)

    def test_identical_replications(self):
        assert normal_iqr_se(np.full(200, 0.137)) == 0.0
        assert std_dev_se(np.full(200, 0.137)) == 0.0

    def test_standard_normal_limit(self):
        x = np.random.default_rng(0).standard_normal(10**6)
        assert normal_iqr_se(x) == pytest.approx(1.0, abs=0.005)

    def test_matches_numpy_quantiles(self):
        x = np.random.default_rng(1).normal(size=501)
        q75, q25 = np.quantile(x, [0.75, 0.25])
        assert iqr_difference(x) == pytest.approx(q75 - q25, rel=1e-12)

    @given(st.lists(st.integers(-2**20, 2**20), min_size=2, max_size=300),
           st.integers(-2**20, 2**20), st.integers(-6, 6))
    def test_exact_invariants_on_dyadic_values(self, ints, shift, log2_scale):
        x = np.array(ints, dtype=float) / 1024
        base = normal_iqr_se(x)
        assert normal_iqr_se(x + shift) == base
        assert normal_iqr_se(x * 2.0**log2_scale) == base * 2.0**log2_scale
        assert normal_iqr_se(-x) == base

    @given(st.integers(0, 2**32 - 1), st.floats(-1e3, 1e3), st.floats(1e-3, 1e3))
    def test_invariants_on_random_values(self, seed, shift, scale):
        x = np.random.default_rng(seed).normal(size=200)
        base = normal_iqr_se(x)
        assert normal_iqr_se(x + shift) == pytest.approx(base, rel=1e-9, abs=1e-9 * abs(shift))
        assert normal_iqr_se(scale * x) == pytest.approx(scale * base, rel=1e-12)


class TestBootstrap:
    def test_pipeline_bootstrap(self, small_linear_panel):
        ps = PipelineSpec("cons_linear_2nd", sigma2_uy=0.004)
        bc = BootstrapConfig(replications=50, seed=7)
        a = bootstrap(small_linear_panel, make_pipeline(ps), bc)
        b = bootstrap(small_linear_panel, make_pipeline(ps), bc, jobs=3)
        assert a.replications == b.replications
        assert a.standard_errors == b.standard_errors
        assert a.n_success + a.n_failed == 50
        assert all(se >= 0 for se in a.standard_errors.values())
        assert 0.0 < a.standard_errors["phi1"] < 0.5
        assert list(a.to_frame()["replication"]) == sorted(a.to_frame()["replication"])

    def test_seed_changes_draws(self, small_linear_panel):
        f = lambda p: {"m": float(p.frame["log_income"].mean())}  # noqa: E731
        a = bootstrap(small_linear_panel, f, BootstrapConfig(replications=50, seed=1))
        b = bootstrap(small_linear_panel, f, BootstrapConfig(replications=50, seed=2))
        assert a.replications != b.replications

    def test_identical_estimates_zero_se(self, small_linear_panel):
        res = bootstrap(small_linear_panel, lambda p: {"x": 1.0}, BootstrapConfig(replications=60))
        assert res.standard_errors == {"x": 0.0}

    @pytest.mark.parametrize("n_fail, aborts", [(10, False), (11, True)])
    def test_failure_threshold(self, small_linear_panel, n_fail, aborts):
        calls = {"n": 0}

        def pipeline(panel):
            calls["n"] += 1
            if calls["n"] <= n_fail:
                raise ValueError("degenerate draw")
            return {"x": float(calls["n"])}

        bc = BootstrapConfig(replications=50)
        if aborts:
            with pytest.raises(BootstrapError) as err:
                bootstrap(small_linear_panel, pipeline, bc)
            assert err.value.failures and "degenerate" in err.value.failures[0]
        else:
            res = bootstrap(small_linear_panel, pipeline, bc)
            assert res.n_failed == n_fail and res.n_success == 40


class TestSklearnWrappers:
    def test_params_and_clone(self):
        est = IncomeProcessEstimator(specification="income_2nd", sigma2_uy=0.004)
        assert est.get_params()["sigma2_uy"] == 0.004
        c = clone(est).set_params(weighting="diagonal_tstat")
        assert c.weighting == "diagonal_tstat" and est.weighting == "identity"

    def test_fit_chain(self, small_linear_panel):
        rp = Residualizer().fit_transform(small_linear_panel)
        inc = IncomeProcessEstimator("income_4th", sigma2_uy=0.004).fit(rp)
        assert inc.score(rp) <= 0.0
        cons = ConsumptionEstimator("cons_linear_2nd", income_params=inc.params_).fit(rp)
        assert set(cons.params_.to_dict()) >= {"phi1", "psi1"}
        assert len(cons.predict()) == len(target_set("cons_linear_2nd"))

    def test_consumption_needs_income(self, small_linear_panel):
        rp = Residualizer().fit_transform(small_linear_panel)
        with pytest.raises(ValueError):
            ConsumptionEstimator().fit(rp)
