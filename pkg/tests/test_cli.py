import json
import subprocess
import sys

import pandas as pd
import pytest

from partial_insurance.cli import EXIT_CONFIG, EXIT_FAILED, EXIT_OK, ConfigError, RunConfig, derive_seed, main
from partial_insurance.estimator import EstimateReport
from partial_insurance.panel import load_panel

SIM = {
    "n_households": 1500,
    "waves": [2001, 2003, 2005, 2007, 2009],
    "zeta": {"sigma2": 0.030, "gamma": -0.004, "kappa": 0.039},
    "v": {"sigma2": 0.031, "gamma": -0.008, "kappa": 0.048},
    "uy_variance": 0.004,
    "consumption": {"model": "linear", "phi1": 0.15, "psi1": 0.0, "sigma2_xi": 0.019, "sigma2_uc": 0.044},
    "demographics": True,
}


def write_config(path, **fields):
    path.write_text(json.dumps(fields), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    cfg = write_config(d / "sim.json", simulation=SIM, seed=3)
    assert main(["simulate", "--config", cfg, "--out", str(d / "out")]) == EXIT_OK
    return d / "out"


class TestSimulate:
    def test_outputs_and_stable_hash(self, simulated, tmp_path):
        manifest = json.loads((simulated / "manifest.json").read_text())
        assert {p.split("/")[-1] for p in manifest["outputs"]} == {"panel.csv", "archive.csv"}
        assert manifest["versions"]["numpy"]
        panel = load_panel(simulated / "panel.csv")
        assert panel.n_households == 1500 and panel.waves == SIM["waves"]
        cfg = write_config(tmp_path / "sim.json", simulation=SIM, seed=3)
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "again")]) == EXIT_OK
        again = json.loads((tmp_path / "again" / "manifest.json").read_text())
        assert again["config_hash"] == manifest["config_hash"]
        assert (tmp_path / "again" / "panel.csv").read_bytes() == (simulated / "panel.csv").read_bytes()

    def test_seed_override(self, simulated, tmp_path):
        cfg = write_config(tmp_path / "sim.json", simulation=SIM, seed=3)
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "s9"), "--seed", "9"]) == EXIT_OK
        a = pd.read_csv(simulated / "panel.csv")["log_income"]
        b = pd.read_csv(tmp_path / "s9" / "panel.csv")["log_income"]
        assert not a.equals(b)


class TestConfigErrors:
    @pytest.mark.parametrize("body, field", [
        ({"specifications": ["cons_cubic"]}, "specifications[0]"),
        ({"gmm": {"weighting": "optimal"}}, "gmm"),
        ({"bootstrap": {"replications": 10}}, "bootstrap"),
        ({"seed": "seven"}, "seed"),
        ({"colour": 1}, "colour"),
        ({"simulation": {"n_households": 0}}, "simulation"),
        ({"simulation": {"zeta": {"sigma2": 0.03, "gamma": 0.5, "kappa": 0.001}}}, "simulation.zeta"),
        ({"trim": 1}, "trim"),
        ({"me_share": 2.0}, "me_share"),
    ])
    def test_field_level(self, body, field):
        with pytest.raises(ConfigError) as err:
            RunConfig.from_dict(body)
        assert err.value.field == field

    def test_exit_code_two(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "bad.json", gmm={"max_iter": -3})
        assert main(["estimate", "--config", cfg]) == EXIT_CONFIG
        assert "gmm" in capsys.readouterr().err
        (tmp_path / "broken.json").write_text("{not json")
        assert main(["estimate", "--config", str(tmp_path / "broken.json")]) == EXIT_CONFIG
        assert main(["estimate", "--config", str(tmp_path / "absent.json")]) == EXIT_CONFIG
        cfg = write_config(tmp_path / "noinput.json")
        assert main(["estimate", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_module_entry_point(self, tmp_path):
        cfg = write_config(tmp_path / "bad.json", unknown=True)
        proc = subprocess.run([sys.executable, "-m", "partial_insurance", "moments", "--config", cfg],
                              capture_output=True, text=True)
        assert proc.returncode == EXIT_CONFIG and "unknown" in proc.stderr


class TestHash:
    def test_semantic_fields_only(self):
        base = RunConfig.from_dict({"input": "p.csv", "out": "a"})
        assert base.hash() == RunConfig.from_dict({"input": "p.csv", "out": "b"}).hash()
        assert base.hash() == RunConfig.from_dict({"input": "p.csv", "trim": True}).hash()
        for change in ({"trim": False}, {"seed": 1}, {"me_share": 0.05}, {"gmm": {"tol": 1e-8}},
                       {"specifications": ["cons_linear_2nd"]}, {"subsamples": [{"education": "no_college"}]}):
            assert RunConfig.from_dict({"input": "p.csv", **change}).hash() != base.hash(), change

    def test_seed_derivation(self):
        assert derive_seed(0, "bootstrap", 1) == derive_seed(0, "bootstrap", 1)
        assert len({derive_seed(0, "bootstrap", i) for i in range(50)}) == 50
        assert derive_seed(0, "bootstrap") != derive_seed(0, "simulate")


class TestPipelineCommands:
    def test_clean_residualize_moments(self, simulated, tmp_path):
        common = {"input": str(simulated / "panel.csv"), "trim": False,
                  "specifications": ["income_4th", "cons_linear_2nd"]}
        cfg = write_config(tmp_path / "c.json", **common)
        for cmd in ("clean", "residualize", "moments"):
            assert main([cmd, "--config", cfg, "--out", str(tmp_path / cmd)]) == EXIT_OK
        assert (tmp_path / "clean" / "trim_report.json").exists()
        res = pd.read_csv(tmp_path / "residualize" / "residuals.csv")
        assert abs(res["dy"].mean()) < 1e-10
        m = pd.read_csv(tmp_path / "moments" / "moments_income_4th.csv")
        assert len(m) == 9

    def test_age_brackets_three_reports(self, simulated, tmp_path):
        cfg = write_config(
            tmp_path / "e.json", input=str(simulated / "panel.csv"), trim=False, sigma2_uy=0.004,
            specifications=["cons_linear_2nd"],
            subsamples=[{"age_bracket": [30, 40]}, {"age_bracket": [41, 50]}, {"age_bracket": [51, 65]}],
        )
        assert main(["estimate", "--config", cfg, "--out", str(tmp_path), "--jobs", "2"]) == EXIT_OK
        reports = sorted(tmp_path.glob("report_*.json"))
        assert [p.name for p in reports] == [
            "report_cons_linear_2nd__age30-40.json", "report_cons_linear_2nd__age41-50.json",
            "report_cons_linear_2nd__age51-65.json"]
        for p in reports:
            rep = EstimateReport.from_json(p.read_text())
            assert 0.0 < rep.params["phi1"] < 0.4
            assert rep.diagnostics["income_report"]["stage"] == "income"

    def test_bootstrap_and_full_sample(self, simulated, tmp_path):
        cfg = write_config(tmp_path / "e.json", input=str(simulated / "panel.csv"), trim=False, sigma2_uy=0.004,
                           specifications=["cons_linear_2nd"], bootstrap={"replications": 50}, seed=5)
        assert main(["estimate", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        rep = EstimateReport.from_json((tmp_path / "report_cons_linear_2nd__all.json").read_text())
        assert abs(rep.params["phi1"] - 0.15) < 0.1
        assert rep.n_bootstrap == 50 and 0 < rep.standard_errors["phi1"] < 0.2
        boot = pd.read_csv(tmp_path / "bootstrap_cons_linear_2nd__all.csv")
        assert len(boot) == 50
        text = (tmp_path / "report_cons_linear_2nd__all.txt").read_text()
        assert "sigma2_zeta" in text and "(" in text

    def test_failing_cell_others_continue(self, simulated, tmp_path):
        cfg = write_config(
            tmp_path / "e.json", input=str(simulated / "panel.csv"), trim=False, sigma2_uy=0.004,
            specifications=["cons_linear_2nd"], subsamples=[{"age_bracket": [90, 99]}, {}],
        )
        assert main(["estimate", "--config", cfg, "--out", str(tmp_path)]) == EXIT_FAILED
        assert (tmp_path / "report_cons_linear_2nd__all.json").exists()
        cells = json.loads((tmp_path / "manifest.json").read_text())["cells"]
        assert [c["status"] for c in cells] == ["failed", "ok"]


class TestPassthrough:
    def _report(self, tmp_path, **params):
        rep = EstimateReport("consumption", "cons_quadratic", params, 0.0, [])
        path = tmp_path / "rep.json"
        path.write_text(rep.to_json())
        return str(path)

    def test_baseline_values(self, tmp_path, baseline_quadratic):
        rep = self._report(tmp_path, **baseline_quadratic.to_dict())
        cfg = write_config(tmp_path / "p.json", passthrough={"report": rep, "zeta": [-0.7, -0.5, -0.07, 0.5]})
        assert main(["passthrough", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        df = pd.read_csv(tmp_path / "passthrough.csv")
        assert list(df.columns) == ["zeta", "v", "dP", "dT"]
        for got, want, digits in zip(df["dP"], [0.19, 0.174, 0.139, 0.094], [2, 3, 3, 3]):
            assert abs(got - want) <= 10.0**-digits

    def test_linear_report_constant(self, tmp_path):
        rep = self._report(tmp_path, phi1=0.2, psi1=0.05, sigma2_xi=0.01, sigma2_uc=0.02)
        cfg = write_config(tmp_path / "p.json", passthrough={"report": rep, "zeta": [-0.5, 0.0, 0.5], "v": [-0.2, 0.3]})
        assert main(["passthrough", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        df = pd.read_csv(tmp_path / "passthrough.csv")
        assert len(df) == 6
        assert set(df["dP"]) == {0.2} and set(df["dT"]) == {0.05}

    def test_missing_report(self, tmp_path):
        cfg = write_config(tmp_path / "p.json", passthrough={"report": str(tmp_path / "none.json")})
        assert main(["passthrough", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG
