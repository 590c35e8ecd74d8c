"""Command-line front end.

Every subcommand reads one JSON run configuration::

    partial-insurance estimate --config run.json --out results/ --seed 7 --jobs 2

All randomness derives from the top-level ``seed``: each stage draws from
``SeedSequence([seed, crc32(stage), index])``, so any single stage can be
rerun on its own. Outputs are written atomically and every run leaves a
``manifest.json`` with the configuration hash and library versions.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from . import __version__
from ._io import atomic_write_frame, atomic_write_json, atomic_write_text
from .consumption_model import LinearConsumptionParams, QuadraticConsumptionParams, passthrough_grid
from .estimator import (
    BootstrapConfig,
    EstimateReport,
    GmmConfig,
    PipelineSpec,
    bootstrap,
    make_pipeline,
    run_pipeline,
)
from .moments import SPECIFICATIONS, empirical_moments, target_set
from .panel import SubsampleFilter, apply_filter, load_panel, trim_outliers, write_panel
from .residualize import residualize_panel
from .simulator import ShockSpec, SimConfig, simulate_panel

log = logging.getLogger("partial_insurance")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2
COMMANDS = ("simulate", "clean", "residualize", "moments", "estimate", "passthrough")


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


def derive_seed(seed: int, stage: str, index: int = 0) -> int:
    """64-bit seed for ``stage`` number ``index`` of a run seeded with ``seed``."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(stage.encode()), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# configuration


def _section(data: Any, path: str, allowed: dict[str, type | tuple]) -> dict:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(path, "expected a JSON object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    for key, value in data.items():
        kinds = allowed[key]
        if value is not None and not isinstance(value, kinds):
            raise ConfigError(f"{path}.{key}" if path else key, f"wrong type {type(value).__name__}")
        if isinstance(value, bool) and bool not in (kinds if isinstance(kinds, tuple) else (kinds,)):
            raise ConfigError(f"{path}.{key}" if path else key, "wrong type bool")
    return dict(data)


NUM = (int, float)


@dataclass(frozen=True)
class SimulationSection:
    n_households: int = 1000
    waves: tuple[int, ...] = tuple(range(1999, 2021, 2))
    zeta: dict = field(default_factory=lambda: {"sigma2": 0.030})
    v: dict = field(default_factory=lambda: {"sigma2": 0.031})
    uy_variance: float = 0.0
    consumption: dict = field(default_factory=lambda: {"model": "linear", "phi1": 0.15, "psi1": 0.0})
    attrition: float = 0.0
    initial_permanent_var: float = 0.0
    demographics: bool = False
    write_archive: bool = True

    _TYPES = {"n_households": int, "waves": list, "zeta": dict, "v": dict, "uy_variance": NUM,
              "consumption": dict, "attrition": NUM, "initial_permanent_var": NUM,
              "demographics": bool, "write_archive": bool}

    @classmethod
    def from_dict(cls, data) -> "SimulationSection":
        d = _section(data, "simulation", cls._TYPES)
        if "waves" in d:
            d["waves"] = tuple(d["waves"])
        out = cls(**d)
        out.sim_config(0)
        return out

    def _shock(self, name: str) -> ShockSpec:
        spec = _section(getattr(self, name), f"simulation.{name}", {"sigma2": NUM, "gamma": NUM, "kappa": NUM})
        if "sigma2" not in spec:
            raise ConfigError(f"simulation.{name}.sigma2", "required")
        try:
            return ShockSpec(float(spec["sigma2"]), float(spec.get("gamma", 0.0)), spec.get("kappa"))
        except ValueError as exc:
            raise ConfigError(f"simulation.{name}", str(exc)) from None

    def _consumption(self):
        d = dict(self.consumption)
        model = d.pop("model", "linear")
        try:
            if model == "linear":
                return LinearConsumptionParams.from_dict(d).validate()
            if model == "quadratic":
                return QuadraticConsumptionParams.from_dict(d).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError("simulation.consumption", str(exc)) from None
        raise ConfigError("simulation.consumption.model", "must be 'linear' or 'quadratic'")

    def sim_config(self, seed: int) -> SimConfig:
        try:
            return SimConfig(
                n_households=self.n_households, waves=self.waves, zeta_spec=self._shock("zeta"),
                v_spec=self._shock("v"), uy_variance=float(self.uy_variance), consumption=self._consumption(),
                attrition=float(self.attrition), seed=seed,
                initial_permanent_var=float(self.initial_permanent_var), demographics=self.demographics,
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError("simulation", str(exc)) from None


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration; see the README for every field."""

    input: str | None = None
    schema: dict = field(default_factory=dict)
    trim: bool = True
    income_terms: tuple[str, ...] = ("1", "wave")
    consumption_terms: tuple[str, ...] | None = None
    specifications: tuple[str, ...] = ("cons_quadratic",)
    gmm: dict = field(default_factory=dict)
    bootstrap: dict | None = None
    subsamples: tuple[dict, ...] = ({},)
    me_share: float = 0.04
    sigma2_uy: float | None = None
    centered: bool = True
    seed: int = 0
    out: str = "out"
    simulation: SimulationSection | None = None
    passthrough: dict | None = None

    _TYPES = {"input": str, "schema": dict, "trim": bool, "income_terms": list, "consumption_terms": list,
              "specifications": list, "gmm": dict, "bootstrap": dict, "subsamples": list, "me_share": NUM,
              "sigma2_uy": NUM, "centered": bool, "seed": int, "out": str, "simulation": dict,
              "passthrough": dict}

    @classmethod
    def from_dict(cls, data: Any) -> "RunConfig":
        d = _section(data, "", cls._TYPES)
        for key in ("income_terms", "consumption_terms", "specifications"):
            if d.get(key) is not None:
                if not all(isinstance(t, str) for t in d[key]):
                    raise ConfigError(key, "entries must be strings")
                d[key] = tuple(d[key])
        for i, name in enumerate(d.get("specifications", ())):
            if name not in SPECIFICATIONS:
                raise ConfigError(f"specifications[{i}]", f"unknown specification {name!r}")
        if "subsamples" in d:
            subs = []
            for i, s in enumerate(d["subsamples"]):
                try:
                    SubsampleFilter.from_dict(s)
                except (TypeError, ValueError, KeyError) as exc:
                    raise ConfigError(f"subsamples[{i}]", str(exc)) from None
                subs.append(dict(s))
            d["subsamples"] = tuple(subs) or ({},)
        if "schema" in d and not all(isinstance(v, str) for v in d["schema"].values()):
            raise ConfigError("schema", "column names must be strings")
        if d.get("simulation") is not None:
            d["simulation"] = SimulationSection.from_dict(d["simulation"])
        if not 0 <= d.get("me_share", 0.04) <= 1:
            raise ConfigError("me_share", "must lie in [0, 1]")
        if d.get("sigma2_uy") is not None and d["sigma2_uy"] < 0:
            raise ConfigError("sigma2_uy", "must be non-negative")
        cfg = cls(**d)
        cfg.gmm_config()
        cfg.bootstrap_config()
        cfg.passthrough_grid_spec()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(data)

    def gmm_config(self, specification: str = "income_4th") -> GmmConfig:
        d = _section(self.gmm, "gmm", {"weighting": str, "max_iter": int, "tol": NUM, "min_cells": int})
        try:
            return GmmConfig(specification=specification, **d)
        except (TypeError, ValueError) as exc:
            raise ConfigError("gmm", str(exc)) from None

    def bootstrap_config(self, index: int = 0) -> BootstrapConfig | None:
        if self.bootstrap is None:
            return None
        d = _section(self.bootstrap, "bootstrap", {"replications": int, "se_method": str,
                                                   "max_failure_rate": NUM})
        try:
            return BootstrapConfig(seed=derive_seed(self.seed, "bootstrap", index), **d)
        except (TypeError, ValueError) as exc:
            raise ConfigError("bootstrap", str(exc)) from None

    def passthrough_grid_spec(self) -> dict | None:
        if self.passthrough is None:
            return None
        d = _section(self.passthrough, "passthrough", {"report": str, "zeta": list, "v": list})
        if "report" not in d:
            raise ConfigError("passthrough.report", "required")
        for axis in ("zeta", "v"):
            vals = d.get(axis, [0.0])
            if not vals or not all(isinstance(x, NUM) and not isinstance(x, bool) for x in vals):
                raise ConfigError(f"passthrough.{axis}", "must be a non-empty list of numbers")
        return {"report": d["report"], "zeta": d.get("zeta", [0.0]), "v": d.get("v", [0.0])}

    def filters(self) -> list[SubsampleFilter]:
        return [SubsampleFilter.from_dict(s) for s in self.subsamples]

    def with_overrides(self, out=None, seed=None) -> "RunConfig":
        changes = {}
        if out is not None:
            changes["out"] = str(out)
        if seed is not None:
            changes["seed"] = int(seed)
        return RunConfig(**{**{f.name: getattr(self, f.name) for f in fields(self)}, **changes})

    def canonical(self) -> dict:
        """Semantic content of the run: defaults filled in, output location left out."""
        d = asdict(self)
        d.pop("out")
        return d

    def hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(text.encode()).hexdigest()


def _versions() -> dict:
    import scipy
    import sklearn

    return {"partial_insurance": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pandas": pd.__version__, "scikit-learn": sklearn.__version__}


def write_manifest(cfg: RunConfig, command: str, outputs: list[str], extra: dict | None = None) -> Path:
    manifest = {"command": command, "config_hash": cfg.hash(), "config": cfg.canonical(),
                "versions": _versions(), "outputs": sorted(outputs)}
    manifest.update(extra or {})
    return atomic_write_json(Path(cfg.out) / "manifest.json", manifest)


# commands


def _input_panel(cfg: RunConfig):
    if cfg.input is None:
        raise ConfigError("input", "required for this command")
    panel = load_panel(cfg.input, cfg.schema)
    for d in panel.rejected:
        log.warning("%s line %d rejected: %s", cfg.input, d.line, d.reason)
    if cfg.trim:
        panel, report = trim_outliers(panel)
        log.info("trimmed %d observations", report.total)
    return panel


def cmd_simulate(cfg: RunConfig, jobs: int = 1) -> int:
    if cfg.simulation is None:
        raise ConfigError("simulation", "required for simulate")
    out = Path(cfg.out)
    panel, archive = simulate_panel(cfg.simulation.sim_config(derive_seed(cfg.seed, "simulate")))
    written = [str(write_panel_path(panel, out / "panel.csv"))]
    if cfg.simulation.write_archive:
        written.append(str(atomic_write_frame(archive.to_frame(), out / "archive.csv")))
    write_manifest(cfg, "simulate", written, {"n_households": panel.n_households, "n_rows": len(panel)})
    return EXIT_OK


def write_panel_path(panel, path: Path) -> Path:
    write_panel(panel, path)
    return path


def cmd_clean(cfg: RunConfig, jobs: int = 1) -> int:
    if cfg.input is None:
        raise ConfigError("input", "required for clean")
    out = Path(cfg.out)
    panel = load_panel(cfg.input, cfg.schema)
    panel, report = trim_outliers(panel)
    rejected = pd.DataFrame([{"line": d.line, "reason": d.reason} for d in panel.rejected],
                            columns=["line", "reason"])
    written = [str(write_panel_path(panel, out / "clean_panel.csv")),
               str(atomic_write_frame(rejected, out / "rejected_rows.csv")),
               str(atomic_write_json(out / "trim_report.json", asdict(report)))]
    write_manifest(cfg, "clean", written)
    return EXIT_OK


def cmd_residualize(cfg: RunConfig, jobs: int = 1) -> int:
    out = Path(cfg.out)
    rp = residualize_panel(_input_panel(cfg), cfg.income_terms, cfg.consumption_terms)
    written = [str(atomic_write_frame(rp.to_frame(), out / "residuals.csv")),
               str(atomic_write_json(out / "regression_report.json", rp.report))]
    write_manifest(cfg, "residualize", written)
    return EXIT_OK


def cmd_moments(cfg: RunConfig, jobs: int = 1) -> int:
    out = Path(cfg.out)
    rp = residualize_panel(_input_panel(cfg), cfg.income_terms, cfg.consumption_terms)
    written = []
    for spec in cfg.specifications:
        m = empirical_moments(rp, target_set(spec))
        path = out / f"moments_{spec}.csv"
        m.to_csv(path)
        written.append(str(path))
    write_manifest(cfg, "moments", written)
    return EXIT_OK


def _estimate_cell(cfg: RunConfig, panel, spec: str, filt: SubsampleFilter, index: int) -> dict:
    label = f"{spec}__{filt.label()}"
    out = Path(cfg.out)
    sub = apply_filter(panel, filt)
    ps = PipelineSpec(
        specification=spec, income_terms=cfg.income_terms, consumption_terms=cfg.consumption_terms,
        me_share=cfg.me_share, sigma2_uy=cfg.sigma2_uy, gmm=cfg.gmm_config(), centered=cfg.centered,
    )
    result = run_pipeline(sub, ps)
    report = result.consumption if result.consumption is not None else result.income
    if result.consumption is not None:
        report.diagnostics["income_report"] = result.income.to_dict()
    report.diagnostics["subsample"] = filt.label()
    report.diagnostics["n_households"] = sub.n_households
    report.diagnostics["sigma2_uy"] = result.sigma2_uy
    written = []
    bc = cfg.bootstrap_config(index)
    if bc is not None:
        boot = bootstrap(sub, make_pipeline(ps), bc)
        report.standard_errors = {k: v for k, v in boot.standard_errors.items() if k in report.params}
        report.n_bootstrap = boot.n_success
        report.diagnostics["bootstrap_failed"] = boot.n_failed
        if result.consumption is not None:
            report.diagnostics["income_report"]["standard_errors"] = {
                k: v for k, v in boot.standard_errors.items() if k in result.income.params}
            report.diagnostics["income_report"]["n_bootstrap"] = boot.n_success
        written.append(str(atomic_write_frame(boot.to_frame(), out / f"bootstrap_{label}.csv")))
    written.append(str(atomic_write_text(out / f"report_{label}.json", report.to_json() + "\n")))
    text = report.to_text()
    if result.consumption is not None:
        inc = EstimateReport.from_dict(report.diagnostics["income_report"])
        text = inc.to_text() + "\n" + text
    written.append(str(atomic_write_text(out / f"report_{label}.txt", text)))
    return {"cell": label, "status": "ok", "outputs": written}


def cmd_estimate(cfg: RunConfig, jobs: int = 1) -> int:
    panel = _input_panel(cfg)
    cells = [(spec, f) for spec in cfg.specifications for f in cfg.filters()]

    def run(item):
        index, (spec, filt) = item
        try:
            return _estimate_cell(cfg, panel, spec, filt, index)
        except Exception as exc:  # a failing cell must not stop the others
            log.error("cell %s/%s failed: %s", spec, filt.label(), exc)
            return {"cell": f"{spec}__{filt.label()}", "status": "failed",
                    "error": f"{type(exc).__name__}: {exc}", "outputs": []}

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, enumerate(cells)))
    else:
        results = [run(c) for c in enumerate(cells)]
    written = [p for r in results for p in r["outputs"]]
    cell_status = [{k: v for k, v in r.items() if k != "outputs"} for r in results]
    write_manifest(cfg, "estimate", written, {"cells": cell_status})
    return EXIT_OK if all(r["status"] == "ok" for r in results) else EXIT_FAILED


def cmd_passthrough(cfg: RunConfig, jobs: int = 1) -> int:
    grid = cfg.passthrough_grid_spec()
    if grid is None:
        raise ConfigError("passthrough", "required for passthrough")
    try:
        report = EstimateReport.from_json(Path(grid["report"]).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError("passthrough.report", f"cannot read report: {exc.strerror}") from None
    params = report.params
    qc = QuadraticConsumptionParams(
        params["phi1"], params["psi1"], params.get("phi2", 0.0), params.get("psi2", 0.0),
        params.get("omega22", 0.0), params.get("sigma2_xi", 0.0), params.get("sigma2_uc", 0.0),
    )
    rows = passthrough_grid(qc, grid["zeta"], grid["v"])
    path = atomic_write_frame(pd.DataFrame(rows, columns=["zeta", "v", "dP", "dT"]),
                              Path(cfg.out) / "passthrough.csv")
    write_manifest(cfg, "passthrough", [str(path)])
    return EXIT_OK


HANDLERS = {"simulate": cmd_simulate, "clean": cmd_clean, "residualize": cmd_residualize,
            "moments": cmd_moments, "estimate": cmd_estimate, "passthrough": cmd_passthrough}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partial-insurance",
        description="Estimate consumption partial insurance with higher-order income moments.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__doc__ or name)
        p.add_argument("--config", required=True, metavar="PATH", help="JSON run configuration")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, metavar="N", help="top-level seed (overrides config)")
        p.add_argument("--jobs", type=int, default=1, metavar="N", help="parallel workers")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs", "must be at least 1")
        cfg = RunConfig.load(args.config).with_overrides(args.out, args.seed)
        return HANDLERS[args.command](cfg, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
