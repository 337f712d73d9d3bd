"""Command-line front end.

Subcommands: ``inspect``, ``estimate``, ``diagnose``, ``sensitivity``,
``simulate``. Configuration comes from a flat key=value file, every key
overridable by a CLI flag of the same name; the resolved configuration is
embedded in every JSON report so runs are reproducible. Exit codes:
0 success, 2 input schema error, 3 estimator precondition failure,
4 diagnostic hard failure (too many bootstrap replicates failed).

Defaults mirror the recommended workflow: placebo periods {-2,-1,0},
carryover holdout 2, drift magnitude grid {0, 0.5}, alpha 0.05, 1000
bootstrap replicates.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import run_diagnostics
from .errors import BootstrapFailureError, EstimatorError, PanelTrendsError, SchemaError
from .panel import (
    compute_event_structure,
    drop_always_treated,
    read_long_csv,
    recode_carryover,
    status_summary,
    write_long_csv,
)
from .simulate import DgpSpec, simulate_panel, true_estimands
from .svg import render_event_study, render_sensitivity_curve, render_status_grid
from .workflow import run_estimators, run_sensitivity

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_PRECONDITION = 3
EXIT_DIAGNOSTIC = 4


@dataclasses.dataclass
class RunConfig:
    """Resolved run configuration; field names double as config keys and flags."""

    input: str = ""
    output_dir: str = "."
    col_unit: str = "unit"
    col_time: str = "time"
    col_outcome: str = "outcome"
    col_treatment: str = "treatment"
    col_cluster: str = "cluster"
    estimators: str = "auto"
    covariates: str = "auto"
    bootstrap_b: int = 1000
    seed: int = 0
    workers: int = 1
    placebo_periods: str = "-2,-1,0"
    carryover_k: int = 2
    mbar_grid: str = "0,0.5"
    alpha: float = 0.05
    drop_always_treated: bool = True
    recode_carryover_k: int = 0
    panel_match_history: int = 4
    panel_match_max_lead: int = 4
    # simulate-only keys
    sim_units: int = 50
    sim_periods: int = 10
    sim_assignment: str = "staggered"
    sim_block_start: int = 5
    sim_cohorts: str = ""
    sim_adoption_hazard: float = 0.15
    sim_switch_in: float = 0.15
    sim_switch_out: float = 0.15
    sim_never_share: float = 0.3
    sim_effect: str = "constant"
    sim_effect_base: float = 1.0
    sim_effect_slope: float = 0.0
    sim_effect_cohort_gap: float = 0.0
    sim_noise_sd: float = 0.0
    sim_unit_fe_sd: float = 1.0
    sim_time_fe_sd: float = 1.0
    sim_pretrend_slope: float = 0.0
    sim_missing_rate: float = 0.0
    sim_adversarial: bool = False

    def parsed_placebo_periods(self) -> tuple[int, ...]:
        return tuple(int(s) for s in self.placebo_periods.split(",") if s.strip() != "")

    def parsed_mbar_grid(self) -> tuple[float, ...]:
        return tuple(float(s) for s in self.mbar_grid.split(",") if s.strip() != "")

    def reproducibility_record(self) -> dict:
        # workers is an execution detail and must not change any output
        rec = dataclasses.asdict(self)
        rec.pop("workers")
        return rec


def load_config_file(path: str) -> dict:
    """Parse a flat key=value config file ('#' starts a comment)."""
    out: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(field: dataclasses.Field, raw: str):
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    if field.type in ("bool", bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return raw


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    if getattr(args, "config", None):
        for key, raw in load_config_file(args.config).items():
            if key not in fields:
                raise SchemaError(f"unknown config key {key!r}")
            setattr(cfg, key, _coerce(fields[key], raw))
    for key, field in fields.items():
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, _coerce(field, str(val)) if isinstance(val, str) else val)
    return cfg


def _json_ready(obj):
    if isinstance(obj, dict):
        return {str(k): _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) or math.isinf(v) else v
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _json_ready(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_report(payload: dict, cfg: RunConfig, path: Path) -> None:
    payload = dict(payload)
    payload["config"] = cfg.reproducibility_record()
    path.write_text(json.dumps(_json_ready(payload), indent=2, allow_nan=False) + "\n")


def _load_dataset(cfg: RunConfig):
    if not cfg.input:
        raise SchemaError("no input file given (key 'input')")
    mapping = {
        "unit": cfg.col_unit,
        "time": cfg.col_time,
        "outcome": cfg.col_outcome,
        "treatment": cfg.col_treatment,
        "cluster": cfg.col_cluster,
    }
    ds = read_long_csv(cfg.input, columns=mapping)
    notes = []
    if cfg.recode_carryover_k > 0:
        ds = recode_carryover(ds, cfg.recode_carryover_k)
        notes.append(f"treatment recoded to persist {cfg.recode_carryover_k} period(s) after exit")
    if cfg.drop_always_treated:
        ds, removed = drop_always_treated(ds)
        if removed:
            notes.append(f"always-treated units removed: {list(removed)}")
    return ds, notes


def _covariates(cfg: RunConfig, ds) -> tuple[str, ...]:
    if cfg.covariates == "auto":
        return tuple(ds.covariates)
    if cfg.covariates in ("", "none"):
        return ()
    return tuple(s.strip() for s in cfg.covariates.split(",") if s.strip())


def cmd_inspect(cfg: RunConfig) -> int:
    ds, notes = _load_dataset(cfg)
    es = compute_event_structure(ds)
    summary = status_summary(ds, es)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    render_status_grid(
        summary["codes"].tolist(), ds.unit_ids, ds.time_ids, str(out / "status.svg"),
        title="treatment status by unit and period",
    )
    payload = {
        "n_units": ds.n_units,
        "n_periods": ds.n_periods,
        "setting": summary["setting"],
        "counts": summary["counts"],
        "always_treated": summary["always_treated"],
        "ambiguous_history": summary["ambiguous_history"],
        "incomplete_cells": int(ds.incomplete_cells().sum()),
        "missing_outcome_cells": int(np.isnan(ds.outcome).sum()),
        "notes": notes,
    }
    write_report(payload, cfg, out / "inspect.json")
    print(f"setting: {summary['setting']}; wrote {out / 'inspect.json'} and {out / 'status.svg'}")
    return EXIT_OK


def cmd_estimate(cfg: RunConfig) -> int:
    ds, notes = _load_dataset(cfg)
    covs = _covariates(cfg, ds)
    report = run_estimators(
        ds,
        cfg.estimators,
        n_replicates=cfg.bootstrap_b,
        master_seed=cfg.seed,
        alpha=cfg.alpha,
        workers=cfg.workers,
        config={
            "covariates": covs,
            "panel_match_history": cfg.panel_match_history,
            "panel_match_max_lead": cfg.panel_match_max_lead,
        },
    )
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for item in report["results"]:
        if item["dynamic"]:
            name = item["summary"]["estimator"]
            render_event_study(
                item["dynamic"], str(out / f"event_study_{name}.svg"),
                title=f"dynamic effects: {name}",
            )
    report["notes"] = notes
    write_report(report, cfg, out / "estimates.json")
    width = max(len(r["summary"]["estimator"]) for r in report["results"])
    print(f"setting: {report['setting']}")
    for item in report["results"]:
        s = item["summary"]
        print(
            f"  {s['estimator']:<{width}}  att={s['att']: .6g}  "
            f"ci=[{s['ci_low']:.6g}, {s['ci_high']:.6g}]"
        )
    print(f"wrote {out / 'estimates.json'}")
    return EXIT_OK


def cmd_diagnose(cfg: RunConfig) -> int:
    ds, notes = _load_dataset(cfg)
    covs = _covariates(cfg, ds)
    requested = cfg.parsed_placebo_periods()
    report = run_diagnostics(
        ds,
        covariates=covs,
        placebo_periods=requested if requested != (-2, -1, 0) else None,
        carryover_k=cfg.carryover_k,
        n_replicates=cfg.bootstrap_b,
        master_seed=cfg.seed,
        alpha=cfg.alpha,
    )
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    holdout = report.placebo.periods if report.placebo else ()
    render_event_study(
        report.event_study["rows"], str(out / "diagnostics.svg"),
        title="imputation event study (blue = placebo holdout)",
        holdout_periods=holdout,
    )
    payload = {
        "event_study": report.event_study,
        "f_test": report.f_test,
        "placebo": None
        if report.placebo is None
        else {
            "periods": list(report.placebo.periods),
            "estimates": {str(k): v for k, v in report.placebo.estimates.items()},
            "cis": {str(k): list(v) for k, v in report.placebo.cis.items()},
            "att_under_holdout": report.placebo.att,
            "att_ci": list(report.placebo.att_ci),
            "joint": report.placebo.joint,
            "excluded_units": list(report.placebo.excluded_units),
            "n_holdout_cells": report.placebo.n_holdout_cells,
        },
        "carryover": None
        if report.carryover is None
        else {
            "holdout_length": report.carryover.holdout_length,
            "estimates": {str(k): v for k, v in report.carryover.estimates.items()},
            "cis": {str(k): list(v) for k, v in report.carryover.cis.items()},
            "joint": report.carryover.joint,
            "excluded_units": list(report.carryover.excluded_units),
            "n_holdout_cells": report.carryover.n_holdout_cells,
        },
        "carryover_skipped": report.carryover_skipped,
        "flags": {"pt_suspect": report.pt_suspect, "carryover_suspect": report.carryover_suspect},
        "notes": notes + report.notes,
    }
    write_report(payload, cfg, out / "diagnostics.json")
    f_p = report.f_test["p"] if report.f_test else None
    pl_p = report.placebo.p if report.placebo else None
    print(f"F test p: {f_p}; placebo joint p: {pl_p}; PT suspect: {report.pt_suspect}")
    if report.carryover:
        print(f"carryover joint p: {report.carryover.p}; suspect: {report.carryover_suspect}")
    elif report.carryover_skipped:
        print(f"carryover test skipped: {report.carryover_skipped}")
    print(f"wrote {out / 'diagnostics.json'} and {out / 'diagnostics.svg'}")
    return EXIT_OK


def cmd_sensitivity(cfg: RunConfig) -> int:
    ds, notes = _load_dataset(cfg)
    covs = _covariates(cfg, ds)
    requested = cfg.parsed_placebo_periods()
    report = run_sensitivity(
        ds,
        placebo_periods=requested if requested != (-2, -1, 0) else None,
        magnitude_grid=cfg.parsed_mbar_grid(),
        alpha=cfg.alpha,
        n_replicates=cfg.bootstrap_b,
        master_seed=cfg.seed,
        covariates=covs,
        workers=cfg.workers,
    )
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    render_sensitivity_curve(report, str(out / "sensitivity.svg"))
    report["notes"] = notes
    write_report(report, cfg, out / "sensitivity.json")
    for iv in report["intervals"]:
        print(f"  M={iv['magnitude']:g}: [{iv['low']:.6g}, {iv['high']:.6g}]")
    bd = report["breakdown"]
    print(f"breakdown magnitude: {'not reached' if bd is None else f'{bd:.4g}'}")
    print(f"wrote {out / 'sensitivity.json'} and {out / 'sensitivity.svg'}")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.sim_adversarial:
        from .simulate import adversarial_negative_weighting

        sp = adversarial_negative_weighting()
    else:
        spec = DgpSpec(
            n_units=cfg.sim_units,
            n_periods=cfg.sim_periods,
            assignment=cfg.sim_assignment,
            block_start=cfg.sim_block_start,
            cohort_periods=tuple(int(s) for s in cfg.sim_cohorts.split(",") if s.strip()),
            adoption_hazard=cfg.sim_adoption_hazard,
            switch_in_prob=cfg.sim_switch_in,
            switch_out_prob=cfg.sim_switch_out,
            never_treated_share=cfg.sim_never_share,
            effect=cfg.sim_effect,
            effect_base=cfg.sim_effect_base,
            effect_slope=cfg.sim_effect_slope,
            effect_cohort_gap=cfg.sim_effect_cohort_gap,
            noise_sd=cfg.sim_noise_sd,
            unit_fe_sd=cfg.sim_unit_fe_sd,
            time_fe_sd=cfg.sim_time_fe_sd,
            pretrend_slope=cfg.sim_pretrend_slope,
            missing_rate=cfg.sim_missing_rate,
            seed=cfg.seed,
        )
        sp = simulate_panel(spec)
    write_long_csv(sp.dataset, str(out / "panel.csv"))
    truth = true_estimands(sp)
    payload = {
        "spec": dataclasses.asdict(sp.spec),
        "true_att": truth["att"],
        "true_dynamic": {str(k): v for k, v in truth["dynamic"].items()},
        "true_group_time": {f"{g},{l}": v for (g, l), v in truth["group_time"].items()},
    }
    write_report(payload, cfg, out / "truth.json")
    print(f"wrote {out / 'panel.csv'} and {out / 'truth.json'} (true ATT = {truth['att']:.6g})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paneltrends",
        description="Causal panel analysis under parallel trends.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "inspect": "summarize treatment patterns and data quality",
        "estimate": "run the requested estimators with bootstrap intervals",
        "diagnose": "pretrend F test, placebo test, carryover test",
        "sensitivity": "robust confidence sets and breakdown magnitude",
        "simulate": "generate a synthetic panel with known truth",
    }
    for name, help_text in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key=value config file")
        for f in dataclasses.fields(RunConfig):
            p.add_argument(f"--{f.name}", dest=f.name, default=None, metavar=str(f.type))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            cfg = resolve_config(args)
            handler = {
                "inspect": cmd_inspect,
                "estimate": cmd_estimate,
                "diagnose": cmd_diagnose,
                "sensitivity": cmd_sensitivity,
                "simulate": cmd_simulate,
            }[args.command]
            return handler(cfg)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except FileNotFoundError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except EstimatorError as exc:
        print(f"estimator precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except BootstrapFailureError as exc:
        print(f"diagnostic failure: {exc}", file=sys.stderr)
        return EXIT_DIAGNOSTIC
    except PanelTrendsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION


if __name__ == "__main__":
    sys.exit(main())
