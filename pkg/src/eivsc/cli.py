"""Command-line entry point: ``eivsc {simulate,estimate,rates,diagnose}``.

Configuration is a strict JSON document. Flags override file values, and
the fully resolved configuration is written to ``effective_config.json``
next to the outputs, so rerunning from that file reproduces them.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import math
import os
import sys
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (ConfigError, CSVFormatError, EivscError, ExperimentError,
                     UnboundedProblemError)
from .inference import (VARIANCE_METHODS, EstimatorConfig, diagnostics_from_truth,
                        normality_diagnostics, synthetic_control)
from .paneldata import LayoutConfig, NoiseSpec, estimate_noise_spec, load_panel_csv
from .rates import (RefinedRateParams, SetDescriptor, SimplifiedRateParams,
                    effective_sample_size, solve_fixed_point, solve_fixed_point_refined)
from .simlab import Scenario, prepare_grid, run_scenario, summarize
from .solver import ConstraintSet
from .spectral import svd, typicality_D

COMMANDS = ("simulate", "estimate", "rates", "diagnose")
REPORT_FORMATS = ("json", "csv", "table")
DATA_DIR = Path(__file__).resolve().parent / "data"
EXAMPLE_CSV = DATA_DIR / "example_panel.csv"
EXAMPLE_LAYOUT = DATA_DIR / "example_layout.json"

# Scenario fields driven by top-level keys rather than the scenario block.
_LIFTED = {"eta", "alpha", "constraint", "intercept", "tol", "max_iter", "n_reps", "base_seed"}
REQUIRED = object()

COMMON_DEFAULTS = {
    "command": None,
    "output_dir": "eivsc_out",
    "report_format": "json",
    "seed": 0,
    "eta": 1.0,
    "alpha": 0.05,
    "constraint": "simplex",
    "intercept": None,
    "tol": 1e-8,
    "max_iter": 100_000,
    "c": 1.0,
}


def _scenario_defaults():
    base = Scenario()
    return {f.name: _jsonable(getattr(base, f.name)) for f in dataclasses.fields(Scenario)
            if f.name not in _LIFTED}


LAYOUT_DEFAULTS = {"treated": None, "controls": None, "time_column": None, "post_row": -1,
                   "orientation": "columns_are_units"}
NOISE_DEFAULTS = {"method": "residual_plugin", "sigma": None, "sigma_e": None, "p_e": None}
DIAG_DEFAULTS = {"kappa": 1.0, "kappa_prime": 1.0, "threshold": 0.1}
SET_DEFAULTS = {"constraint": None, "center": None, "radius_s": math.inf}
RATES_DEFAULTS = {
    "mode": "simplified",
    "n": REQUIRED, "p": REQUIRED, "sigma": REQUIRED, "p_eff": REQUIRED, "rank_or_R": REQUIRED,
    "oracle_error": 0.0, "v": 1.0, "width_mode": "l1_bound", "width_c": 1.0,
    "width_value": None, "mc_samples": 200, "set": None,
    "K": 1.0, "phi": 1.0, "width_sigma": None, "p_eff_sigma": None, "singular_values": None,
}


def _command_schema(command):
    """Nested defaults for ``command``; ``REQUIRED`` marks mandatory leaves."""
    schema = dict(COMMON_DEFAULTS)
    if command == "simulate":
        schema.update({"n_reps": 100, "scenario": _scenario_defaults()})
    elif command == "estimate":
        schema.update({"data": {"path": None, "layout": dict(LAYOUT_DEFAULTS)},
                       "noise": dict(NOISE_DEFAULTS), "variance_method": "plugin"})
    elif command == "rates":
        schema.update({"rates": dict(RATES_DEFAULTS)})
        schema["rates"]["set"] = dict(SET_DEFAULTS)
    elif command == "diagnose":
        schema.update({"scenario": None, "data": None, "noise": dict(NOISE_DEFAULTS),
                       "diagnostics": dict(DIAG_DEFAULTS)})
    return schema


# Blocks that may be null or a mapping, with the schema used when present.
_OPTIONAL_BLOCKS = {
    ("diagnose", "scenario"): _scenario_defaults,
    ("diagnose", "data"): lambda: {"path": None, "layout": dict(LAYOUT_DEFAULTS)},
    ("rates", "rates.set"): lambda: dict(SET_DEFAULTS),
}


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return None if math.isnan(x) else ("inf" if x > 0 else "-inf")
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _merge(schema, given, path, command):
    """Fill defaults into ``given`` and reject unknown keys."""
    if not isinstance(given, dict):
        raise ConfigError(f"{path or 'config'} must be an object", path or "")
    out = {}
    for key in given:
        if key not in schema:
            kp = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown key {kp!r}", kp)
    for key, default in schema.items():
        kp = f"{path}.{key}" if path else key
        val = given.get(key, default)
        factory = _OPTIONAL_BLOCKS.get((command, kp))
        if factory is not None:
            out[key] = None if val is None else _merge(factory(), val, kp, command)
        elif isinstance(default, dict) and key != "grid":
            out[key] = _merge(default, given.get(key, {}) or {}, kp, command)
        elif val is REQUIRED:
            raise ConfigError(f"missing required key {kp!r}", kp)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _check_type(cfg, key, kinds, path=None):
    kp = path or key
    val = cfg[key]
    if val is None:
        return
    if isinstance(val, bool) and bool not in kinds:
        raise ConfigError(f"{kp} has the wrong type", kp)
    if not isinstance(val, kinds):
        raise ConfigError(f"{kp} has the wrong type", kp)


def _validate(cfg):
    num = (int, float)
    for key, kinds in (("eta", num), ("alpha", num), ("tol", num), ("c", num), ("seed", (int,)),
                       ("max_iter", (int,)), ("constraint", (str,)), ("intercept", (bool,)),
                       ("output_dir", (str,)), ("report_format", (str,))):
        _check_type(cfg, key, kinds)
    if cfg["command"] not in COMMANDS:
        raise ConfigError(f"command must be one of {COMMANDS}", "command")
    if cfg["report_format"] not in REPORT_FORMATS:
        raise ConfigError(f"report_format must be one of {REPORT_FORMATS}", "report_format")
    if not 0 < cfg["alpha"] < 1:
        raise ConfigError("alpha must lie in (0, 1)", "alpha")
    if not cfg["eta"] > 0:
        raise ConfigError("eta must be positive", "eta")
    try:
        ConstraintSet.parse(cfg["constraint"])
    except ValueError as exc:
        raise ConfigError(str(exc), "constraint") from None
    cmd = cfg["command"]
    if cmd == "simulate":
        _check_type(cfg, "n_reps", (int,))
        if cfg["n_reps"] < 1:
            raise ConfigError("n_reps must be at least 1", "n_reps")
        _scenario_from(cfg, cfg["scenario"], "scenario")
    if cmd in ("estimate", "diagnose"):
        data = cfg.get("data")
        if data is not None and data["path"] is not None and not os.path.exists(data["path"]):
            raise ConfigError(f"data file {data['path']!r} does not exist", "data.path")
        noise = cfg["noise"]
        if noise["method"] not in ("residual_plugin", "known"):
            raise ConfigError("noise.method must be residual_plugin or known", "noise.method")
        if noise["method"] == "known" and noise["sigma"] is None:
            raise ConfigError("known noise needs noise.sigma", "noise.sigma")
    if cmd == "estimate" and cfg["variance_method"] not in VARIANCE_METHODS:
        raise ConfigError(f"variance_method must be one of {VARIANCE_METHODS}", "variance_method")
    if cmd == "diagnose" and cfg["scenario"] is None and cfg["data"] is None:
        raise ConfigError("diagnose needs a scenario or a data block", "scenario")
    if cmd == "rates":
        r = cfg["rates"]
        if r["mode"] not in ("simplified", "refined"):
            raise ConfigError("rates.mode must be simplified or refined", "rates.mode")
        for key in ("n", "p", "rank_or_R", "mc_samples"):
            _check_type(r, key, (int,), f"rates.{key}")
        for key in ("sigma", "p_eff", "oracle_error", "v", "width_c", "K", "phi"):
            _check_type(r, key, num, f"rates.{key}")
    out = Path(cfg["output_dir"])
    parent = out if out.exists() else out.parent
    if parent.exists() and not os.access(parent, os.W_OK):
        raise ConfigError("output directory is not writable", "output_dir")


def _scenario_from(cfg, block, path):
    fields = dict(block)
    fields.update(eta=float(cfg["eta"]), alpha=float(cfg["alpha"]), constraint=cfg["constraint"],
                  intercept=bool(cfg["intercept"]), tol=float(cfg["tol"]),
                  max_iter=int(cfg["max_iter"]), base_seed=int(cfg["seed"]),
                  n_reps=int(cfg.get("n_reps", 1)))
    try:
        return Scenario(**fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scenario: {exc}", path) from None


def parse_config(path: Optional[str] = None, flags: Optional[dict] = None,
                 command: Optional[str] = None) -> dict:
    """Read, merge and validate a configuration.

    ``flags`` maps top-level keys to values that override the file.
    Unknown keys, missing required keys and type mismatches raise
    :class:`ConfigError` carrying the key path.
    """
    given = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path!r} does not exist", "config")
        try:
            with open(path, encoding="utf-8") as fh:
                given = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}", "config") from None
        if not isinstance(given, dict):
            raise ConfigError("config must be a JSON object", "config")
    command = command or given.get("command")
    if command not in COMMANDS:
        raise ConfigError(f"command must be one of {COMMANDS}", "command")
    if given.get("command") not in (None, command):
        raise ConfigError("config command disagrees with the subcommand", "command")
    given = dict(given, command=command)
    for key, val in (flags or {}).items():
        if val is not None:
            given[key] = val
    cfg = _merge(_command_schema(command), given, "", command)
    cfg = _decode_inf(cfg)
    _validate(cfg)
    return cfg


def _decode_inf(x):
    if isinstance(x, dict):
        return {k: _decode_inf(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_decode_inf(v) for v in x]
    if x == "inf":
        return math.inf
    if x == "-inf":
        return -math.inf
    return x


# ---------------------------------------------------------------------------
# commands


class NumericalFailure(Exception):
    def __init__(self, kind, message, detail=None):
        super().__init__(message)
        self.kind = kind
        self.detail = detail or {}


def _estimator(cfg) -> EstimatorConfig:
    return EstimatorConfig(float(cfg["eta"]), ConstraintSet.parse(cfg["constraint"]),
                           cfg["intercept"], float(cfg["tol"]), int(cfg["max_iter"]))


def _load_data(data):
    if data["path"] is None:
        with open(EXAMPLE_LAYOUT, encoding="utf-8") as fh:
            layout = json.load(fh)
        path = EXAMPLE_CSV
    else:
        layout, path = data["layout"], data["path"]
    if layout.get("treated") in (None, REQUIRED):
        raise ConfigError("missing required key 'data.layout.treated'", "data.layout.treated")
    lay = LayoutConfig(layout["treated"], layout.get("controls"), layout.get("time_column"),
                       int(layout.get("post_row", -1)),
                       layout.get("orientation", "columns_are_units"))
    try:
        return load_panel_csv(str(path), lay)
    except CSVFormatError as exc:
        raise ConfigError(f"{exc} (row {exc.row}, column {exc.col})", "data.path") from None


def _noise_for(panel, noise_cfg) -> NoiseSpec:
    if noise_cfg["method"] == "known":
        p_e = noise_cfg["p_e"] or panel.p_e
        return NoiseSpec.iid_columns(panel.n, panel.p, float(noise_cfg["sigma"]), int(p_e),
                                     sigma_e=noise_cfg["sigma_e"])
    return estimate_noise_spec(panel, "residual_plugin")


def run_simulate(cfg):
    sc = _scenario_from(cfg, cfg["scenario"], "scenario")
    try:
        table = run_scenario(sc)
    except ExperimentError as exc:
        raise NumericalFailure("nonconvergence", str(exc)) from None
    report = {"scenario": sc.to_dict(), "summary": summarize(table, sc)}
    return report, table


def run_estimate(cfg):
    panel = _load_data(cfg["data"])
    noise = _noise_for(panel, cfg["noise"])
    est = _estimator(cfg)
    rep = synthetic_control(panel, noise, est, cfg["variance_method"], float(cfg["alpha"]))
    if not rep.converged:
        raise NumericalFailure("nonconvergence", "weight fit did not converge",
                               {"optimality_residual": rep.optimality_residual})
    out = rep.to_dict()
    out["noise"] = {"method": cfg["noise"]["method"], "sigma": noise.sigma,
                    "sigma_e": noise.sigma_e, "p_e": noise.p_e}
    out["n"], out["p"] = panel.n, panel.p
    return out, None


def run_rates(cfg):
    r = cfg["rates"]
    common = dict(n=int(r["n"]), p=int(r["p"]), sigma=float(r["sigma"]),
                  p_eff=float(r["p_eff"]), rank_or_R=int(r["rank_or_R"]),
                  oracle_error=float(r["oracle_error"]), eta=float(cfg["eta"]), v=float(r["v"]),
                  c=float(cfg["c"]), width_mode=r["width_mode"], width_c=float(r["width_c"]),
                  width_value=r["width_value"], mc_samples=int(r["mc_samples"]),
                  mc_seed=int(cfg["seed"]))
    if r["width_mode"] == "monte_carlo":
        st = r["set"] or dict(SET_DEFAULTS)
        cons = ConstraintSet.parse(st["constraint"] or cfg["constraint"])
        center = st["center"]
        if center is None:
            center = np.full(common["p"], 1.0 / common["p"]) if cons.kind == "simplex" \
                else np.zeros(common["p"])
        common["set_descriptor"] = SetDescriptor(cons, np.asarray(center, float),
                                                 float(st["radius_s"]))
    try:
        if r["mode"] == "refined":
            params = RefinedRateParams(**common, K=float(r["K"]), phi=float(r["phi"]),
                                       width_sigma=r["width_sigma"], p_eff_sigma=r["p_eff_sigma"],
                                       singular_values=r["singular_values"])
        else:
            params = SimplifiedRateParams(**common)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid rate parameters: {exc}", "rates") from None
    rep = solve_fixed_point_refined(params) if r["mode"] == "refined" else solve_fixed_point(params)
    if not rep.solvable:
        raise NumericalFailure("rate_unsolvable", rep.reason, {"report": rep.to_dict()})
    return rep.to_dict(), None


def run_diagnose(cfg):
    est = _estimator(cfg)
    d = cfg["diagnostics"]
    if cfg["scenario"] is not None:
        sc = _scenario_from(cfg, cfg["scenario"], "scenario")
        out = []
        for gp in prepare_grid(sc):
            rep = diagnostics_from_truth(gp.truth, sc.estimator(), d["kappa"], d["kappa_prime"],
                                         d["threshold"], gp.oracle)
            out.append({"grid_index": gp.index, "n": gp.truth.n, "p": gp.truth.p,
                        "p_eff": gp.p_eff, "all_pass": rep.all_pass, **rep.to_dict()})
        return {"source": "scenario", "grid": out}, None
    panel = _load_data(cfg["data"])
    noise = _noise_for(panel, cfg["noise"])
    rep_fit = synthetic_control(panel, noise, est, "plugin", float(cfg["alpha"]))
    theta = np.asarray(rep_fit.theta)
    dec = svd(panel.X)
    typ = typicality_D(panel.x_e, dec, noise.sigma, est.eta, panel.n)
    fit_error = float(np.linalg.norm(rep_fit.theta0 + panel.X @ theta - panel.y))
    rep = normality_diagnostics(panel.n, panel.p, est.eta, noise.sigma, noise.sigma_e,
                                effective_sample_size(theta, noise.p_e), typ.D_tilde, dec.rank,
                                fit_error, 0.0, d["kappa"], d["kappa_prime"], d["threshold"],
                                dec.singular_values, float(np.linalg.norm(panel.x_e)), typ.D)
    return {"source": "data", "all_pass": rep.all_pass,
            "note": "plug-in values from noisy observations stand in for the latent quantities",
            **rep.to_dict()}, None


RUNNERS = {"simulate": run_simulate, "estimate": run_estimate, "rates": run_rates,
           "diagnose": run_diagnose}


# ---------------------------------------------------------------------------
# output


def _atomic_write(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _table_text(obj, prefix=""):
    lines = []
    if isinstance(obj, dict):
        for k, v in obj.items():
            lines.extend(_table_text(v, f"{prefix}{k}."))
    elif isinstance(obj, list) and obj and isinstance(obj[0], dict):
        for i, v in enumerate(obj):
            lines.extend(_table_text(v, f"{prefix}{i}."))
    else:
        lines.append(f"{prefix[:-1]:<48} {obj}")
    return lines


def run(cfg: dict) -> int:
    """Execute a validated configuration; returns the exit code."""
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    eff = _dumps(cfg)
    try:
        report, table = RUNNERS[cfg["command"]](cfg)
    except ConfigError as exc:
        _emit_error(out, eff, "config", str(exc), {"key_path": exc.key_path})
        return 1
    except NumericalFailure as exc:
        _emit_error(out, eff, exc.kind, str(exc), exc.detail)
        return 2
    except UnboundedProblemError as exc:
        _emit_error(out, eff, "unbounded_problem", str(exc))
        return 2
    _atomic_write(out / "effective_config.json", eff)
    if table is not None:
        fd, tmp = tempfile.mkstemp(dir=out, prefix=".table.csv.", suffix=".tmp")
        os.close(fd)
        try:
            table.to_csv(tmp)
            os.replace(tmp, out / "table.csv")
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    _atomic_write(out / "report.json", _dumps(report))
    fmt = cfg["report_format"]
    if fmt == "json":
        print(_dumps(report), end="")
    elif fmt == "table":
        print("\n".join(_table_text(_jsonable(report))))
    else:
        print(out / "table.csv" if table is not None else out / "report.json")
    return 0


def _emit_error(out: Path, eff: str, kind: str, message: str, detail=None):
    err = {"error": {"kind": kind, "message": message, **(detail or {})}}
    _atomic_write(out / "effective_config.json", eff)
    _atomic_write(out / "error.json", _dumps(err))
    print(_dumps(err), end="", file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eivsc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", dest="output_dir", help="output directory")
        p.add_argument("--eta", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--n-reps", dest="n_reps", type=int)
        p.add_argument("--alpha", type=float)
        p.add_argument("--constraint", help="simplex, l1:RADIUS, nonneg or euclidean")
        p.add_argument("--intercept", action=argparse.BooleanOptionalAction, default=None)
        p.add_argument("--tol", type=float)
        p.add_argument("--max-iter", dest="max_iter", type=int)
        p.add_argument("--format", dest="report_format", choices=REPORT_FORMATS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    if args.command != "simulate" and flags.get("n_reps") is not None:
        print("--n-reps only applies to simulate", file=sys.stderr)
        return 1
    try:
        cfg = parse_config(args.config, flags, args.command)
    except ConfigError as exc:
        err = {"error": {"kind": "config", "message": str(exc), "key_path": exc.key_path}}
        print(_dumps(err), end="", file=sys.stderr)
        return 1
    try:
        return run(cfg)
    except EivscError as exc:
        print(_dumps({"error": {"kind": type(exc).__name__, "message": str(exc)}}), end="",
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
