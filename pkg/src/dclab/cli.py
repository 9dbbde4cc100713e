"""Command-line entry point: JSON-configured experiments with reproducible outputs.

Usage::

    dclab <solve|sweep|inequality|muckenhoupt|bogovskii|truncate> --config FILE [--out DIR] [--seed N]

Every run writes ``manifest.json`` into the output directory, also when the
run fails.  Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from dclab import __version__
from dclab.fields import Grid, save_field
from dclab.geometry import DomainSpec

COMMANDS = ("solve", "sweep", "inequality", "muckenhoupt", "bogovskii", "truncate")
TOP_KEYS = {"command", "grid", "seed", "out", "format", "payload"}
FORMAT_KEYS = {"save_fields": False, "plots": True}
GRID_KEYS = {"n", "cells", "domain"}

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class RunFailure(RuntimeError):
    """Numerical failure of a run (non-finite values or no convergence)."""


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _payload_schema(command: str) -> dict:
    from dclab.solver import ForcingSpec, ModelParams, SolverConfig

    solve_keys = {"params": _field_names(ModelParams), "forcing": _field_names(ForcingSpec) - {"data"},
                  "solver": _field_names(SolverConfig), "eps_schedule": None}
    return {
        "solve": solve_keys,
        "sweep": {**{k: v for k, v in solve_keys.items() if k != "eps_schedule"},
                  "parameter": None, "values": None},
        "inequality": {"cases": None, "refine": None},
        "muckenhoupt": {"p": None, "alphas": None, "levels": None, "quadrature_order": None},
        "bogovskii": {"p_values": None, "samples": None, "n": None, "refine_n": None, "radius": None},
        "truncate": {"j0": None, "J": None, "s": None, "per_level": None, "collar": None,
                     "null_members": None},
    }[command]


def _reject_unknown(given: dict, allowed, where: str):
    if not isinstance(given, dict):
        raise ConfigError("expected an object", where)
    for k in given:
        if k not in allowed:
            raise ConfigError("unknown key", f"{where}.{k}" if where else k)


@dataclass
class ExperimentConfig:
    """Validated experiment description."""

    command: str
    grid: dict = dc_field(default_factory=lambda: {"n": 8})
    seed: int = 0
    out: str | None = None
    format: dict = dc_field(default_factory=dict)
    payload: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}", "command")
        _reject_unknown(self.grid, GRID_KEYS, "grid")
        _reject_unknown(self.format, FORMAT_KEYS, "format")
        self.format = {**FORMAT_KEYS, **self.format}
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("must be an integer", "seed")
        schema = _payload_schema(self.command)
        _reject_unknown(self.payload, schema, "payload")
        for k, sub in schema.items():
            if sub is not None and k in self.payload:
                _reject_unknown(self.payload[k], sub, f"payload.{k}")
        self.make_grid()

    @classmethod
    def from_dict(cls, d: dict, command: str | None = None) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown(d, TOP_KEYS, "")
        d = dict(d)
        if command is not None:
            if d.get("command", command) != command:
                raise ConfigError(f"config is for {d['command']!r}, not {command!r}", "command")
            d["command"] = command
        if "command" not in d:
            raise ConfigError("missing", "command")
        return cls(**d)

    def make_grid(self) -> Grid:
        g = self.grid
        try:
            dom = DomainSpec(**g["domain"]) if "domain" in g else DomainSpec.unit_cube()
            cells = g.get("cells", g.get("n", 8))
            return Grid(dom, tuple(np.atleast_1d(cells).tolist()))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "grid") from exc

    def to_dict(self) -> dict:
        return {"command": self.command, "grid": self.grid, "seed": self.seed,
                "format": self.format, "payload": self.payload}

    def digest(self) -> str:
        body = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(body.encode()).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    version: str
    command: str
    started: str
    finished: str | None = None
    status: str = "running"
    error: str | None = None
    artifacts: list = dc_field(default_factory=list)
    out_dir: str = "."

    def add(self, path: Path, kind: str):
        rel = os.path.relpath(path, self.out_dir)
        self.artifacts.append({"path": rel, "kind": kind})

    def csvs(self) -> list[dict]:
        return [a for a in self.artifacts if a["path"].endswith(".csv")]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write(self) -> Path:
        path = Path(self.out_dir) / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        d["out_dir"] = str(path.parent)
        return cls(**d)


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# ---------------------------------------------------------------------------
# output helpers


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> Path:
    """CSV with 17 significant digits for floats."""
    columns = columns or list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])
    return path


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x) if np.isfinite(x) else str(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True))
    return path


# ---------------------------------------------------------------------------
# subcommands


def _solver_inputs(cfg: ExperimentConfig, overrides: dict | None = None):
    from dclab.solver import ForcingSpec, ModelParams, SolverConfig

    pl = cfg.payload
    try:
        params = ModelParams(**{**pl.get("params", {}), **(overrides or {})})
        forcing = ForcingSpec(**{"seed": cfg.seed, **pl.get("forcing", {})})
        solver = SolverConfig(**pl.get("solver", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "payload") from exc
    return params, forcing, solver


def _record_solve(rep, out: Path, tag: str, manifest: RunManifest, cfg: ExperimentConfig) -> dict:
    hist = [{"iteration": k, "residual": r} for k, r in enumerate(rep.residual_history)]
    manifest.add(write_csv(out / f"residual_{tag}.csv", hist, ["iteration", "residual"]), "residual_history")
    manifest.add(write_json(out / f"report_{tag}.json", rep.summary()), "solve_report")
    if cfg.format["save_fields"]:
        for name, f in (("velocity", rep.velocity), ("pressure", rep.pressure)):
            for p in save_field(out / f"{name}_{tag}", f):
                manifest.add(p, "field")
    return rep.summary()


def _check_converged(reps):
    bad = [k for k, r in enumerate(reps) if not r.converged]
    if bad:
        raise RunFailure(f"solve did not converge for point(s) {bad}")


def run_solve(cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    from dclab.solver import continuation, solve

    grid = cfg.make_grid()
    params, forcing, solver = _solver_inputs(cfg)
    schedule = cfg.payload.get("eps_schedule")
    if schedule:
        try:
            rep = continuation(params, forcing, grid, schedule, solver)
        except ValueError as exc:
            raise ConfigError(str(exc), "payload.eps_schedule") from exc
        manifest.add(write_csv(out / "continuation.csv", rep.table()), "continuation")
        for k, r in enumerate(rep.reports):
            _record_solve(r, out, f"stage{k}", manifest, cfg)
        _check_converged(rep.reports)
        return
    rep = solve(params, forcing, grid, solver)
    _record_solve(rep, out, "0", manifest, cfg)
    _check_converged([rep])


def run_sweep(cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    from dclab.solver import solve

    pl = cfg.payload
    name = pl.get("parameter", "alpha")
    values = pl.get("values")
    if not values:
        raise ConfigError("sweep needs a non-empty list", "payload.values")
    grid = cfg.make_grid()
    rows, reps = [], []
    for k, val in enumerate(values):
        params, forcing, solver = _solver_inputs(cfg, {name: val})
        rep = solve(params, forcing, grid, solver)
        reps.append(rep)
        s = _record_solve(rep, out, str(k), manifest, cfg)
        row = {"point": k, name: val, "converged": rep.converged, "iterations": rep.iterations,
               "final_residual": s["final_residual"]}
        row.update({key: v for key, v in rep.ledger.items() if isinstance(v, (int, float, np.floating))})
        rows.append(row)
    manifest.add(write_csv(out / "sweep.csv", rows), "sweep")
    _check_converged(reps)


def run_inequality(cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    from dclab.inequalities import InequalityCase, check

    cases = cfg.payload.get("cases")
    if not cases:
        raise ConfigError("need a non-empty list of cases", "payload.cases")
    grid = cfg.make_grid()
    allowed = _field_names(InequalityCase)
    rows = []
    for k, c in enumerate(cases):
        _reject_unknown(c, allowed, f"payload.cases[{k}]")
        try:
            case = InequalityCase(**{"seed": cfg.seed, **c})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), f"payload.cases[{k}]") from exc
        rep = check(case, grid, refine=cfg.payload.get("refine", True))
        write_json(out / f"inequality_{k}.json", rep.to_dict())
        manifest.add(out / f"inequality_{k}.json", "inequality_report")
        rows.append({"case": k, "name": case.name, "p": case.p, "alpha": case.alpha,
                     "ensemble": case.ensemble, "max_ratio": rep.max_ratio,
                     "refined_max_ratio": rep.refined_max_ratio if rep.refined_max_ratio is not None else "",
                     "drift": rep.drift if rep.drift is not None else "", "verdict": rep.verdict})
    manifest.add(write_csv(out / "inequality.csv", rows), "inequality")


def run_muckenhoupt(cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    from dclab.geometry import ap_refinement_sweep

    pl = cfg.payload
    p = pl.get("p", 3.0)
    alphas = pl.get("alphas", [0.0, 1.0, 2.0])
    levels = pl.get("levels", [2, 3, 4, 5])
    rows = []
    dom = cfg.make_grid().domain
    for a in alphas:
        try:
            vals = ap_refinement_sweep(a, p, levels, dom, pl.get("quadrature_order", 8))
        except ValueError as exc:
            raise ConfigError(str(exc), "payload") from exc
        rows += [{"alpha": a, "level": J, "ap_constant": v} for J, v in zip(levels, vals)]
    manifest.add(write_csv(out / "muckenhoupt.csv", rows, ["alpha", "level", "ap_constant"]), "muckenhoupt")


def run_bogovskii(cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    from dclab.fields import ScalarField, full_grad
    from dclab.operators import BogovskiiKernel, bogovskii_many, bogovskii_residual, random_zero_mean

    pl = cfg.payload
    radius = pl.get("radius", 1.0)
    kernel = BogovskiiKernel((0.0, 0.0, 0.0), radius)
    dom = DomainSpec("box", (2 * radius,) * 3, origin=(-radius,) * 3)
    ns = [pl.get("n", 16)] + ([pl["refine_n"]] if pl.get("refine_n") else [])
    p_values = pl.get("p_values", [1.5, 2.0, 3.0])
    rows = []
    for n in ns:
        grid = Grid(dom, (n, n, n))
        inside = kernel.ball_mask(grid)
        seeds = [cfg.seed + k for k in range(pl.get("samples", 4))]
        fs = np.stack([random_zero_mean(kernel, grid, s) for s in seeds])
        us = bogovskii_many(kernel, grid, fs)
        for s, f, u in zip(seeds, fs, us):
            res = bogovskii_residual(kernel, ScalarField(grid, f), u)
            mag = full_grad(grid, u).cell_magnitude()
            row = {"n": n, "seed": s, "residual_interior": res["interior"], "residual_all": res["all_cells"]}
            for p in p_values:
                num = np.sum(mag**p) ** (1 / p)
                den = np.sum(np.abs(f[inside]) ** p) ** (1 / p)
                row[f"ratio_p{p:g}"] = float(num / den)
            rows.append(row)
    manifest.add(write_csv(out / "bogovskii.csv", rows), "bogovskii")


def run_truncate(cfg: ExperimentConfig, out: Path, manifest: RunManifest):
    from dclab.truncation import TruncationLevels, demo_ensemble, level_decay, null_sequence, select_levels

    pl = cfg.payload
    grid = cfg.make_grid()
    s = pl.get("s", 2.0)
    try:
        levels = TruncationLevels(pl.get("j0", 0), pl.get("J", 3))
    except ValueError as exc:
        raise ConfigError(str(exc), "payload") from exc
    if pl.get("null_members"):
        us = null_sequence(grid, pl["null_members"], s, seed=cfg.seed)
    else:
        us = demo_ensemble(grid, levels, s, pl.get("per_level", 2), seed=cfg.seed)
    levels = select_levels(grid, us, levels.j0, levels.J, s)
    tab = level_decay(grid, us, levels, s, pl.get("collar", 2))
    manifest.add(write_csv(out / "decay.csv", tab.rows), "decay_table")
    env = [{"j": j, "envelope": v, "bound_shape": 2.0 ** (-j / s)} for j, v in tab.envelope.items()]
    manifest.add(write_csv(out / "decay_envelope.csv", env, ["j", "envelope", "bound_shape"]), "decay_envelope")
    write_json(out / "decay_summary.json", {"exponent": tab.exponent, "c_decay": tab.c_decay,
                                            "c_gradient": tab.c_gradient, "s": s})
    manifest.add(out / "decay_summary.json", "decay_summary")


RUNNERS = {
    "solve": run_solve,
    "sweep": run_sweep,
    "inequality": run_inequality,
    "muckenhoupt": run_muckenhoupt,
    "bogovskii": run_bogovskii,
    "truncate": run_truncate,
}


# ---------------------------------------------------------------------------
# plot scripts


def _plot_lines(kind: str, rel: str, path: Path) -> list[str]:
    header = path.read_text().splitlines()[0].split(",")
    col = {c: k + 1 for k, c in enumerate(header)}
    q = f"'{rel}'"
    if kind == "residual_history":
        return ["set logscale y", f"plot {q} using 1:2 with lines title 'residual'"]
    if kind == "continuation":
        return ["set logscale xy", "set xlabel 'eps'",
                f"plot {q} using {col['eps']}:{col['regularization_share']} with linespoints title 'regularization share', \\",
                f"     {q} using {col['eps']}:{col['estimate_ratio']} with linespoints title 'estimate ratio'"]
    if kind == "muckenhoupt":
        alphas = sorted({float(r.split(",")[0]) for r in path.read_text().splitlines()[1:]})
        parts = [f"{q} using (column(1)=={a:.17g} ? column(2) : 1/0):3 with linespoints title 'alpha={a:g}'"
                 for a in alphas]
        return ["set logscale y", "set xlabel 'level'", "plot " + ", \\\n     ".join(parts)]
    if kind == "decay_envelope":
        return ["set logscale y", "set xlabel 'j'",
                f"plot {q} using 1:2 with linespoints title 'envelope', {q} using 1:3 with lines title '2^(-j/s)'"]
    if kind == "sweep":
        x = header[1]
        return [f"set xlabel '{x}'", f"plot {q} using 2:{col['iterations']} with linespoints title 'iterations'"]
    cols = [c for c in header if c not in ("seed", "n", "case", "point", "m", "j")]
    return [f"plot {q} using 0:{col[cols[-1]]} with points title '{cols[-1]}'"] if cols else []


def emit_plots(manifest: RunManifest) -> list[Path]:
    """Write one gnuplot script per CSV artifact (continuation stages share one script)."""
    csvs = manifest.csvs()
    if not csvs:
        raise ValueError("manifest lists no CSV artifacts")
    out = Path(manifest.out_dir)
    for a in csvs:
        if not (out / a["path"]).is_file():
            raise FileNotFoundError(f"missing CSV {a['path']}")
    scripts = []
    stages = [a for a in csvs if a["kind"] == "residual_history" and "stage" in a["path"]]
    if stages:
        parts = [f"'{a['path']}' using 1:2 with lines title '{Path(a['path']).stem.split('_')[-1]}'"
                 for a in stages]
        p = out / "plot_continuation_residuals.gp"
        p.write_text("set logscale y\nplot " + ", \\\n     ".join(parts) + "\n")
        scripts.append(p)
    for a in csvs:
        if a in stages:
            continue
        lines = _plot_lines(a["kind"], a["path"], out / a["path"])
        if not lines:
            continue
        p = out / f"plot_{Path(a['path']).stem}.gp"
        p.write_text("set datafile separator ','\nset key autotitle columnhead\n" + "\n".join(lines) + "\n")
        scripts.append(p)
    for p in scripts:
        manifest.add(p, "plot_script")
    return scripts


# ---------------------------------------------------------------------------
# driver


def run(cfg: ExperimentConfig, out_dir) -> RunManifest:
    """Run ``cfg`` writing into ``out_dir``; the manifest is written even on failure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(cfg.digest(), __version__, cfg.command, _now(), out_dir=str(out))
    write_json(out / "config.json", cfg.to_dict())
    manifest.add(out / "config.json", "config")
    try:
        RUNNERS[cfg.command](cfg, out, manifest)
        if cfg.format["plots"] and manifest.csvs():
            emit_plots(manifest)
        manifest.status = "ok"
    except ConfigError as exc:
        manifest.status, manifest.error = "config_error", str(exc)
        raise
    except Exception as exc:
        manifest.status, manifest.error = "failed", f"{type(exc).__name__}: {exc}"
        raise
    finally:
        manifest.finished = _now()
        manifest.write()
    return manifest


def _failure_manifest(command: str, out: Path, error: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    m = RunManifest("", __version__, command, _now(), _now(), "config_error", error, out_dir=str(out))
    m.write()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dclab", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON configuration file")
    parser.add_argument("--out", help="output directory (overridden by DCLAB_OUT)")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    override = os.environ.get("DCLAB_OUT") or args.out
    out = Path(override or "dclab_out")
    try:
        raw = json.loads(Path(args.config).read_text())
        if isinstance(raw, dict):
            if args.seed is not None:
                raw["seed"] = args.seed
            cfg_out = raw.pop("out", None)
            out = Path(override or cfg_out or "dclab_out")
        cfg = ExperimentConfig.from_dict(raw, args.command)
    except (OSError, json.JSONDecodeError, ConfigError, TypeError) as exc:
        print(f"dclab: configuration error: {exc}", file=sys.stderr)
        _failure_manifest(args.command, out, str(exc))
        return EXIT_CONFIG
    try:
        manifest = run(cfg, out)
    except ConfigError as exc:
        print(f"dclab: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        from dclab.solver import NumericalFailure

        if isinstance(exc, (NumericalFailure, RunFailure, FloatingPointError, np.linalg.LinAlgError)):
            print(f"dclab: numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        print(f"dclab: {cfg.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(json.dumps({"status": manifest.status, "out": str(out), "artifacts": len(manifest.artifacts)}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
