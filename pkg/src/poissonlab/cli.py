"""Command-line experiment harness.

    poissonlab <simulate|clark-ocone|girsanov-check|transport-check|duality>
               --config run.json [--seed N] [--workers N] [--out DIR]

Exit codes: 0 when every asserted tolerance passes, 1 when one fails,
2 when the configuration is invalid.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import sys
import time
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import jsonschema
import numpy as np
import scipy

from .clark_ocone import TimeGrid, residual
from .configuration import Configuration, simulate_replicates
from .errors import ConfigurationError, ContractError, PoissonLabError
from .functionals import Functional, functional_from_spec
from .girsanov import (Control, constant_control, doleans_batch, threshold_control, tilted_expectation_direct,
                       tilted_expectation_is, weight_integral)
from .intensity import IntensityModel, MarkFunction, StepFunction, Window, model_from_spec, window_mass
from .rng import RandomStreams
from .stats import Estimate, agree, mean_se
from .transport import (BufferPlan, build_map_1d, gamma_transform, h2_stability_check, hat_control,
                        hat_fixed_point_error, interval_mass_check, piece_map, plan_buffer, pushforward_residual,
                        tilde_control, tilde_fixed_point_error)
from .variational import Budget, ControlFamily, SlabField, dual_transport, duality_report

log = logging.getLogger("poissonlab")

COMMANDS = ("simulate", "clark-ocone", "girsanov-check", "transport-check", "duality")

_vec = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_edges = {"type": "array", "items": {"type": "number"}, "minItems": 2}

SCHEMA = {
    "type": "object",
    "required": ["model", "window"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "workers": {"type": "integer", "minimum": 1},
        "out": {"type": "string"},
        "model": {"type": "object", "required": ["name"], "properties": {"name": {"type": "string"}}},
        "window": {"type": "object", "required": ["lower", "upper"],
                   "properties": {"lower": _vec, "upper": _vec}},
        "padding": {"oneOf": [{"const": "auto"}, {"type": "number", "minimum": 0}]},
        "functional": {"type": "object", "required": ["name"],
                       "properties": {"name": {"enum": ["count", "constant", "linear", "quadratic", "saturating"]}}},
        "controls": {"type": "array", "items": {
            "type": "object",
            "properties": {"kind": {"enum": ["constant", "step", "threshold"]}, "edges": _edges},
        }},
        "family": {"type": "object", "required": ["partition"], "properties": {
            "edges": _edges,
            "partition": {"type": "array", "items": _edges, "minItems": 1},
            "bounds": {"oneOf": [{"const": "auto"}, {"type": "array", "items": {"type": "number"},
                                                      "minItems": 2, "maxItems": 2}]},
        }},
        "grids": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "budgets": {"type": "object", "properties": {
            "n": {"type": "integer", "minimum": 2},
            "n_outer": {"type": "integer", "minimum": 2},
            "n_inner": {"type": "integer", "minimum": 2},
            "optimizer": {"type": "object"},
        }},
        "targets": {"type": "object"},
        "options": {"type": "object"},
    },
}


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------- config


def load_config(path: str | Path, seed: int | None = None) -> tuple[dict, bytes]:
    try:
        raw = Path(path).read_bytes()
        cfg = json.loads(raw)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
    if seed is not None:
        cfg["seed"] = int(seed)
    if "seed" not in cfg:
        raise ConfigError("a seed is required (config field 'seed' or --seed)")
    return cfg, raw


def control_from_spec(spec: Mapping, dimension: int) -> Control:
    kind = spec.get("kind", "constant")
    lower = spec.get("lower", [0.0] * dimension)
    upper = spec.get("upper", [1.0] * dimension)
    edges = spec.get("edges", [0.0, 1.0] if kind != "threshold" else [0.0, 0.5, 1.0])
    if kind == "constant":
        return constant_control(float(spec["value"]), lower, upper, edges)
    if kind == "threshold":
        return threshold_control(float(spec["first"]), float(spec["then"]), lower, upper, edges,
                                 int(spec.get("threshold", 1)))
    partition = [np.asarray(e, dtype=float) for e in spec["partition"]]
    shape = tuple(e.size - 1 for e in partition)
    vals = np.asarray(spec["values"], dtype=float).reshape((len(edges) - 1,) + shape)
    support = Window([e[0] for e in partition], [e[-1] for e in partition])
    return Control(edges, [StepFunction(partition, v) for v in vals], support, name=spec.get("name", "step"))


@dataclass
class Experiment:
    cfg: dict
    seed: int
    workers: int
    model: IntensityModel
    window: Window
    functional: Functional | None
    controls: list[Control]
    budgets: dict
    targets: dict
    options: dict

    @property
    def streams(self) -> RandomStreams:
        return RandomStreams(self.seed, "cli")

    def n(self, key: str = "n", default: int = 10_000) -> int:
        return int(self.budgets.get(key, default))

    def require_functional(self) -> Functional:
        if self.functional is None:
            raise ConfigError("this subcommand needs a 'functional' entry")
        return self.functional

    def family(self) -> ControlFamily:
        spec = self.cfg.get("family")
        if spec is None:
            raise ConfigError("the duality subcommand needs a 'family' entry")
        edges = spec.get("edges", [0.0, 1.0])
        bounds = spec.get("bounds", "auto")
        if bounds == "auto":
            return ControlFamily.for_functional(self.require_functional(), edges, spec["partition"])
        return ControlFamily(edges, spec["partition"], float(bounds[0]), float(bounds[1]))

    def plan(self, controls: Sequence[Control]) -> BufferPlan:
        pad = self.cfg.get("padding", "auto")
        try:
            return plan_buffer(self.window, controls, self.model, padding=None if pad == "auto" else float(pad))
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc


def build_experiment(cfg: dict, workers: int | None = None) -> Experiment:
    try:
        model = model_from_spec(cfg["model"])
        window = Window(cfg["window"]["lower"], cfg["window"]["upper"])
        model.check_window(window)
        d = model.dimension
        fspec = cfg.get("functional")
        F = functional_from_spec(fspec, d) if fspec is not None else None
        controls = [control_from_spec(c, d) for c in cfg.get("controls", [])]
    except (KeyError, TypeError, ValueError, PoissonLabError) as exc:
        raise ConfigError(f"cannot build experiment: {exc}") from exc
    return Experiment(cfg, int(cfg["seed"]), int(workers or cfg.get("workers", 1)), model, window, F, controls,
                      dict(cfg.get("budgets", {})), dict(cfg.get("targets", {})), dict(cfg.get("options", {})))


# ---------------------------------------------------------------- output


Row = tuple[str, float, float, float, bool]
SUMMARY_HEADER = ("quantity", "estimate", "SE", "target", "pass")


def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return "pass" if x else "fail"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, np.integer):
        return str(int(x))
    return x


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)  # RFC 4180: CRLF, minimal quoting
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(x) for x in r])
    return path


def emit_plotdata(results: Mapping[str, Sequence[Sequence[float]]], out_dir: str | Path) -> list[Path]:
    """One whitespace-separated x/y[/se] text file per series; empty series give empty files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not results:
        p = out / "plotdata.txt"
        p.write_text("")
        return [p]
    paths = []
    for name, rows in results.items():
        p = out / f"{name}.txt"
        rows = list(rows)
        text = "".join(" ".join(repr(float(v)) for v in r) + "\n" for r in rows)
        p.write_text(text)
        paths.append(p)
    return paths


def _versions() -> dict:
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"poissonlab": own, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "jsonschema": metadata.version("jsonschema")}


def write_manifest(out: Path, command: str, cfg: dict, raw: bytes, seed: int, workers: int, wall: float,
                   code: int, files: Sequence[Path]) -> Path:
    doc = {
        "command": command,
        "config": cfg,
        "config_sha256": hashlib.sha256(raw).hexdigest(),
        "seed": seed,
        "workers": workers,
        "versions": _versions(),
        "wall_time_s": round(wall, 3),
        "exit_code": code,
        "files": sorted(p.name for p in files),
    }
    p = out / "manifest.json"
    p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return p


def _row(name: str, est: Estimate | float, target: float, passed: bool) -> Row:
    if isinstance(est, Estimate):
        return (name, float(est.value), float(est.se), float(target), bool(passed))
    return (name, float(est), math.nan, float(target), bool(passed))


# ---------------------------------------------------------------- commands


@dataclass
class Outcome:
    summary: list[Row]
    tables: dict[str, tuple[Sequence[str], list[Sequence]]]
    plots: dict[str, list[Sequence[float]]]
    text: str = ""


def cmd_simulate(ex: Experiment) -> Outcome:
    n = ex.n()
    batch = simulate_replicates(ex.model, ex.window, n, ex.streams.child("simulate"), ex.workers)
    counts = batch.counts()
    mass = window_mass(ex.model, ex.window)
    mean = mean_se(counts)
    var = float(np.var(counts, ddof=1))
    summary = [_row("count mean", mean, mass, mean.within(mass)),
               _row("count variance / mass", var / mass if mass > 0 else math.nan, 1.0,
                    abs(var / mass - 1.0) <= ex.options.get("variance_tolerance", 0.05) if mass > 0 else False)]
    tables = {"counts": (("replicate", "count"), [(i, int(c)) for i, c in enumerate(counts)])}
    if ex.options.get("write_points", True):
        d = ex.model.dimension
        header = ("replicate", "time") + tuple(f"u{k}" for k in range(d))
        tables["points"] = (header, [(int(o), float(t), *map(float, m))
                                     for o, t, m in zip(batch.owner, batch.times, batch.marks)])
    return Outcome(summary, tables, {})


def cmd_clark_ocone(ex: Experiment) -> Outcome:
    F = ex.require_functional()
    grids = ex.cfg.get("grids", [8, 32])
    method = ex.options.get("expectation", "martingale")
    tol = float(ex.options.get("relative_tolerance", 0.05))
    reports = []
    for m in grids:
        reports.append(residual(F, ex.model, ex.window, TimeGrid.uniform(m), ex.n("n_outer", 500),
                                ex.n("n_inner", 200), ex.streams.child(f"clark-ocone/m{m}"), method, ex.workers))
        log.info("m=%d residual %.6g +- %.3g (relative %.4f)", m, reports[-1].residual, reports[-1].se,
                 reports[-1].relative)
    rows = [(r.m, r.n_inner, r.n_outer, r.residual, r.se, r.sd_F, r.relative, r.expectation.value, r.expectation.se)
            for r in reports]
    last = reports[-1]
    summary = [_row(f"relative residual m={last.m}", last.relative, tol, last.relative <= tol)]
    for a, b in zip(reports, reports[1:]):
        summary.append((f"residual m={b.m} vs m={a.m} (+2 SE)", b.residual, b.se, a.residual,
                        b.residual <= a.residual + 2 * b.se))
    for r in reports:
        mm, ms = r.martingale_mean()
        summary.append((f"integral mean m={r.m}", mm, ms, 0.0, abs(mm) <= 3 * ms + 1e-12))
    header = ("m", "n_inner", "n_outer", "residual", "SE", "sd_F", "relative", "expectation", "expectation_SE")
    return Outcome(summary, {"residuals": (header, rows)},
                   {"residual_vs_m": [(r.m, r.residual, r.se) for r in reports]})


def _tilted_count_target(F: Functional, phi: Control, model: IntensityModel) -> float | None:
    """E under the tilt of c * N_A for deterministic controls, by exact cell integration."""
    if not (F.kind == "count" and phi.deterministic):
        return None
    c = F.scale
    A = F.window
    base = window_mass(model, Window(A.lower, A.upper))
    lo = np.maximum(A.lo, phi.support.lo)
    hi = np.minimum(A.hi, phi.support.hi)
    total = 0.0
    for i in range(phi.m):
        extra = 0.0
        if np.all(lo < hi):
            extra = weight_integral(model, phi.weight(i, None), Window(lo, hi), lambda x: x)
        total += phi.width(i) * (base + extra)
    return c * total * (A.time[1] - A.time[0])


def cmd_girsanov_check(ex: Experiment) -> Outcome:
    F = ex.require_functional()
    n = ex.n()
    summary, rows = [], []
    for j, phi in enumerate(ex.controls):
        st = ex.streams.child(f"girsanov/{j}")
        w = ex.window.hull(Window(phi.support.lower, phi.support.upper))
        batch = simulate_replicates(ex.model, w, n, st.child("doleans"), ex.workers)
        dol = mean_se(doleans_batch(phi, batch, ex.model, w))
        isv = tilted_expectation_is(F, phi, ex.model, w, n, st, ex.workers)
        direct = tilted_expectation_direct(F, phi, ex.model, w, n, st, ex.workers)
        target = _tilted_count_target(F, phi, ex.model)
        summary.append(_row(f"{phi.name}: E doleans", dol, 1.0, dol.within(1.0)))
        summary.append(_row(f"{phi.name}: IS - direct", isv - direct, 0.0, agree(isv, direct)))
        if target is not None:
            summary.append(_row(f"{phi.name}: IS tilted mean", isv, target, isv.within(target)))
            summary.append(_row(f"{phi.name}: direct tilted mean", direct, target, direct.within(target)))
        rows.append((phi.name, dol.value, dol.se, isv.value, isv.se, direct.value, direct.se,
                     math.nan if target is None else target))
    header = ("control", "doleans_mean", "doleans_SE", "is_mean", "is_SE", "direct_mean", "direct_SE", "target")
    return Outcome(summary, {"girsanov": (header, rows)}, {})


def _test_weights(k: int, window: Window, rng: np.random.Generator) -> list[MarkFunction]:
    out = []
    for j in range(k):
        a = rng.uniform(0.0, 1.0, window.dimension)
        b = rng.uniform(0.5, 4.0, window.dimension)
        c = rng.uniform(0.0, 2 * math.pi, window.dimension)
        out.append(MarkFunction(lambda u, a=a, b=b, c=c: np.prod(1.0 + a * np.sin(b * u + c), axis=1),
                                window.lower, window.upper, name=f"w{j}"))
    return out


def cmd_transport_check(ex: Experiment) -> Outcome:
    if not ex.controls:
        raise ConfigError("transport-check needs at least one control")
    plan = ex.plan(ex.controls)
    opts = ex.options
    gen = ex.streams.child("transport/weights").generator()
    weights = _test_weights(int(opts.get("test_weights", 20)), ex.window, gen)
    pts = plan.padded.lo + (plan.padded.hi - plan.padded.lo) * gen.random((200, ex.model.dimension))
    n_cfg = int(opts.get("configurations", 100))
    configs = list(simulate_replicates(ex.model, plan.padded, n_cfg, ex.streams.child("transport/configs")))
    summary, rows = [], []
    for phi in ex.controls:
        pasts = [None] if phi.deterministic else configs[: int(opts.get("pasts", 5))]
        push = inv = 0.0
        for past in pasts:
            for i in range(phi.m):
                tm = piece_map(phi, i, past, ex.model, plan)
                push = max([push] + [pushforward_residual(tm, f) for f in weights])
                inv = max(inv, float(np.max(np.abs(tm.inverse(tm.forward(pts)) - pts))),
                          float(np.max(np.abs(tm.forward(tm.inverse(pts)) - pts))))
        summary.append(_row(f"{phi.name}: max pushforward residual", push, 1e-6, push <= 1e-6))
        summary.append(_row(f"{phi.name}: max inverse composition", inv, 1e-9, inv <= 1e-9))
        if phi.deterministic and ex.model.dimension == 1:
            tm = build_map_1d(ex.model, phi, 0, None, plan.domain, phi.support)
            a, b = phi.support.lower[0], phi.support.upper[0]
            iv = max(interval_mass_check(tm, lo, hi) for lo, hi in
                     [(a, b), (a - 0.5, b + 0.5), (0.5 * (a + b), b + 1.0), (a - 1.0, 0.5 * (a + b))])
            summary.append(_row(f"{phi.name}: interval mass check", iv, 1e-9, iv <= 1e-9))
        stab = h2_stability_check(phi, ex.model, pts, plan, pasts=None if phi.deterministic else pasts)
        summary.append(_row(f"{phi.name}: stability monotone", float(stab.forward[-1]), 0.0, stab.monotone))
        for nn, df, di in zip(stab.ns, stab.forward, stab.inverse):
            rows.append((phi.name, "stability", nn, df, di))
        if not phi.deterministic:
            tilde, hat = tilde_control(phi, ex.model, plan), hat_control(phi, ex.model, plan)
            marks = pts[:20]
            te = max(tilde_fixed_point_error(phi, tilde, om, marks, ex.model, plan) for om in configs)
            he = max(hat_fixed_point_error(phi, hat, om, marks, ex.model, plan) for om in configs)
            rt = 0.0
            for om in configs:
                back = gamma_transform(phi, gamma_transform(phi, om, "-", ex.model, plan), "+", ex.model, plan,
                                       control_omega=om)
                if len(om):
                    rt = max(rt, float(np.max(np.abs(back.marks - om.marks))))
            summary.append(_row(f"{phi.name}: tilde fixed point", te, 1e-9, te <= 1e-9))
            summary.append(_row(f"{phi.name}: hat fixed point", he, 1e-9, he <= 1e-9))
            summary.append(_row(f"{phi.name}: configuration round trip", rt, 1e-9, rt <= 1e-9))
    return Outcome(summary, {"stability": (("control", "check", "n", "forward", "inverse"), rows)}, {})


def _closed_form_targets(ex: Experiment, family: ControlFamily) -> dict:
    F = ex.functional
    t = {}
    if F is not None and F.kind == "count":
        c = F.scale
        A = F.window
        lam = window_mass(ex.model, Window(A.lower, A.upper)) * (A.time[1] - A.time[0])
        t["lhs"] = t["minimum"] = lam * -math.expm1(-c)
        if family.n_params == 1 and family.support == Window(A.lower, A.upper) and A.time == (0.0, 1.0):
            t["params"] = math.expm1(-c)
    elif F is not None and F.is_constant():
        val = F.evaluate(Configuration.empty(ex.model.dimension))
        t["lhs"] = t["minimum"] = val
        t["params"] = 0.0
    t.update(ex.targets)
    return t


def _scan(ex: Experiment, family: ControlFamily, plan: BufferPlan, n: int) -> list[tuple[float, float, float]]:
    """Transport-form objective along the single parameter of a one-parameter family."""
    if family.n_params != 1:
        return []
    k = int(ex.options.get("scan_points", 25))
    hi = min(family.upper, float(ex.options.get("scan_upper", 1.0)))
    field = SlabField(ex.model, plan.padded, n, ex.streams.child("scan"), workers=ex.workers,
                      breaks=plan.inner.lower[:1] + plan.inner.upper[:1])
    out = []
    for x in np.linspace(family.lower, hi, k):
        e = dual_transport(ex.functional, family.control([x]), ex.model, plan, n, ex.streams, field=field)
        out.append((float(x), e.value, e.se))
    return out


def cmd_duality(ex: Experiment) -> Outcome:
    F = ex.require_functional()
    family = ex.family()
    plan = ex.plan(family.extremes())
    ob = dict(ex.budgets.get("optimizer", {}))
    budget = Budget(n=ex.n("n", 20_000), n_inner=ex.n("n_inner", 200), **ob)
    grid = ex.cfg.get("grids", [None])[0]
    grid = TimeGrid.uniform(grid).edges if grid else None
    rep = duality_report(F, family, ex.model, plan, budget, ex.streams.child("duality"), grid=grid,
                         targets=_closed_form_targets(ex, family), workers=ex.workers)
    summary = [(r.quantity, r.estimate, r.se, r.target, r.passed) for r in rep.rows]
    trace = [(i, v) for i, v in enumerate(x for tr in rep.traces for x in tr)]
    plots = {"dual_trace": trace}
    scan = _scan(ex, family, plan, int(ex.options.get("scan_n", budget.n_check)))
    if scan:
        plots["dual_vs_theta"] = scan
    params = [(j, float(p)) for j, p in enumerate(rep.params)]
    return Outcome(summary, {"parameters": (("index", "value"), params)}, plots, rep.table())


HANDLERS: dict[str, Callable[[Experiment], Outcome]] = {
    "simulate": cmd_simulate,
    "clark-ocone": cmd_clark_ocone,
    "girsanov-check": cmd_girsanov_check,
    "transport-check": cmd_transport_check,
    "duality": cmd_duality,
}


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="poissonlab", description="Poisson-space Monte Carlo verification harness.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON experiment configuration")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--workers", type=int, default=None, help="thread count (results do not depend on it)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(command: str, cfg: dict, raw: bytes, out: Path, workers: int | None = None) -> int:
    start = time.perf_counter()
    ex = build_experiment(cfg, workers)
    try:
        res = HANDLERS[command](ex)
    except (ContractError, ConfigurationError) as exc:
        raise ConfigError(str(exc)) from exc
    out.mkdir(parents=True, exist_ok=True)
    files = [write_csv(out / "summary.csv", SUMMARY_HEADER, res.summary)]
    for name, (header, rows) in res.tables.items():
        files.append(write_csv(out / f"{name}.csv", header, rows))
    if res.plots:
        files.extend(emit_plotdata(res.plots, out / "plotdata"))
    ok = all(r[4] for r in res.summary)
    if res.text:
        print(res.text)
    else:
        for r in res.summary:
            print(f"{r[0]:<48} {r[1]:>14.6g} {r[2]:>12.4g} {r[3]:>12.6g}  {'pass' if r[4] else 'FAIL'}")
    code = 0 if ok else 1
    write_manifest(out, command, cfg, raw, ex.seed, ex.workers, time.perf_counter() - start, code, files)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, raw = load_config(args.config, args.seed)
        out = Path(args.out or cfg.get("out", "results"))
        return run(args.command, cfg, raw, out, args.workers)
    except ConfigError as exc:
        print(f"poissonlab: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
