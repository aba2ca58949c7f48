"""Command-line driver: config file in, CSV tables and a JSON manifest out.

Subcommands::

    widedegen run --config CFG [--out DIR] [--seed N] [--threads T]
    widedegen solve-only --config CFG [--out DIR]
    widedegen report-only --config CFG [--out DIR]
    widedegen gauge-selftest BODY [--samples N] [--seed N]

Exit codes: 0 all checks pass, 1 a check or stage failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .convex_gauge import (
    Ball,
    BodySpecError,
    ConvexBody,
    Polytope,
    bisection_gauge,
    body_from_dict,
    dual_boundary_directions,
    g_delta,
    inequality_suite,
    load_body,
)
from .errors import ConvergenceFailure, InvalidArgument
from .families import ProfileOracle, build_f, build_g
from .harness import (
    BallWindow,
    cascade,
    continuity_report,
    epsilon_convergence,
    gdelta_limit_check,
    initial_mu,
    level_measures,
    subsolution_energy_check,
)
from .integrand import Box, PrototypeIntegrand, coefficient_from_dict
from .regularize import RegularizedIntegrand, assemble
from .solver import (
    DiscreteSolution,
    Grid,
    apriori_report,
    build_grid,
    max_principle_check,
    nodal_field,
    read_solution,
    solve_dirichlet,
    write_solution,
)

log = logging.getLogger("widedegen")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
BUNDLED = ("affine-smoke", "profile-p2")
TOP_KEYS = {"name", "seed", "body", "integrand", "grid", "f", "g", "epsilons", "deltas", "regularize", "solver", "harness", "output"}
HARNESS_KEYS = {"cascade", "convergence", "continuity", "subsolution", "refinement"}


class ConfigError(InvalidArgument):
    pass


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


# ---------------------------------------------------------------------------
# config


@dataclass
class ExperimentConfig:
    raw: dict
    name: str
    seed: int
    body: ConvexBody
    p: float
    coefficient: dict
    box: list
    h: float
    f_spec: dict
    g_spec: dict
    epsilons: list[float]
    deltas: list[float]
    K: float | None
    tol: float
    harness: dict
    output: str
    source: str = ""

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    text = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def _unit_interval(values, label: str) -> list[float]:
    _require(isinstance(values, list) and len(values) > 0, f"{label}: expected a non-empty list")
    out = []
    for v in values:
        _require(isinstance(v, (int, float)) and not isinstance(v, bool), f"{label}: {v!r} is not a number")
        _require(0.0 < v <= 1.0, f"{label}: {v!r} is outside (0, 1]")
        out.append(float(v))
    return out


def load_config_text(path: str) -> tuple[str, str]:
    """Return (text, source) for a file path or a bundled config name."""
    p = Path(path)
    if p.exists():
        return p.read_text(), str(p)
    name = path[:-5] if path.endswith(".json") else path
    if name in BUNDLED:
        return resources.files("widedegen").joinpath(f"data/{name}.json").read_text(), f"bundled:{name}"
    raise ConfigError(f"config {path!r} not found (bundled configs: {', '.join(BUNDLED)})")


def parse_config(raw: dict, source: str = "") -> ExperimentConfig:
    _require(isinstance(raw, dict), "config: expected a JSON object")
    unknown = set(raw) - TOP_KEYS
    _require(not unknown, f"config: unknown keys {sorted(unknown)}")
    for key in ("body", "integrand", "grid", "f", "g", "epsilons"):
        _require(key in raw, f"config: missing '{key}'")
    epsilons = _unit_interval(raw["epsilons"], "epsilons")
    deltas = _unit_interval(raw.get("deltas", [0.1]), "deltas")
    try:
        body = body_from_dict(raw["body"], "body")
    except BodySpecError as exc:
        raise ConfigError(str(exc)) from exc
    integ = raw["integrand"]
    _require(isinstance(integ, dict) and integ.get("kind", "prototype") == "prototype", "integrand.kind: only 'prototype' is available")
    p = integ.get("p")
    _require(isinstance(p, (int, float)) and p > 1, "integrand.p: expected a number > 1")
    grid = raw["grid"]
    _require(isinstance(grid, dict) and "box" in grid and "h" in grid, "grid: expected {box, h}")
    box = grid["box"]
    _require(isinstance(box, list) and len(box) == body.dim, f"grid.box: expected {body.dim} intervals")
    h = grid["h"]
    _require(isinstance(h, (int, float)) and h > 0, "grid.h: expected a positive number")
    reg = raw.get("regularize", {})
    _require(isinstance(reg, dict) and set(reg) <= {"K"}, "regularize: only 'K' is accepted")
    K = reg.get("K")
    _require(K is None or (isinstance(K, (int, float)) and K > 0), "regularize.K: expected a positive number or null")
    solver = raw.get("solver", {})
    _require(isinstance(solver, dict) and set(solver) <= {"tol"}, "solver: only 'tol' is accepted")
    harness = raw.get("harness", {})
    _require(isinstance(harness, dict), "harness: expected an object")
    unknown = set(harness) - HARNESS_KEYS
    _require(not unknown, f"harness: unknown switches {sorted(unknown)}")
    cfg = ExperimentConfig(
        raw=raw,
        name=str(raw.get("name", "experiment")),
        seed=int(raw.get("seed", 0)),
        body=body,
        p=float(p),
        coefficient=integ.get("coefficient", {"kind": "constant", "params": {"value": 1.0}}),
        box=box,
        h=float(h),
        f_spec=raw["f"],
        g_spec=raw["g"],
        epsilons=epsilons,
        deltas=deltas,
        K=None if K is None else float(K),
        tol=float(solver.get("tol", 1e-9)),
        harness=harness,
        output=str(raw.get("output", "out")),
        source=source,
    )
    # resolve every named family and the grid now so errors surface before solving
    try:
        build_f(cfg.f_spec, body.dim)
        build_g(cfg.g_spec, body.dim)
        coefficient_from_dict(cfg.coefficient, body.dim)
        build_grid(cfg.box, cfg.h)
    except InvalidArgument as exc:
        raise ConfigError(str(exc)) from exc
    if "refinement" in harness:
        _check_refinement(cfg)
    return cfg


def _check_refinement(cfg: ExperimentConfig):
    ref = cfg.harness["refinement"]
    _require(isinstance(ref, dict) and isinstance(ref.get("h"), list) and len(ref["h"]) >= 2, "harness.refinement: expected {h: [at least two spacings]}")
    _require(cfg.g_spec.get("family") == "profile", "harness.refinement: needs the 'profile' g family")
    _require(cfg.f_spec.get("family") == "constant", "harness.refinement: needs a constant f")
    gp = cfg.g_spec.get("params", {})
    _require(float(cfg.f_spec.get("params", {}).get("value", 0.0)) == float(gp.get("c", math.nan)), "harness.refinement: f must equal the profile's c")
    _require(float(gp.get("p", 2.0)) == cfg.p, "harness.refinement: profile p differs from integrand p")
    _require(float(gp.get("eps", 0.0)) > 0, "harness.refinement: profile eps must be positive")
    body = cfg.body
    _require(isinstance(body, Ball) and body.radius == 1.0, "harness.refinement: the profile solution needs the unit ball")
    coef = cfg.coefficient
    _require(coef.get("kind", "constant") == "constant" and float(coef.get("params", {}).get("value", 1.0)) == 1.0, "harness.refinement: needs coefficient 1")


def load_config(path: str, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    text, source = load_config_text(path)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if seed is not None:
        raw["seed"] = seed
    cfg = parse_config(raw, source)
    if out is not None:
        cfg.output = out
    return cfg


# ---------------------------------------------------------------------------
# output helpers


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    name: str
    seed: int
    stages: list[dict] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    checks: dict = field(default_factory=dict)

    def stage(self, name: str, status: str, seconds: float, detail: str = ""):
        self.stages.append({"stage": name, "status": status, "seconds": round(seconds, 4), "detail": detail})

    @property
    def passed(self) -> bool:
        return all(s["status"] == "ok" for s in self.stages) and all(self.checks.values())

    def write(self, out: Path) -> dict:
        files = {name: _sha256(out / name) for name in sorted(self.outputs) if (out / name).exists()}
        content = json.dumps({"config": self.config_hash, "files": files, "checks": self.checks}, sort_keys=True)
        doc = {
            "name": self.name,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "manifest_hash": hashlib.sha256(content.encode()).hexdigest(),
            "stages": self.stages,
            "outputs": files,
            "checks": self.checks,
            "passed": self.passed,
        }
        (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return doc


# ---------------------------------------------------------------------------
# stages


@dataclass
class Built:
    body: ConvexBody
    integrand: PrototypeIntegrand
    grid: Grid
    f: object
    g: object
    regularized: RegularizedIntegrand | None = None


def stage_body(cfg: ExperimentConfig) -> ConvexBody:
    return cfg.body


def stage_integrand(cfg: ExperimentConfig, body: ConvexBody) -> Built:
    lo, hi = np.asarray(cfg.box, float).T
    coef = coefficient_from_dict(cfg.coefficient, body.dim)
    F = PrototypeIntegrand(cfg.p, coef, body, Box(lo, hi))
    grid = build_grid(cfg.box, cfg.h)
    return Built(body, F, grid, build_f(cfg.f_spec, body.dim), build_g(cfg.g_spec, body.dim))


def _auto_K(built: Built, grid: Grid) -> float:
    """Gradient threshold covering the discrete boundary data with 10% margin."""
    dg = grid.gradient(nodal_field(grid, built.g, "g"))
    _, R_E = built.body.radii()
    return max(1.1 * float(np.linalg.norm(dg, axis=-1).max()), 1.1 * R_E)


def stage_regularize(cfg: ExperimentConfig, built: Built) -> RegularizedIntegrand:
    K = cfg.K if cfg.K is not None else _auto_K(built, built.grid)
    built.regularized = assemble(built.integrand, K, cfg.epsilons[0], seed=cfg.seed)
    return built.regularized


def _solve_one(reg: RegularizedIntegrand, grid: Grid, f, g, eps: float, tol: float) -> DiscreteSolution:
    return solve_dirichlet(reg.with_epsilon(eps), grid, f, g, tol=tol)


def stage_solve(cfg: ExperimentConfig, built: Built, threads: int = 1) -> list[DiscreteSolution]:
    reg = built.regularized
    args = [(reg, built.grid, built.f, built.g, e, cfg.tol) for e in cfg.epsilons]
    if threads > 1 and len(args) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda a: _solve_one(*a), args))
    return [_solve_one(*a) for a in args]


def _field_name(index: int) -> str:
    return f"fields/u_{index:02d}.csv"


def write_solutions(out: Path, cfg: ExperimentConfig, built: Built, sols: list[DiscreteSolution], manifest: RunManifest) -> None:
    (out / "fields").mkdir(parents=True, exist_ok=True)
    rows = []
    affine_exact = cfg.g_spec.get("family") == "affine" and cfg.f_spec.get("family") == "constant" and float(cfg.f_spec.get("params", {}).get("value", 0.0)) == 0.0
    f_zero = cfg.f_spec.get("family") == "constant" and float(cfg.f_spec.get("params", {}).get("value", 0.0)) == 0.0
    for i, s in enumerate(sols):
        write_solution(out / _field_name(i), s)
        nodal_err = float(np.abs(s.u - nodal_field(built.grid, built.g)).max()) if affine_exact else None
        mp_ok, mp_margin = max_principle_check(s) if f_zero else (None, None)
        d = s.diagnostics
        rows.append([i, s.epsilon, d["iterations"], d["residual"], d["energy"], float(np.linalg.norm(s.Du, axis=-1).max()), nodal_err, mp_ok, mp_margin])
        manifest.checks[f"solve[{i}].residual"] = bool(d["residual"] <= cfg.tol)
        if affine_exact:
            manifest.checks[f"solve[{i}].affine_exact"] = bool(nodal_err <= 1e-9)
        if f_zero:
            manifest.checks[f"solve[{i}].max_principle"] = bool(mp_ok)
    header = ["index", "epsilon", "iterations", "residual", "energy", "grad_sup", "affine_nodal_error", "max_principle_ok", "max_principle_margin"]
    write_csv(out / "solutions.csv", header, rows)
    manifest.outputs.append("solutions.csv")


def read_solutions(out: Path, cfg: ExperimentConfig, built: Built) -> list[DiscreteSolution]:
    sols = []
    f_nodes = nodal_field(built.grid, built.f, "f")
    g_nodes = nodal_field(built.grid, built.g, "g")
    for i, eps in enumerate(cfg.epsilons):
        path = out / _field_name(i)
        if not path.exists():
            raise InvalidArgument(f"missing solution file {path}; run solve-only first")
        header, u = read_solution(path)
        if u.shape != built.grid.dims or not math.isclose(header["h"], built.grid.h) or header["epsilon"] != eps:
            raise InvalidArgument(f"{path} does not match the config")
        sols.append(DiscreteSolution(built.grid, u, eps, f_nodes, g_nodes, {}))
    return sols


def _window(cfg: ExperimentConfig, grid: Grid, spec: dict) -> tuple[np.ndarray, float]:
    center = np.asarray(spec.get("x0", 0.5 * (grid.lo + grid.hi)), float)
    rho = float(spec.get("rho", 0.25 * float(np.min(grid.hi - grid.lo))))
    return center, rho


def _as_dict(switch) -> dict | None:
    if switch is True:
        return {}
    if switch in (False, None):
        return None
    if isinstance(switch, dict):
        return switch
    raise ConfigError(f"harness switch must be true, false or an object, got {switch!r}")


def stage_harness(cfg: ExperimentConfig, built: Built, sols: list[DiscreteSolution], out: Path, manifest: RunManifest) -> None:
    grid, body = built.grid, built.body
    rows = apriori_report(sols)
    write_csv(out / "apriori.csv", ["epsilon", "energy_ratio", "hessian_ratio", "sup_ratio", "grad_sup"], [[r[k] for k in ("epsilon", "energy_ratio", "hessian_ratio", "sup_ratio", "grad_sup")] for r in rows])
    manifest.outputs.append("apriori.csv")

    spec = _as_dict(cfg.harness.get("cascade"))
    if spec is not None:
        _run_cascade(cfg, grid, body, sols, spec, out, manifest)
    spec = _as_dict(cfg.harness.get("convergence"))
    if spec is not None:
        _run_convergence(cfg, body, sols, spec, out, manifest)
    spec = _as_dict(cfg.harness.get("continuity"))
    if spec is not None:
        _run_continuity(cfg, grid, body, sols, spec, out, manifest)
    spec = _as_dict(cfg.harness.get("subsolution"))
    if spec is not None:
        _run_subsolution(cfg, grid, body, sols, spec, out, manifest)
    spec = cfg.harness.get("refinement")
    if spec is not None:
        _run_refinement(cfg, built, spec, out, manifest)


def _run_cascade(cfg, grid, body, sols, spec, out, manifest):
    center, rho = _window(cfg, grid, spec)
    kappa = float(spec.get("kappa", 0.9))
    nu = float(spec.get("nu", 0.125))
    steps = int(spec.get("max_steps", 20))
    count = int(spec.get("directions", 64))
    dirs = dual_boundary_directions(body, count)
    w = BallWindow(grid, center, rho)
    trace_rows, regime_rows = [], []
    for i, s in enumerate(sols):
        for delta in cfg.deltas:
            mu = initial_mu(s, w, delta, body)
            tr = cascade(s, center, rho, delta, mu, kappa, nu, steps, body, dirs)
            manifest.checks[f"cascade[{i},{delta!r}].level_bound"] = tr.level_bound_holds
            for st in tr.steps:
                trace_rows.append(
                    [s.epsilon, delta, st.index, st.rho, st.mu, st.label, st.cells, st.sup_gdelta, st.excess, st.max_fraction,
                     st.degenerate_sup_next, st.degenerate_check, st.excess_ratio, st.lower_bound_min, st.lower_bound_target, st.lower_bound_check,
                     tr.alpha_delta, tr.alpha_hat, tr.truncated, tr.gamma_norm, tr.gamma_bound]
                )
            # regime table on the top window with the nu sensitivity sweep
            for nu_k in sorted({nu, 0.25, 0.125, 0.0625}, reverse=True):
                state = level_measures(s, w, delta, mu, nu_k, dirs)
                for j, frac in enumerate(state.fractions):
                    regime_rows.append([s.epsilon, delta, nu_k, mu, j, float(dirs[j, 0]), float(dirs[j, 1]) if dirs.shape[1] > 1 else None, frac, state.label])
            lim = gdelta_limit_check(s.Du, body, delta)
            manifest.checks[f"gdelta_limit[{i},{delta!r}]"] = lim["holds_outer_radius"]
    write_csv(
        out / "cascade.csv",
        ["epsilon", "delta", "step", "rho", "mu", "label", "cells", "sup_gdelta", "excess", "max_fraction",
         "degenerate_sup_next", "degenerate_check", "excess_ratio", "lower_bound_min", "lower_bound_target", "lower_bound_check",
         "alpha_delta", "alpha_hat", "truncated", "gamma_norm", "gamma_bound"],
        trace_rows,
    )
    write_csv(out / "regimes.csv", ["epsilon", "delta", "nu", "mu", "direction", "e1", "e2", "fraction", "label"], regime_rows)
    manifest.outputs += ["cascade.csv", "regimes.csv"]


def _run_convergence(cfg, body, sols, spec, out, manifest):
    rows = []
    for delta in cfg.deltas:
        table = epsilon_convergence(sols, delta, body, tolerance=float(spec.get("tolerance", 0.05)))
        manifest.checks[f"convergence[{delta!r}].monotone"] = table.monotone
        m = len(table.epsilons)
        for a in range(m):
            for b in range(m):
                rows.append([delta, table.epsilons[a], table.epsilons[b], table.distances[a, b]])
    write_csv(out / "convergence.csv", ["delta", "epsilon_a", "epsilon_b", "l2_distance"], rows)
    manifest.outputs.append("convergence.csv")


def _run_continuity(cfg, grid, body, sols, spec, out, manifest):
    radii = spec.get("radii") or [grid.h * 2**k for k in range(5)]
    rows = []
    for s in sols:
        for delta in cfg.deltas:
            fields = [("G_delta", g_delta(body, delta, s.Du), None), ("K1", s.Du, "K1"), ("K2", s.Du, "K2")]
            for name, fld, K in fields:
                rep = continuity_report(fld, grid, radii, K=K, body=body, name=name)
                for r, om in zip(rep.radii, rep.modulus):
                    rows.append([s.epsilon, delta, rep.name, r, om, rep.alpha_hat, rep.band, rep.status])
    write_csv(out / "continuity.csv", ["epsilon", "delta", "field", "radius", "modulus", "alpha_hat", "alpha_band", "status"], rows)
    manifest.outputs.append("continuity.csv")


def _run_subsolution(cfg, grid, body, sols, spec, out, manifest):
    center, rho = _window(cfg, grid, spec)
    w = BallWindow(grid, center, rho)
    e_star = np.asarray(spec.get("e_star", [1.0] + [0.0] * (grid.n - 1)), float)
    levels = spec.get("levels", 8)
    sigma = float(spec.get("sigma", 1.0))
    rows = []
    for s in sols:
        for delta in cfg.deltas:
            # levels spread over the range of v on B_{rho/2} so each tau sees a nonempty set
            v = np.maximum(s.Du[w.sub(0.5)] @ e_star - (1.0 + delta), 0.0) ** 2
            top = float(v.max())
            ks = [top * (j + 0.5) / levels for j in range(levels)] if top > 0 else [1.0]
            for r in subsolution_energy_check(s, w, delta, e_star, ks, sigma=sigma):
                rows.append([s.epsilon, delta, r["k"], r["tau"], r["lhs"], r["rhs1"], r["A_k"], r["ratio"], r["empty"]])
    write_csv(out / "subsolution.csv", ["epsilon", "delta", "k", "tau", "lhs", "rhs1", "A_k", "ratio", "empty"], rows)
    manifest.outputs.append("subsolution.csv")


def _run_refinement(cfg, built, spec, out, manifest):
    gp = cfg.g_spec["params"]
    eps = float(gp["eps"])
    oracle = ProfileOracle(cfg.p, float(gp["c"]), float(gp["k"]), eps)
    axis, origin = int(gp.get("axis", 0)), float(gp.get("origin", 0.0))
    ratio_max = float(spec.get("max_ratio", 0.75))
    rows, prev = [], None
    for h in spec["h"]:
        grid = build_grid(cfg.box, float(h))
        K = cfg.K if cfg.K is not None else _auto_K(built, grid)
        reg = assemble(built.integrand, K, eps, seed=cfg.seed)
        sol = solve_dirichlet(reg, grid, built.f, built.g, tol=cfg.tol, initial="zero")
        xc = grid.cell_centers()
        exact = np.zeros(xc.shape)
        exact[..., axis] = oracle.slope(xc[..., axis] - origin)
        err = float(np.linalg.norm(sol.Du - exact, axis=-1).max())
        ratio = None if prev is None else err / prev
        if ratio is not None:
            manifest.checks[f"refinement[h={h!r}].ratio"] = bool(ratio <= ratio_max)
        rows.append([float(h), eps, sol.diagnostics["iterations"], sol.diagnostics["residual"], err, ratio])
        prev = err
    write_csv(out / "profile_error.csv", ["h", "epsilon", "iterations", "residual", "grad_sup_error", "ratio"], rows)
    manifest.outputs.append("profile_error.csv")


# ---------------------------------------------------------------------------
# commands


def _timed(manifest: RunManifest, name: str, fn, *args):
    t0 = time.perf_counter()
    try:
        result = fn(*args)
    except (InvalidArgument, ConvergenceFailure, ArithmeticError, ValueError, RuntimeError) as exc:
        manifest.stage(name, "failed", time.perf_counter() - t0, str(exc))
        raise StageFailure(name, exc) from exc
    manifest.stage(name, "ok", time.perf_counter() - t0)
    log.info("stage %s done in %.2fs", name, time.perf_counter() - t0)
    return result


def run(cfg: ExperimentConfig, threads: int = 1, mode: str = "run") -> dict:
    """Execute the pipeline and write outputs; returns the manifest document."""
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(cfg.hash, cfg.name, cfg.seed)
    try:
        body = _timed(manifest, "body", stage_body, cfg)
        built = _timed(manifest, "integrand", stage_integrand, cfg, body)
        if mode in ("run", "solve-only"):
            _timed(manifest, "regularize", stage_regularize, cfg, built)
            sols = _timed(manifest, "solve", stage_solve, cfg, built, threads)
            write_solutions(out, cfg, built, sols, manifest)
        else:
            sols = _timed(manifest, "load", read_solutions, out, cfg, built)
        if mode in ("run", "report-only"):
            _timed(manifest, "harness", stage_harness, cfg, built, sols, out, manifest)
    except StageFailure:
        manifest.write(out)
        raise
    return manifest.write(out)


def gauge_selftest(body_path: str, samples: int = 10_000, seed: int = 0, out=None) -> bool:
    out = sys.stdout if out is None else out
    body = load_body(body_path)
    checks = inequality_suite(body, samples=samples, seed=seed)
    ok = True
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.name:28s} worst={c.worst_violation:.3e} (sample {c.worst_index})", file=out)
        if not c.passed:
            ok = False
            print(f"      offender: {c.detail}", file=out)
    if isinstance(body, Polytope):
        rng = np.random.default_rng(seed)
        xi = rng.standard_normal((min(100, samples), body.dim))
        ref = bisection_gauge(body, xi)
        err = float(np.max(np.abs(ref - body.gauge(xi)) / np.maximum(1.0, ref)))
        passed = err <= 1e-9
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {'membership_bisection':28s} worst={err:.3e}", file=out)
    return ok


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="widedegen", description="Regularity experiments for widely degenerate elliptic problems.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="config file or bundled name (affine-smoke, profile-p2)")
            p.add_argument("--out", help="output directory (overrides the config)")
            p.add_argument("--threads", type=int, default=1, help="parallel epsilon solves")
        p.add_argument("--seed", type=int, help="random seed (overrides the config)")
        p.add_argument("--verbose", "-v", action="store_true")

    for name in ("run", "solve-only", "report-only"):
        common(sub.add_parser(name))
    st = sub.add_parser("gauge-selftest", help="check gauge inequalities for a body file")
    st.add_argument("body", help="JSON body description")
    st.add_argument("--samples", type=int, default=10_000)
    common(st, config=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "gauge-selftest":
            if args.samples < 1:
                raise ConfigError("--samples must be positive")
            ok = gauge_selftest(args.body, args.samples, 0 if args.seed is None else args.seed)
            return EXIT_OK if ok else EXIT_CHECK
        if args.threads < 1:
            raise ConfigError("--threads must be positive")
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        doc = run(cfg, threads=args.threads, mode=args.command)
    except (ConfigError, BodySpecError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    failed = [k for k, v in doc["checks"].items() if not v]
    for k in failed:
        print(f"FAIL {k}", file=sys.stderr)
    print(f"{doc['name']}: {'pass' if doc['passed'] else 'fail'} ({len(doc['checks'])} checks, {len(doc['outputs'])} files) -> {args.out or cfg.output}")
    return EXIT_OK if doc["passed"] else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
