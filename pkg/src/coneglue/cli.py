"""Experiment drivers: configuration parsing, deterministic seeded runs, and
CSV/JSON artifact emission for every acceptance experiment."""

import argparse
import configparser
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import constraints as C
from .adm import (LocalizedEvaluator, adm_quadruple, calibrate_varpi,
                  content_at_infinity)
from .diffops import GridOps
from .fields import (FlatData, ScalarField, SchwarzschildIsotropic,
                     VectorField, flat_data, rough_patch, save_field)
from .geometry import ConeSpec, GridParams, WeightParams, build_domain
from .nbody import (BodyPlacement, additivity_check, additivity_report_json,
                    assemble, validate_config, validation_report_json)
from .picard import localize, residual_smallness_trend
from .solver import (NormalOperator, Potentials, coercivity_rayleigh,
                     dn_char_determinant, functional_G, solve_linearized)

__all__ = ["ConfigError", "ExperimentConfig", "ExperimentFailure",
           "EXPERIMENTS", "emit_convergence_tables", "main", "parse_config",
           "run_experiment"]

EXPERIMENTS = ("operators-check", "coercivity", "linear-solve", "localize",
               "adm-study", "nbody")

OUTPUT_DIR_ENV = "CONEGLUE_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


class ExperimentFailure(AssertionError):
    """Failed experiment assertion, tagged with the module it belongs to."""

    def __init__(self, module, message):
        super().__init__(f"[{module}] {message}")
        self.module = module


def _require(cond, module, message):
    if not cond:
        raise ExperimentFailure(module, message)


@dataclass
class ExperimentConfig:
    name: str
    n: int = 3
    seed: int = 0
    output_dir: str = "out"
    vertex: tuple = (0.0, 0.0, -200.0)
    theta1: float = np.pi / 6
    theta2: float = np.pi / 3
    N: int = 12
    p: float = 0.75
    nt: int = 24
    ntheta: int = 12
    r_min: float = 1.0
    r_max: float = 10.0
    kind: str = "schwarzschild"
    mass: float = 1.0
    eps: float = 0.25
    a_sweep: tuple = (50.0, 100.0, 200.0)
    reduction_min: float = 10.0
    identity_tol: float = 1e-10

    def cone(self):
        return ConeSpec(self.vertex, self.theta1, self.theta2)

    def weights(self):
        return WeightParams(N=self.N, p=self.p)

    def grid_params(self):
        return GridParams(nt=self.nt, ntheta=self.ntheta, r_min=self.r_min,
                          r_max=self.r_max)

    def provider(self):
        if self.kind == "flat":
            return FlatData()
        if self.kind == "schwarzschild":
            return SchwarzschildIsotropic(m=self.mass)
        raise ConfigError(f"data.kind = {self.kind!r}: "
                          "expected flat or schwarzschild")


def parse_config(path):
    """Key-value config with sections; domain bounds enforced at parse."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        with open(path) as fh:
            cp.read_file(fh, source=str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from exc

    def get(section, key, cast, default):
        try:
            raw = cp.get(section, key, fallback=None)
            if raw is None:
                return default
            if cast is tuple:
                return tuple(float(v) for v in raw.split())
            return cast(raw)
        except ValueError as exc:
            raise ConfigError(
                f"[{section}] {key} = {cp.get(section, key)!r}: {exc}"
            ) from exc

    name = cp.get("experiment", "name", fallback=None)
    if name not in EXPERIMENTS:
        raise ConfigError("[experiment] name must be one of: "
                          + ", ".join(EXPERIMENTS) + f" (got {name!r})")
    d = ExperimentConfig(name)
    cfg = ExperimentConfig(
        name=name,
        n=get("experiment", "n", int, d.n),
        seed=get("experiment", "seed", int, d.seed),
        output_dir=get("experiment", "output_dir", str, d.output_dir),
        vertex=get("cone", "vertex", tuple, d.vertex),
        theta1=get("cone", "theta1", float, d.theta1),
        theta2=get("cone", "theta2", float, d.theta2),
        N=get("weights", "N", int, d.N),
        p=get("weights", "p", float, d.p),
        nt=get("grid", "nt", int, d.nt),
        ntheta=get("grid", "ntheta", int, d.ntheta),
        r_min=get("grid", "r_min", float, d.r_min),
        r_max=get("grid", "r_max", float, d.r_max),
        kind=get("data", "kind", str, d.kind),
        mass=get("data", "mass", float, d.mass),
        eps=get("data", "eps", float, d.eps),
        a_sweep=get("data", "a_sweep", tuple, d.a_sweep),
        reduction_min=get("tolerances", "reduction_min", float,
                          d.reduction_min),
        identity_tol=get("tolerances", "identity_tol", float, d.identity_tol),
    )
    lo, hi = (cfg.n - 2) / 2, float(cfg.n - 2)
    if not lo < cfg.p < hi:
        raise ConfigError(f"[weights] p = {cfg.p} outside the open range "
                          f"({lo}, {hi}) required for n = {cfg.n}")
    if not cfg.N > cfg.n + 8:
        raise ConfigError(f"[weights] N = {cfg.N} must exceed n + 8 = "
                          f"{cfg.n + 8}")
    if not 0.0 < cfg.eps < 0.5:
        raise ConfigError(f"[data] eps = {cfg.eps} outside (0, 0.5)")
    if not 0.0 < cfg.theta1 < cfg.theta2 < np.pi:
        raise ConfigError("[cone] need 0 < theta1 < theta2 < pi")
    if cfg.kind not in ("flat", "schwarzschild"):
        raise ConfigError(f"[data] kind = {cfg.kind!r}: "
                          "expected flat or schwarzschild")
    return cfg


def _write_json(path, payload):
    with open(path, "w") as fh:
        fh.write(json.dumps(payload, sort_keys=True,
                            default=lambda o: o.item()))
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join("%.17g" % v if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def _band_rhs(grid, cone):
    band = np.clip(np.sin(np.pi * (grid.thv - cone.theta1)
                          / (cone.theta2 - cone.theta1)), 0, None) ** 4
    f = ScalarField(grid, np.exp(-((grid.r - 4) / 1.0) ** 2) * band)
    V = VectorField(grid, np.zeros((grid.nnodes, grid.n)), "con")
    return f, V


# -- experiment runners --------------------------------------------------------

def _run_operators_check(cfg, outdir, rng):
    tol = cfg.identity_tol
    worst_char = 0.0
    for n in (3, 4, 5):
        for _ in range(100):
            xi = rng.standard_normal(n)
            P, _ = dn_char_determinant(xi)
            expected = 2.0 * np.linalg.norm(xi) ** (2 * n + 4)
            worst_char = max(worst_char, abs(P / expected - 1.0))

    grid = build_domain(cfg.cone(), cfg.grid_params(), cfg.weights())
    ops = GridOps(grid)
    fd = flat_data(grid)
    u = ScalarField(grid, grid.x[:, 2] ** 2 + 0.5 * grid.x[:, 0] ** 2)
    L = C.lichnerowicz_adjoint(fd.g, u, ops)
    lap = np.einsum("naa->n", ops.grad(ops.grad(u.values, 0), 1))
    trace_res = float(np.abs(np.einsum("naa->n", L.comps)
                             - (1 - grid.n) * lap).max())

    f, V = _band_rhs(grid, cfg.cone())
    op = NormalOperator(fd.g, fd.pi, cfg.weights(), ops, rho_N=2)

    def G_at(y):
        pot = Potentials.from_vector(grid, op.embed(op.restrict(y)))
        return functional_G(pot.u, pot.Z, f, V, fd.g, fd.pi, cfg.weights(),
                            ops, rho_N=2)

    worst_mid = 0.0
    for _ in range(3):
        y1, y2 = rng.standard_normal((2, op.keep.size))
        mid = G_at(0.5 * (y1 + y2))
        d = op.restrict(y2 - y1)
        expect = 0.5 * G_at(y1) + 0.5 * G_at(y2) - 0.125 * d @ op.matvec(d)
        worst_mid = max(worst_mid, abs(mid - expect) / max(abs(mid), 1.0))

    residuals = {"char_determinant": float(worst_char),
                 "trace_identity": trace_res,
                 "midpoint_convexity": float(worst_mid)}
    _write_csv(os.path.join(outdir, "identities.csv"),
               "identity,residual,tolerance",
               [(k, v, tol) for k, v in sorted(residuals.items())])
    for name, value in residuals.items():
        _require(value <= tol, "solver",
                 f"{name} residual {value:.3e} exceeds {tol:.1e}")
    return {"residuals": residuals, "tolerance": tol}


def _run_coercivity(cfg, outdir, rng):
    w = cfg.weights()
    rows = []
    levels = [(cfg.nt, cfg.ntheta),
              (cfg.nt + cfg.nt // 3, cfg.ntheta + cfg.ntheta // 3)]
    refine = []
    for nt, nth in levels:
        grid = build_domain(cfg.cone(),
                            GridParams(nt=nt, ntheta=nth, r_min=cfg.r_min,
                                       r_max=cfg.r_max), w)
        fd = flat_data(grid)
        Cval = coercivity_rayleigh(fd.g, fd.pi, w, GridOps(grid))
        refine.append(Cval)
        rows.append(("refinement", nt, nth, cfg.vertex[-1], float(Cval)))
    sweep = []
    for a in cfg.a_sweep:
        cone = ConeSpec((0.0,) * (cfg.n - 1) + (-a,), cfg.theta1, cfg.theta2)
        grid = build_domain(cone, cfg.grid_params(), w)
        patch = rough_patch(cfg.provider().on_grid(grid), w)
        Cval = coercivity_rayleigh(patch.g, patch.pi, w, GridOps(grid))
        sweep.append(float(Cval))
        rows.append(("a_sweep", cfg.nt, cfg.ntheta, -a, float(Cval)))
    _write_csv(os.path.join(outdir, "coercivity.csv"),
               "study,nt,ntheta,vertex_z,constant", rows)
    for Cval in refine + sweep:
        _require(Cval > 0, "solver", "coercivity constant must be positive")
    drift = abs(refine[1] / refine[0] - 1.0)
    _require(drift < 0.2, "solver",
             f"refinement drift {drift:.3f} exceeds 20%")
    spread = max(sweep) / min(sweep)
    _require(spread < 4.0, "solver",
             f"|a|-sweep spread {spread:.2f} exceeds factor 4")
    return {"refinement_constants": refine, "sweep_constants": sweep,
            "refinement_drift": float(drift)}


def _run_linear_solve(cfg, outdir, rng):
    w = cfg.weights()
    grid = build_domain(cfg.cone(), cfg.grid_params(), w)
    ops = GridOps(grid)
    fd = flat_data(grid)
    f, V = _band_rhs(grid, cfg.cone())
    pot, defo, rep = solve_linearized(fd.g, fd.pi, f, V, w, ops, rho_N=2)
    _write_json(os.path.join(outdir, "solve_report.json"),
                json.loads(rep.to_json()))
    rep.residual_csv(os.path.join(outdir, "solve_residuals.csv"))
    _require(rep.converged, "solver", "linear solve did not converge")

    # discrete adjoint identity on random compact pairs
    dphi = C.d_phi(fd.g, fd.pi, ops)
    dstar = C.d_phi_star(dphi, None)
    g2 = C.residual_gram_diag(grid)
    _, _, g1 = C.expansion_matrices(grid)
    bump = np.exp(-((grid.r - 4) / 1.0) ** 2) * grid.phi ** 2
    worst = 0.0
    for _ in range(3):
        hc = rng.standard_normal((grid.nnodes, grid.n, grid.n))
        hc = bump[:, None, None] * (hc + hc.transpose(0, 2, 1))
        wc = rng.standard_normal((grid.nnodes, grid.n, grid.n))
        wc = bump[:, None, None] * (wc + wc.transpose(0, 2, 1))
        h = type(fd.g)(grid, hc)
        wmom = type(fd.pi)(grid, wc, "con")
        u = ScalarField(grid, bump * rng.standard_normal(grid.nnodes))
        Z = VectorField(grid, bump[:, None]
                        * rng.standard_normal((grid.nnodes, grid.n)), "con")
        hs, ws = dstar(u, Z)
        lhs = np.dot(dphi(h, wmom).as_vector() * g2,
                     np.concatenate([u.values, Z.comps.ravel()]))
        rhs = np.dot(dphi.pack(h, wmom) * g1,
                     np.concatenate([C.pack_sym(hs.comps),
                                     C.pack_sym(ws.comps)]))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-30))
    _require(worst <= 1e-12, "constraints",
             f"adjoint identity residual {worst:.3e} exceeds 1e-12")
    return {"solve": json.loads(rep.to_json()),
            "adjoint_identity_residual": float(worst)}


def _run_localize(cfg, outdir, rng):
    provider = cfg.provider()
    out, trace, diag = localize(provider, cfg.cone(), cfg.weights(),
                                cfg.grid_params())
    trace.to_csv(os.path.join(outdir, "picard_trace.csv"))
    save_field(out.g, os.path.join(outdir, "metric.snap"))
    save_field(out.pi, os.path.join(outdir, "momentum.snap"))
    ev = LocalizedEvaluator(out, provider, cfg.weights())
    quad = adm_quadruple(ev, (20.0, 40.0, 80.0))
    quad.sigma_csv(os.path.join(outdir, "adm_table.csv"))
    summary = {k: (None if isinstance(v, float) and np.isnan(v) else v)
               for k, v in diag.items()}
    summary["adm_energy"] = float(quad.energy)
    if diag["iterations"] > 0:
        _require(all(r < 1.0 for r in trace.ratios), "picard",
                 "successive-difference ratio reached 1")
        _require(diag["reduction"] >= cfg.reduction_min, "picard",
                 f"residual reduction {diag['reduction']:.2f} below "
                 f"{cfg.reduction_min}")
    return summary


def _run_adm_study(cfg, outdir, rng):
    provider = cfg.provider()
    sigmas = (20.0, 40.0, 80.0)
    if cfg.kind == "flat":
        quad = adm_quadruple(provider, sigmas)
    else:
        quad = adm_quadruple(provider, sigmas,
                             varpi=calibrate_varpi(provider, sigmas))
    quad.sigma_csv(os.path.join(outdir, "sigma_table.csv"))
    _write_json(os.path.join(outdir, "adm.json"), json.loads(quad.to_json()))
    theta, content_rows = content_at_infinity(provider, 1e-9, sigmas)
    rows = residual_smallness_trend(provider, list(cfg.a_sweep), cfg.cone(),
                                    cfg.weights(), cfg.grid_params())
    _write_csv(os.path.join(outdir, "smallness_trend.csv"),
               "a_mag,rough_residual_norm1",
               [(float(a), float(v)) for a, v in rows])
    vals = [v for _, v in rows]
    if cfg.kind == "flat":
        _require(all(v == 0.0 for v in vals), "picard",
                 "flat data must have zero rough residual")
        _require(theta == 0.0, "adm", "flat content at infinity must be 0")
    else:
        _require(all(x > y for x, y in zip(vals, vals[1:])), "picard",
                 "rough-residual trend must strictly decrease in |a|")
        _require(abs(quad.energy - cfg.mass) <= 0.01 * cfg.mass, "adm",
                 f"extrapolated energy {quad.energy:.5f} off {cfg.mass} by "
                 ">1%")
    return {"energy": float(quad.energy), "content": float(theta),
            "smallness_trend": vals}


def _run_nbody(cfg, outdir, rng):
    theta = np.pi / 8
    mk = lambda d: BodyPlacement(cfg.provider(), d, 100.0, theta, 0.1)
    good = validate_config([mk((0, 0, 1)), mk((1, 0, 0))], Lam=15.0)
    s = np.sqrt(0.5)
    bad = validate_config([mk((0, 0, 1)), mk((s, 0, s))], Lam=15.0)
    with open(os.path.join(outdir, "validation.json"), "w") as fh:
        fh.write(validation_report_json(good) + "\n")
        fh.write(validation_report_json(bad) + "\n")
    _require(good["valid"], "nbody", "orthogonal worked example must pass")
    _require(not bad["valid"], "nbody", "pi/4 worked example must fail")

    pl = [BodyPlacement(cfg.provider(), (0, 0, 1), 100.0, cfg.theta1,
                        cfg.eps),
          BodyPlacement(cfg.provider(), (1, 0, 0), 100.0, cfg.theta1,
                        cfg.eps)]
    comp = assemble(pl, cfg.weights(), cfg.grid_params(), Lam=15.0)
    report = additivity_check(comp, sigma_budget=0.1,
                              reference_energies=[cfg.mass
                                                  if cfg.kind != "flat"
                                                  else 0.0] * 2)
    with open(os.path.join(outdir, "additivity.json"), "w") as fh:
        fh.write(additivity_report_json(report) + "\n")
    scale = max(abs(report["composite_energy"]), 1.0)
    _require(report["additivity_mismatch"] <= 1e-6 * scale, "nbody",
             "composite energy must equal the sum of parts")
    return {"validation_valid": good["valid"],
            "additivity_mismatch": report["additivity_mismatch"],
            "composite_energy": report["composite_energy"]}


_RUNNERS = {"operators-check": _run_operators_check,
            "coercivity": _run_coercivity,
            "linear-solve": _run_linear_solve,
            "localize": _run_localize,
            "adm-study": _run_adm_study,
            "nbody": _run_nbody}


def run_experiment(config_path):
    """Parse, run, and emit a summary JSON; returns the process exit status."""
    try:
        cfg = parse_config(config_path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    outdir = os.environ.get(OUTPUT_DIR_ENV, cfg.output_dir)
    os.makedirs(outdir, exist_ok=True)
    summary = {"schema": "coneglue-experiment-1", "experiment": cfg.name,
               "seed": cfg.seed, "config": str(config_path)}
    try:
        summary["results"] = _RUNNERS[cfg.name](
            cfg, outdir, np.random.default_rng(cfg.seed))
        summary["passed"] = True
        status = 0
    except AssertionError as exc:
        summary["passed"] = False
        summary["failure"] = str(exc)
        status = 1
    _write_json(os.path.join(outdir, "summary.json"), summary)
    line = "PASS" if summary["passed"] else f"FAIL {summary['failure']}"
    print(f"{cfg.name}: {line}")
    return status


def emit_convergence_tables(results, path=None):
    """Plot-ready CSV from (label, parameter, value) triples.

    Rows sharing a label get a slope column from successive rows:
    log(v_prev/v)/log(p_prev/p) — refinement order for parameter = h,
    decay rate for parameter = |a| or sigma.
    """
    lines = ["label,param,value,slope"]
    prev = {}
    for label, pval, val in results:
        slope = ""
        if label in prev:
            p0, v0 = prev[label]
            if val > 0 and v0 > 0 and pval != p0 and pval > 0 and p0 > 0:
                slope = "%.6g" % (np.log(v0 / val) / np.log(p0 / pval))
        prev[label] = (pval, val)
        lines.append(f"{label},{pval:.17g},{val:.17g},{slope}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def main(argv=None):
    ap = argparse.ArgumentParser(prog="coneglue")
    sub = ap.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="run an experiment config")
    run_p.add_argument("config")
    val_p = sub.add_parser("validate", help="parse and check a config")
    val_p.add_argument("config")
    sub.add_parser("list-experiments", help="list experiment names")
    args = ap.parse_args(argv)
    if args.command == "list-experiments":
        for name in EXPERIMENTS:
            print(name)
        return 0
    if args.command == "validate":
        try:
            cfg = parse_config(args.config)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return 2
        print(f"ok: {cfg.name}")
        return 0
    return run_experiment(args.config)


if __name__ == "__main__":
    sys.exit(main())
