"""Scenario runner: ``mbdecay run config.toml`` or ``mbdecay --list-scenarios``.

Config files are flat TOML (no tables).  Example::

    scenario = "radial-floer-newton"
    N = 64
    M = 200
    S_max = 1.0
    seed = 7
"""
import argparse
import csv
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from . import flowcore as fc
from . import floerlab as fl
from . import loopfield as lf
from . import morsebott as mb
from .errors import MBDecayError

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

CLAIMS = {
    "sphere-height": [
        "energy of a gradient flow line equals the drop of the function along it",
        "the spectral gap at the maximum equals the distance to the next critical value",
        "flow lines converge exponentially to a nondegenerate critical point",
        "families of flow lines below the gap energy are compact; at the gap energy they are not",
    ],
    "circle-morse-bott": [
        "the kernel of the Hessian along the critical circle equals its tangent space",
        "flow lines converge to the circle at the normal Hessian rate, with the derivative decaying at the same rate",
        "exponentially weighted Sobolev norms of decaying tails are finite below the decay rate",
    ],
    "shift-noncompactness": [
        "time shifts of a heteroclinic converge locally to the lower critical point but not uniformly",
    ],
    "radial-floer-linear": [
        "frozen linear Floer cylinders decay at the rate of the least negative eigenvalue",
        "the L2 norm of the range component is bounded by its initial value times the exponential envelope",
    ],
    "radial-floer-newton": [
        "Floer cylinders near a Morse-Bott circle of orbits decay exponentially in L2, H2 and sup norm",
        "the s-derivative of the second-order operator equals the third-order operator along a cylinder",
        "the lifted cylinder equals the triple (Z, dZ/ds, d2Z/ds2)",
    ],
    "operator-facts": [
        "the asymptotic operator is self-adjoint with kernel the constant loops on the orbit circle",
        "the range projection commutes with the operators as required and the operator is coercive on the range",
        "vector fields vanishing on the orbit circle factor through the normal coordinate",
    ],
    "reeb-profile": [
        "the action of orbits on a radial level grows where the radial Hamiltonian is strictly convex",
        "the monodromy of the radial model has 1-eigenspace equal to the tangent of the orbit circle",
        "maximum principle: f'' >= delta^2 f with a decaying tail forces exponential decay",
    ],
}

SCENARIOS = tuple(CLAIMS)

DEFAULTS = {
    "sphere-height": {"theta0": 1.0, "s_max": 40.0, "family_size": 10, "E0": 1.0},
    "circle-morse-bott": {"offset": 0.05, "s_max": 15.0, "n_flows": 4, "delta": 1.0},
    "shift-noncompactness": {"s_max": 60.0},
    "radial-floer-linear": {"N": 64, "M": 200, "S_max": 1.0},
    "radial-floer-newton": {"N": 64, "M": 200, "S_max": 1.0, "amplitude": 1e-3, "dsB_stride": 20},
    "operator-facts": {"N": 128, "n_random": 100, "n_hadamard": 50},
    "reeb-profile": {"n_samples": 8},
}


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    scenario: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    out_dir: str = "mbdecay-out"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {', '.join(SCENARIOS)}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        merged = dict(DEFAULTS[self.scenario])
        for k, v in self.params.items():
            if k not in merged and not k.startswith("tol_"):
                raise ConfigError(f"unknown parameter {k!r} for scenario {self.scenario}")
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"parameter {k!r} must be numeric")
            if k.startswith("tol_") and not v > 0:
                raise ConfigError(f"tolerance {k!r} must be positive")
            merged[k] = v
        self.params = merged

    def rng(self):
        return np.random.Generator(np.random.Philox(int(self.seed)))


def load_config(path, seed=None, out_dir=None):
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if any(isinstance(v, dict) for v in raw.values()):
        raise ConfigError("config must be flat (no tables)")
    if "scenario" not in raw:
        raise ConfigError("config lacks 'scenario'")
    scen = raw.pop("scenario")
    cfg_seed = raw.pop("seed", 0)
    cfg_out = raw.pop("out", "mbdecay-out")
    return ScenarioConfig(
        scen, raw, cfg_seed if seed is None else seed, cfg_out if out_dir is None else out_dir
    )


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    tolerance: float


@dataclass
class RunReport:
    scenario: str
    parameters: dict
    claims: list
    checks: list = field(default_factory=list)
    constants: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def add(self, name, passed, value, tolerance):
        self.checks.append(Check(name, bool(passed), _num(value), _num(tolerance)))

    def to_dict(self):
        d = asdict(self)
        d.pop("wall_clock")
        d["passed"] = self.passed
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["scenario"],
            d["parameters"],
            d["claims"],
            [Check(**c) for c in d["checks"]],
            d["constants"],
            d["series"],
        )


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else (str(x))


# --------------------------------------------------------------- scenarios


def _sphere_height(cfg, rep):
    p = cfg.params
    sc = mb.sphere_height()
    traj = mb.integrate_gradient_flow(sc.M, sc.f, mb.meridian_point(p["theta0"]), p["s_max"])
    mb.with_limit(traj, sc.Z)
    E = fc.energy_of(traj)
    df = traj.f_values[-1] - traj.f_values[0]
    rep.add("energy_identity", abs(E - df) <= 1e-4 * (1 + E), abs(E - df), 1e-4 * (1 + E))
    gap = fc.spectral_gap(sc.critical_values, sc.Z.zeta)
    rep.add("spectral_gap", gap == 2.0, gap, 0.0)
    fit = mb.fit_exponential_decay(traj, traj.limit, zeta=sc.Z.zeta)
    bound = mb.check_decay_bound(traj, fit, sc.Z.zeta)
    rep.add("decay_rate", abs(fit.B_hat - 1.0) <= 0.05, fit.B_hat, 0.05)
    rep.add("decay_bound", bound.passed, bound.max_ratio, 1.0)
    thetas = np.linspace(0.3, 1.2, int(p["family_size"]))
    members = []
    for th in thetas:
        m = mb.integrate_gradient_flow(sc.M, sc.f, mb.meridian_point(th), p["s_max"])
        members.append(mb.with_limit(m, sc.Z))
    cert = fc.compactness_certificate(fc.ModuliFamily(members, p["E0"]), sc.Z, gap=gap)
    rep.add("compactness_certificate", cert.passed, cert.s0, math.inf)
    try:
        fc.compactness_certificate(fc.ModuliFamily(members, gap), sc.Z, gap=gap)
        refused = False
    except fc.CompactnessRefusal:
        refused = True
    rep.add("refusal_at_gap", refused, gap, 0.0)
    rep.constants.update({"E": E, "gap": gap, "A_hat": fit.A_hat, "B_hat": fit.B_hat})
    dist = np.linalg.norm(traj.points - traj.limit, axis=1)
    rep.series.update({"s": traj.s_grid.tolist(), "dist": dist.tolist()})


def _circle(cfg, rep):
    p = cfg.params
    sc = mb.circle_morse_bott()
    mbr = mb.morse_bott_verify(sc.M, sc.f, sc.Z)
    rep.add("morse_bott", mbr.passed, max(mbr.kernel_dims), sc.Z.dim)
    rng = cfg.rng()
    worst_B, worst_E, ok_bound, worst_agree = 0.0, 0.0, True, 0.0
    for k in range(int(p["n_flows"])):
        phi = rng.uniform(0, 2 * math.pi)
        a = rng.uniform(0, 2 * math.pi)
        off = p["offset"]
        r = 1 + off * math.cos(a)
        x0 = np.array([r * math.cos(phi), r * math.sin(phi), off * math.sin(a)])
        traj = mb.with_limit(mb.integrate_gradient_flow(sc.M, sc.f, x0, p["s_max"]), sc.Z)
        E = fc.energy_of(traj)
        worst_E = max(worst_E, abs(E - (traj.f_values[-1] - traj.f_values[0])) / (1 + E))
        fit = mb.fit_exponential_decay(traj, traj.limit, zeta=0.0)
        bound = mb.check_decay_bound(traj, fit, 0.0)
        worst_B = max(worst_B, abs(fit.B_hat - 2.0) / 2.0)
        ok_bound &= not bound.violations
        worst_agree = max(worst_agree, bound.rate_agreement)
        if k == 0:
            dist = np.array([sc.Z.distance(q) for q in traj.points])
            rep.series.update({"s": traj.s_grid.tolist(), "dist": dist.tolist()})
            rep.constants.update({"A_hat": fit.A_hat, "B_hat": fit.B_hat})
    rep.add("energy_identity", worst_E <= 1e-4, worst_E, 1e-4)
    rep.add("decay_rate", worst_B <= 0.05, worst_B, 0.05)
    rep.add("decay_bound", ok_bound, 0.0, 0.0)
    rep.add("derivative_rate", worst_agree <= 0.1, worst_agree, 0.1)
    s = np.linspace(0, 40, 40001)
    nrm = mb.weighted_sobolev_norm(np.exp(-2 * s), s, mb.WeightedNormSpec(p["delta"]))
    rep.add("weighted_norm", abs(nrm - 1 / math.sqrt(2)) <= 1e-3, nrm, 1e-3)
    div = mb.weighted_sobolev_norm(np.exp(-2 * s), s, mb.WeightedNormSpec(2.5))
    rep.add("weighted_norm_divergence", math.isinf(div), 0.0, 0.0)


def _shift(cfg, rep):
    het = mb.sphere_heteroclinic(s_max=cfg.params["s_max"])
    r = mb.shift_family_diagnostic(het, [1, 2, 4, 8])
    rep.add("window_monotone", r.window_monotone, r.window_distances[-1], 0.0)
    rep.add("full_line_bounded_below", min(r.full_distances) >= 1.0, min(r.full_distances), 1.0)
    rep.constants.update({"window_distances": r.window_distances, "full_distances": r.full_distances})


def _radial(cfg):
    return fl.radial_setup(int(cfg.params["N"]))


def _linear(cfg, rep):
    p = cfg.params
    model, chart, A0, split = _radial(cfg)
    lam1 = -4 * math.pi
    vec = fl.smooth_eigenvector(split, lam1)
    N = split.n_points
    Z0 = lf.LoopGrid.from_flat(1e-3 * vec, N, 1)
    s = np.linspace(0, p["S_max"], int(p["M"]) + 1)
    Z = fl.linear_stable_evolution(split, Z0, s)
    d = fl.measure_decay(chart, Z, split)
    err = max(abs(f.rate - abs(lam1)) for f in d.fits.values())
    rep.add("rates_equal_lambda1", err <= 1e-3, err, 1e-3)
    env = d.l2_qnorm[0] * np.exp(-abs(lam1) * s)
    ratio = float(np.max(d.l2_qnorm / env))
    rep.add("l2_bound", ratio <= 1 + 1e-9, ratio, 1.0)
    rep.constants.update({"c0": split.c0, "lambda1": lam1, "B_hat": d.fits["l2_qnorm"].rate})
    rep.series.update({k: v.tolist() for k, v in d.columns().items()})


def _newton(cfg, rep):
    p = cfg.params
    model, chart, A0, split = _radial(cfg)
    seed = fl.floer_seed(split, p["amplitude"])
    Z = fl.nonlinear_floer_solve(chart, split, seed, p["S_max"], int(p["M"]))
    rep.add("newton_residual", Z.residual <= fl.NEWTON_TOL, Z.residual, fl.NEWTON_TOL)
    d = fl.measure_decay(chart, Z, split)
    for k, f in d.fits.items():
        rep.add(f"rate_{k}", f.rate >= d.rate_floor, f.rate, d.rate_floor)
    rep.add("l2_bound", d.bound_ok, d.bound_max_ratio, 1.0)
    mono = bool(np.all(np.diff(d.l2_qnorm) < 0))
    rep.add("l2_monotone", mono, 0.0, 0.0)
    Z2 = fl.nonlinear_floer_solve(chart, split, seed, p["S_max"], 2 * int(p["M"]))
    pts = Z.s_grid[1:-1:int(p["dsB_stride"])]
    ds = fl.check_dsB_equals_C(chart, Z, s_points=pts)
    ds2 = fl.check_dsB_equals_C(chart, Z2, s_points=pts)
    ratio = ds.max_residual / ds2.max_residual
    rep.add("dsB_equals_C_second_order", 3.5 <= ratio <= 4.5, ratio, 0.5)
    rep.constants.update(
        {"c0": split.c0, "Xi": d.Xi, "dsB_constant": ds.constant, "dsB_ratio": ratio,
         "iterations": Z.info["iterations"]}
        | {f"B_hat_{k}": f.rate for k, f in d.fits.items()}
    )
    rep.series.update({k: v.tolist() for k, v in d.columns().items()})


def _facts(cfg, rep):
    p = cfg.params
    N = int(p["N"])
    rng = cfg.rng()
    model, chart, A0, split = _radial(cfg)
    t = np.arange(N) / N
    xs = []
    for _ in range(3):
        a = rng.uniform(-0.05, 0.05, size=(2, 2))
        xs.append(lf.LoopGrid(np.outer(np.sin(2 * np.pi * t), a[0]) + np.outer(np.cos(2 * np.pi * t), a[1]), 1))
    Ax = [lf.build_operator_A(x, chart) for x in xs]
    D = lf.derivative_matrix(N, 2)
    r = lf.check_operator_facts(split, A0, Ax, D, int(p["n_random"]), rng)
    for k, v in r.residuals.items():
        rep.add(k, v <= r.threshold, v, r.threshold)
    rep.add("self_adjoint", r.self_adjoint_residual <= 1e-6, r.self_adjoint_residual, 1e-6)
    rep.add("kernel_dim", split.kernel_dim == 1, split.kernel_dim, 1)
    rep.add("coercivity", r.coercivity_violations == 0, r.coercivity_min_ratio, split.c0)
    q = rng.uniform(-0.3, 0.3, size=(int(p["n_hadamard"]), 2))
    had = float(np.max(np.abs(chart.F(q) - np.einsum("kij,kj->ki", chart.S_field(q), q[:, 1:]))))
    rep.add("hadamard", had <= 1e-8, had, 1e-8)
    _, _, _, s2 = fl.radial_setup(2 * N)
    e1 = np.sort(split.eigenvalues[np.argsort(np.abs(split.eigenvalues))[:10]])
    e2 = np.sort(s2.eigenvalues[np.argsort(np.abs(s2.eigenvalues))[:10]])
    drift = float(np.max(np.abs(e1 - e2)))
    rep.add("grid_doubling", drift <= 1e-6, drift, 1e-6)
    rep.constants.update({"c0": split.c0, "norm_A0": A0.norm(), "n_grid_modes": split.n_grid_modes})


def _reeb(cfg, rep):
    model = fl.radial_model()
    ok = fl.mb_condition_check(model, int(cfg.params["n_samples"]))
    bad = fl.mb_condition_check(fl.radial_model(kind="linear"), int(cfg.params["n_samples"]))
    rep.add("mb_radial", ok.passed, max(ok.kernel_dims), 1)
    rep.add("mb_linear_control_fails", not bad.passed, max(bad.kernel_dims), 1)
    acts = fl.radial_orbit_actions(model, 3)
    gap = fc.spectral_gap(np.delete(acts, 1), acts[1])
    rep.add("floer_gap", abs(gap - math.pi) <= 1e-9, gap, 1e-9)
    r = np.linspace(0.1, 3.0, 30)
    prof = fl.reeb_action_profile(model.h, r, model.dh, model.d2h)
    rep.add("action_monotone", prof.monotone_where_convex, float(np.min(np.diff(prof.action))), 0.0)
    s = np.linspace(0, 10, 201)
    mp = fl.maximum_principle_check(np.exp(-3 * s), s, 2.0)
    rep.add("maximum_principle", mp.passed, mp.conclusion_margin, 0.0)
    rep.constants.update({"actions": acts.tolist(), "gap": gap})
    rep.series.update({"r": r.tolist(), "action": prof.action.tolist(), "slope": prof.slope.tolist()})


RUNNERS = {
    "sphere-height": _sphere_height,
    "circle-morse-bott": _circle,
    "shift-noncompactness": _shift,
    "radial-floer-linear": _linear,
    "radial-floer-newton": _newton,
    "operator-facts": _facts,
    "reeb-profile": _reeb,
}


def run_scenario(cfg):
    rep = RunReport(cfg.scenario, dict(cfg.params, seed=int(cfg.seed)), list(CLAIMS[cfg.scenario]))
    t0 = time.perf_counter()
    RUNNERS[cfg.scenario](cfg, rep)
    rep.wall_clock = time.perf_counter() - t0
    return rep


# --------------------------------------------------------------- output


DECAY_COLUMNS = ("s", "dist", "l2_qnorm", "h2_qnorm", "dsu_sup")


def emit_report(rep, out_dir, fmt="json"):
    """Write report.json (json) or checks.csv plus series.csv (csv); timing goes to timing.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt == "json":
        path = out / "report.json"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(rep.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        written.append(path)
    elif fmt == "csv":
        path = out / "checks.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["name", "passed", "value", "tolerance"])
            for c in rep.checks:
                w.writerow([c.name, int(c.passed), repr(c.value), repr(c.tolerance)])
        written.append(path)
        if rep.series:
            cols = [c for c in DECAY_COLUMNS if c in rep.series] or sorted(rep.series)
            cols += [c for c in sorted(rep.series) if c not in cols]
            n = max(len(rep.series[c]) for c in cols)
            path = out / "series.csv"
            with open(path, "w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(cols)
                for i in range(n):
                    w.writerow([repr(rep.series[c][i]) if i < len(rep.series[c]) else "" for c in cols])
            written.append(path)
    else:
        raise ConfigError(f"unknown format {fmt!r}")
    with open(out / "timing.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"scenario": rep.scenario, "wall_clock_s": rep.wall_clock}, fh)
        fh.write("\n")
    return written


def parse_report(path):
    with open(path, encoding="utf-8") as fh:
        return RunReport.from_dict(json.load(fh))


def build_parser():
    ap = argparse.ArgumentParser(prog="mbdecay", description="Run decay and compactness experiments.")
    ap.add_argument("--version", action="version", version=f"mbdecay {__version__}")
    ap.add_argument("--list-scenarios", action="store_true", help="print scenario names and exit")
    sub = ap.add_subparsers(dest="command")
    run = sub.add_parser("run", help="run the scenario named in a config file")
    run.add_argument("config")
    run.add_argument("--out", default=None)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--format", choices=("json", "csv"), default="json")
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.list_scenarios:
        for name in SCENARIOS:
            print(f"{name}: {CLAIMS[name][0]}")
        return EXIT_OK
    if args.command != "run":
        ap.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config, args.seed, args.out)
    except ConfigError as exc:
        print(f"mbdecay: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        rep = run_scenario(cfg)
    except (MBDecayError, ValueError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"mbdecay: scenario {cfg.scenario}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    try:
        emit_report(rep, cfg.out_dir, args.format)
    except OSError as exc:
        print(f"mbdecay: cannot write report: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for c in rep.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {cfg.scenario}:{c.name} value={c.value} tol={c.tolerance}")
    return EXIT_OK if rep.passed else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
