"""Run a scenario's checks and collect report tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimates import energy_estimate, l1_estimate, tv_domination
from .grid import SpaceTimeField
from .linear import (LinearProblem, adjoint_potential, check_delta_condition, check_duality,
                     check_weak_form, duality_scale, resolvent_limit_af, revuz_target,
                     solve_backward, solve_fk_mc)
from .measures import MeasureData, classify, to_revuz_rates
from .operators import structural_report
from .process import estimate_capacity
from .scenarios import Scenario
from .semilinear import (SemilinearInputs, check_comparison, check_driver_l1,
                         martingale_residual, solve_semilinear, terminal_martingale)


class NumericFailure(RuntimeError):
    def __init__(self, operation, exc):
        super().__init__(f"numeric failure in {operation}: {exc}")
        self.operation = operation


@dataclass
class RunReport:
    scenario: str
    u_direct: SpaceTimeField | None = None
    u_mc: SpaceTimeField | None = None
    mc_stderr: SpaceTimeField | None = None
    residuals: list = field(default_factory=list)   # (check, quantity, value, threshold, passed)
    estimates: list = field(default_factory=list)   # (name, lhs, rhs, margin, holds)
    structural: list = field(default_factory=list)  # (key, value)

    def add(self, check, quantity, value, threshold=None, passed=None):
        self.residuals.append((check, quantity, value, threshold, passed))

    @property
    def failures(self) -> list:
        return [r for r in self.residuals if r[4] is False] + \
               [("estimate:" + e[0], "margin", e[3], 0.0, False) for e in self.estimates if e[4] is False]

    @property
    def ok(self) -> bool:
        return not self.failures


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _field_rows(u: SpaceTimeField | None, err: SpaceTimeField | None = None):
    if u is None:
        return []
    g = u.grid
    rows = []
    for i, t in enumerate(g.times):
        for j in range(g.n_nodes):
            row = [t, *g.nodes[j], u.values[i, j]]
            if err is not None:
                row.append(err.values[i, j])
            rows.append(row)
    return rows


def write_report(report: RunReport, grid, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    xs = ["x"] if grid.dim == 1 else ["x", "y"]
    _write(out / "u_direct.csv", ["t", *xs, "u"], _field_rows(report.u_direct))
    _write(out / "u_mc.csv", ["t", *xs, "u", "stderr"], _field_rows(report.u_mc, report.mc_stderr))
    _write(out / "residuals.csv", ["check", "quantity", "value", "threshold", "passed"], report.residuals)
    _write(out / "estimates.csv", ["name", "lhs", "rhs", "margin", "holds"], report.estimates)
    _write(out / "structural.csv", ["key", "value"], report.structural)


class _Context:
    def __init__(self, sc: Scenario, n_paths, seed, workers):
        self.sc = sc
        self.n_paths = int(sc.solver["n_paths"] if n_paths is None else n_paths)
        self.seed = int(sc.solver["seed"] if seed is None else seed)
        self.workers = int(workers or sc.solver.get("workers", 1))
        self.problem = LinearProblem(sc.gen, sc.phi, sc.mu)
        self._u = None
        self._semi = None
        self._form = None

    @property
    def form(self):
        if self._form is None:
            self._form = structural_report(self.sc.gen)
        return self._form

    @property
    def u(self) -> SpaceTimeField:
        if self._u is None:
            self._u = solve_backward(self.problem).u
        return self._u

    def semilinear(self):
        if self._semi is None:
            sc = self.sc
            self._semi = solve_semilinear(sc.gen, sc.phi, sc.mu, sc.driver, tol=sc.solver["tol"])
        return self._semi


def _check_duality(ctx, rep):
    rng = np.random.default_rng([ctx.seed, 11])
    g = ctx.sc.grid
    for k in range(5):
        eta = SpaceTimeField(rng.random((g.n_steps + 1, g.n_nodes)), g)
        r = check_duality(ctx.u, ctx.problem, eta)
        thr = 1e-9 * duality_scale(ctx.u, ctx.problem, eta)
        rep.add("duality", f"eta{k}", r, thr, r <= thr)


def _check_weak_form(ctx, rep):
    rng = np.random.default_rng([ctx.seed, 12])
    g = ctx.sc.grid
    eta = SpaceTimeField(np.tile(rng.random(g.n_nodes), (g.n_steps + 1, 1)), g)
    rep.add("weak_form", "max_residual", check_weak_form(ctx.u, ctx.problem, eta))


def _check_mc(ctx, rep):
    res = solve_fk_mc(ctx.problem, ctx.n_paths, ctx.seed, workers=ctx.workers)
    rep.u_mc, rep.mc_stderr = res.u, res.stderr
    diff = np.abs(res.u.values - ctx.u.values)
    scale = max(1.0, ctx.u.sup())
    ok = diff <= 3 * res.stderr.values + 1e-9 * scale
    rep.add("mc", "fraction_within_3se", float(ok.mean()), 0.99, bool(ok.mean() >= 0.99))
    rep.add("mc", "max_abs_diff", float(diff.max()))


def _gamma_or_skip(ctx, rep, check):
    gamma = ctx.form.dual_markov_gamma
    if gamma is None:
        rep.add(check, "skipped", "no dual-Markov constant")
    return gamma


def _check_energy(ctx, rep):
    gamma = _gamma_or_skip(ctx, rep, "energy")
    if gamma is None:
        return
    top = ctx.u.sup()
    for frac in (0.25, 0.5, 1.0):
        r = energy_estimate(ctx.u, ctx.sc.gen, gamma, frac * top, ctx.sc.mu, ctx.sc.phi)
        rep.estimates.append((f"energy_k{frac}", r.lhs, r.rhs, r.margin, r.holds))


def _check_l1(ctx, rep):
    gamma = _gamma_or_skip(ctx, rep, "l1")
    if gamma is None:
        return
    r = l1_estimate(ctx.u, ctx.sc.phi, ctx.sc.mu, gamma)
    rep.estimates.append(("l1", r.lhs, r.rhs, r.margin, r.holds))
    rep.add("l1", "optimal_alpha", r.info["alpha"])


def _check_delta(ctx, rep):
    out = check_delta_condition(ctx.sc.gen)
    rep.add("delta", "holds", bool(out["holds"]), None, bool(out["holds"]))
    g = ctx.sc.grid
    gamma = ctx.form.dual_markov_gamma
    if gamma is not None:
        thr = np.exp(gamma * g.T) * g.T * (1 + 1e-9)
        rep.add("delta", "bound", out["bound"], thr, out["bound"] <= thr)
    else:
        rep.add("delta", "bound", out["bound"])


def green_profile(sc: Scenario) -> float:
    """``max (G^ 1)(s, x) / dist(x, boundary)`` over the grid."""
    g = sc.grid
    pot = adjoint_potential(sc.gen, 0.0, SpaceTimeField(np.ones((g.n_steps + 1, g.n_nodes)), g))
    return float(np.max(pot.values / g.boundary_distance()[None, :]))


def green_ratio_growth(sc: Scenario, levels: int = 3) -> list[float]:
    n = int(sc.raw["grid"]["n"])
    ratios = []
    for _ in range(levels):
        ratios.append(green_profile(sc.rebuild(n=n)))
        n = 2 * n + 1
    return ratios


def _check_green_ratio(ctx, rep):
    ratios = green_ratio_growth(ctx.sc)
    for k, r in enumerate(ratios):
        rep.add("green_ratio", f"max_ratio_level{k}", r)
    growth = max(b / a for a, b in zip(ratios[:-1], ratios[1:]))
    rep.add("green_ratio", "max_growth", growth, 1.10, growth <= 1.10)


def _check_structural(ctx, rep):
    pass


def revuz_errors(sc: Scenario) -> dict:
    g = sc.grid
    D, J, W = sc.mu.abs().arrays()
    f = SpaceTimeField.from_function(g, lambda t, x: 1.0 + 0.5 * x[:, 0] + 0 * t)
    h = SpaceTimeField.from_function(g, lambda t, x: 1.0 + 0 * x[:, 0] + 0 * t)
    beta = 1e3 * max(1.0, sc.gen.max_rate())
    out = {}
    for label, parts in (("density", (D, 0 * J, 0 * W)), ("atom", (0 * D, 0 * J, W))):
        if not np.any(parts[0]) and not np.any(parts[2]):
            continue
        rates = to_revuz_rates(MeasureData.from_arrays(g, *parts))
        got = resolvent_limit_af(sc.gen, rates, f, h, beta)
        want = revuz_target(rates, f, h)
        out[label] = abs(got - want) / abs(want)
    return out


def _check_revuz(ctx, rep):
    for label, err in revuz_errors(ctx.sc).items():
        rep.add("revuz", f"rel_error_{label}", err, 0.01, err <= 0.01)


def _check_classify(ctx, rep):
    c = classify(ctx.sc.mu, ctx.sc.gen)
    rep.add("classify", "in_M0b", c["in_M0b"], None, c["in_M0b"])
    rep.add("classify", "in_R", c["in_R"], None, c["in_R"])
    rep.add("classify", "in_qL1", c["in_qL1"])
    rep.add("classify", "tv", c["tv"])


def _check_tv(ctx, rep):
    mu = ctx.sc.mu.abs()
    r = tv_domination(mu, 2.0 * mu, ctx.sc.gen, ctx.form.dual_markov_gamma)
    if r.info["mode"] == "assert" and r.info["hypothesis"]:
        rep.estimates.append(("tv_domination", r.lhs, r.rhs, r.margin, r.holds))
    else:
        rep.add("tv", "exploratory_margin", r.margin)


def capacity_cells(sc: Scenario):
    spec = sc.capacity or {}
    g = sc.grid
    center = np.atleast_1d(np.asarray(spec.get("center", 0.5), dtype=float))
    radius = float(spec.get("radius", 0.1))
    t0, t1 = float(spec.get("t0", 0.0)), float(spec.get("t1", g.T))
    near = np.linalg.norm(g.nodes - center[None, :], axis=1) < radius
    tc = 0.5 * (g.times[:-1] + g.times[1:])
    during = (tc >= t0) & (tc < t1)
    return during[:, None] & near[None, :], float(spec.get("psi", 1.0))


def _check_capacity(ctx, rep):
    cells, psi = capacity_cells(ctx.sc)
    spec = ctx.sc.capacity or {}
    n = int(spec.get("n_paths", ctx.n_paths))
    out = estimate_capacity(ctx.sc.gen, cells, np.full(ctx.sc.grid.n_nodes, psi), n,
                            int(spec.get("seed", ctx.seed)))
    diff = abs(out["estimate"] - out["exact"])
    rep.add("capacity", "estimate", out["estimate"])
    rep.add("capacity", "exact", out["exact"])
    rep.add("capacity", "abs_diff", diff, 3 * out["stderr"], diff <= 3 * out["stderr"])
    rep.add("capacity", "estimate_h", out["estimate_h"])
    rep.add("capacity", "exact_h", out["exact_h"])


def semilinear_band(sc: Scenario, u: SpaceTimeField, tol: float) -> float:
    """Richardson estimate of the time-discretization error of ``u``."""
    fine = sc.rebuild(steps=2 * sc.grid.n_steps)
    uf = solve_semilinear(fine.gen, fine.phi, fine.mu, fine.driver, tol=tol).u.values[::2]
    return float(np.max(np.abs(u.values - uf)) * 4 / 3)


def _check_semilinear(ctx, rep):
    res = ctx.semilinear()
    rep.u_direct = res.u
    band = semilinear_band(ctx.sc, res.u, ctx.sc.solver["tol"])
    mr = martingale_residual(res.u, ctx.problem, ctx.sc.driver, ctx.n_paths, ctx.seed,
                             workers=ctx.workers)
    rep.u_mc, rep.mc_stderr = mr.mc_mean, mr.stderr
    ok = mr.within(3.0, band)
    rep.add("semilinear", "method", res.method)
    rep.add("semilinear", "discretization_band", band)
    rep.add("semilinear", "fraction_within_3se_band", float(ok.mean()), 0.99, bool(ok.mean() >= 0.99))


def _check_bsde(ctx, rep):
    res = ctx.semilinear()
    g = ctx.sc.grid
    n = int(ctx.sc.solver.get("bsde_paths", 10 * ctx.n_paths))
    z = (0, g.n_nodes // 2)
    out = terminal_martingale(res.u, ctx.problem, ctx.sc.driver, z, n, ctx.seed)
    band = semilinear_band(ctx.sc, res.u, ctx.sc.solver["tol"])
    rep.add("bsde", "mean_M", out["mean"], 3 * out["stderr"] + band,
            abs(out["mean"]) <= 3 * out["stderr"] + band)
    rep.add("bsde", "stderr_M", out["stderr"])
    rep.add("bsde", "max_telescoping_residual", out["max_residual"], 1e-10,
            out["max_residual"] <= 1e-10)


def _check_comparison(ctx, rep):
    sc = ctx.sc
    res = ctx.semilinear()
    g = sc.grid
    extra = MeasureData(g, atoms=[(g.n_steps // 2, g.n_nodes // 2, 0.2)])
    phi2 = sc.phi + 0.1
    mu2 = sc.mu + extra
    u2 = solve_semilinear(sc.gen, phi2, mu2, sc.driver, tol=sc.solver["tol"]).u
    chk = check_comparison(SemilinearInputs(sc.phi, sc.mu, sc.driver),
                           SemilinearInputs(phi2, mu2, sc.driver), res.u, u2)
    if chk["skipped"]:
        rep.add("comparison", "skipped", chk["reason"])
    else:
        rep.add("comparison", "worst_violation", chk["worst_violation"], 1e-10 * chk["scale"],
                chk["ordered"])


def _check_driver_l1(ctx, rep):
    gamma = _gamma_or_skip(ctx, rep, "driver_l1")
    if gamma is None:
        return
    out = check_driver_l1(ctx.semilinear().u, ctx.problem, ctx.sc.driver, gamma)
    rep.estimates.append(("driver_l1", out["lhs"], out["rhs"], out["rhs"] - out["lhs"], out["holds"]))


CHECKS = {"duality": _check_duality, "weak_form": _check_weak_form, "mc": _check_mc,
          "energy": _check_energy, "l1": _check_l1, "delta": _check_delta,
          "green_ratio": _check_green_ratio, "structural": _check_structural,
          "revuz": _check_revuz, "classify": _check_classify, "tv": _check_tv,
          "capacity": _check_capacity, "semilinear": _check_semilinear, "bsde": _check_bsde,
          "comparison": _check_comparison, "driver_l1": _check_driver_l1}


def run_scenario(sc: Scenario, n_paths=None, seed=None, workers=None, only=None) -> RunReport:
    ctx = _Context(sc, n_paths, seed, workers)
    rep = RunReport(sc.name)
    rep.structural = ctx.form.rows()
    checks = sc.checks if only is None else [c for c in sc.checks if c in only]
    if sc.driver is None:
        rep.u_direct = ctx.u
    for name in checks:
        if name == "mc" and ctx.n_paths == 0:
            rep.add("mc", "skipped", "n_paths = 0")
            continue
        try:
            CHECKS[name](ctx, rep)
        except (ArithmeticError, np.linalg.LinAlgError) as exc:
            raise NumericFailure(name, exc) from exc
        except ValueError as exc:
            if type(exc).__name__ in ("ScenarioError",):
                raise
            raise NumericFailure(name, exc) from exc
    if rep.u_direct is None:
        rep.u_direct = ctx.u
    return rep
