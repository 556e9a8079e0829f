"""Semilinear problem ``-du/dt - L_t u = f(t, x, u) + mu``, ``u(T) = phi``.

Two solution routes:

* Picard iteration for Lipschitz drivers: each sweep is an exact linear
  solve with ``f(u)`` as a piecewise-linear density.  The iteration runs on
  ``e^{gamma t} u`` with ``gamma = max(0, alpha)``, which turns the driver
  into a nonincreasing one; the ``-gamma u`` part is applied as extra killing.
* Semi-implicit exponential trapezoid stepping for monotone drivers without
  a global Lipschitz bound; each node solves a monotone scalar equation.

The pathwise side reconstructs ``Y_t = u(tau(t), X_t)`` and the martingale
part along simulated paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .grid import SpaceTimeField, m_inner, spacetime_l1
from .linear import LinearProblem, SolveResult, _backward_values, propagator
from .measures import MeasureData, RevuzRates, to_revuz_rates, total_variation
from .operators import GeneratorFamily
from .process import PathSample, accumulate, run_levels


class SemilinearError(ValueError):
    pass


class IterationError(SemilinearError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (last residual {residual:.3e})")
        self.residual = residual


class StepSizeError(SemilinearError):
    pass


@dataclass(eq=False)
class Driver:
    """Nonlinearity ``f(t, x, y)``, vectorized over nodes.

    ``alpha`` is the one-sided bound ``(f(y) - f(y'))(y - y') <= alpha |y - y'|^2``;
    ``lipschitz`` is ``None`` when no global bound in ``y`` exists.
    """

    eval: Callable
    alpha: float
    lipschitz: float | None = None
    name: str = "custom"
    dfdy: Callable | None = None
    params: dict = field(default_factory=dict)

    def __call__(self, t, x, y):
        return np.asarray(self.eval(t, x, y), dtype=float) * np.ones_like(y, dtype=float)

    def derivative(self, t, x, y, eps=1e-7):
        if self.dfdy is not None:
            return np.asarray(self.dfdy(t, x, y), dtype=float) * np.ones_like(y, dtype=float)
        step = eps * np.maximum(1.0, np.abs(y))
        return (self(t, x, y + step) - self(t, x, y - step)) / (2 * step)


def linear_driver(c: float = -1.0, source: float = 0.0) -> Driver:
    """``f = c y + source``."""
    return Driver(lambda t, x, y: c * y + source, alpha=c, lipschitz=abs(c), name="linear",
                  dfdy=lambda t, x, y: np.full_like(y, c), params={"c": c, "source": source})


def cubic_driver(c: float = 1.0, source: float = 0.0) -> Driver:
    """``f = -c y^3 + source`` (monotone, not globally Lipschitz)."""
    if c < 0:
        raise SemilinearError("cubic driver needs c >= 0 to be monotone")
    return Driver(lambda t, x, y: -c * y ** 3 + source, alpha=0.0, lipschitz=None, name="cubic",
                  dfdy=lambda t, x, y: -3 * c * y ** 2, params={"c": c, "source": source})


def saturating_driver(c: float = 1.0, scale: float = 1.0, source: float = 0.0) -> Driver:
    """``f = -c tanh(y / scale) + source``."""
    if c < 0 or scale <= 0:
        raise SemilinearError("saturating driver needs c >= 0 and scale > 0")
    return Driver(lambda t, x, y: -c * np.tanh(y / scale) + source, alpha=0.0,
                  lipschitz=c / scale, name="saturating",
                  dfdy=lambda t, x, y: -c / scale / np.cosh(y / scale) ** 2,
                  params={"c": c, "scale": scale, "source": source})


DRIVERS = {"linear": linear_driver, "cubic": cubic_driver, "saturating": saturating_driver}


def make_driver(name: str, **params) -> Driver:
    if name not in DRIVERS:
        raise SemilinearError(f"unknown driver {name!r}; choose from {sorted(DRIVERS)}")
    return DRIVERS[name](**params)


def check_monotone(driver: Driver, grid, n: int = 2000, y_range: float = 10.0, seed: int = 0) -> dict:
    """Spot-check the one-sided bound on random ``(t, x, y, y')``."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(max(1, n // grid.n_nodes)):
        t = rng.uniform(0, grid.T)
        y = rng.uniform(-y_range, y_range, grid.n_nodes)
        yp = rng.uniform(-y_range, y_range, grid.n_nodes)
        lhs = (driver(t, grid.nodes, y) - driver(t, grid.nodes, yp)) * (y - yp)
        gap = lhs - driver.alpha * (y - yp) ** 2
        scale = np.maximum(1.0, np.abs(lhs))
        worst = max(worst, float(np.max(gap / scale)))
    return {"holds": worst <= 1e-10, "worst": worst}


def check_continuity(driver: Driver, grid, n: int = 2000, y_range: float = 10.0, seed: int = 0,
                     delta: float = 1e-8, tol: float = 1e-4) -> dict:
    """Sample ``|f(y + delta) - f(y)|`` for jumps; continuity is assumed, not proven."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(max(1, n // grid.n_nodes)):
        t = rng.uniform(0, grid.T)
        y = rng.uniform(-y_range, y_range, grid.n_nodes)
        jump = np.abs(driver(t, grid.nodes, y + delta) - driver(t, grid.nodes, y))
        worst = max(worst, float(jump.max()))
    return {"holds": worst <= tol, "worst": worst}


def _driver_field(driver: Driver, u: np.ndarray, grid) -> np.ndarray:
    return np.vstack([driver(grid.times[i], grid.nodes, u[i]) for i in range(grid.n_steps + 1)])


def solve_semilinear(gen: GeneratorFamily, phi, mu: MeasureData | None, driver: Driver,
                     tol: float = 1e-10, max_iter: int = 200, method: str = "auto",
                     gamma: float | None = None, initial: np.ndarray | None = None) -> SolveResult:
    """Solve the semilinear problem; ``method`` is ``auto``, ``picard`` or ``implicit``."""
    if tol <= 0:
        raise SemilinearError("tol must be positive")
    problem = LinearProblem(gen, phi, mu)
    g = gen.grid
    mono = check_monotone(driver, g)
    if not mono["holds"]:
        raise SemilinearError(f"driver {driver.name!r} violates its one-sided bound "
                              f"(worst excess {mono['worst']:.3e})")
    if method == "auto":
        method = "picard" if driver.lipschitz is not None else "implicit"
    if method == "picard":
        return _picard(problem, driver, tol, max_iter, gamma, initial)
    if method == "implicit":
        return _implicit(problem, driver, tol)
    raise SemilinearError(f"unknown method {method!r}")


def _picard(problem: LinearProblem, driver: Driver, tol, max_iter, gamma, initial) -> SolveResult:
    g = problem.grid
    gen = problem.gen
    gamma = max(0.0, driver.alpha) if gamma is None else float(gamma)
    if gamma < 0:
        raise SemilinearError("gamma shift must be nonnegative")
    rates = to_revuz_rates(problem.mu)
    ew = np.exp(gamma * g.times)[:, None]
    # transformed data: phi e^{gamma T}, mu e^{gamma t}; atoms use the cell average
    D = rates.density * ew
    J = rates.jumps * ew
    R = rates.atom_rate * 0.5 * (ew[:-1] + ew[1:])
    phi_t = problem.phi * np.exp(gamma * g.T)
    ft = lambda w: ew * _driver_field(driver, w / ew, g)  # noqa: E731
    if initial is None:
        w = _backward_values(gen, phi_t, D, J, R, gamma)
    else:
        w = np.asarray(initial, dtype=float) * ew
    resid = np.inf
    for k in range(1, max_iter + 1):
        w_new = _backward_values(gen, phi_t, D + ft(w), J, R, gamma)
        resid = float(np.max(np.abs(w_new - w) / ew))
        w = w_new
        if not np.all(np.isfinite(w)):
            raise IterationError("Picard iteration diverged", resid)
        if resid <= tol:
            u = w / ew
            return SolveResult(SpaceTimeField(u, g), "picard",
                               info={"iterations": k, "residual": resid, "gamma": gamma})
    raise IterationError(f"Picard iteration did not converge in {max_iter} sweeps", resid)


def _solve_scalar(driver: Driver, t, x, c, rhs, tol=1e-14, max_iter=200):
    """Solve ``y - c f(t, x, y) = rhs`` per node, ``y -> y - c f`` increasing."""
    g = lambda y: y - c * driver(t, x, y) - rhs  # noqa: E731
    y = rhs.copy()
    gy = g(y)
    width = np.maximum(1.0, np.abs(rhs))
    lo, hi = y.copy(), y.copy()
    glo, ghi = gy.copy(), gy.copy()
    for _ in range(200):
        need_lo = glo > 0
        need_hi = ghi < 0
        if not (need_lo.any() or need_hi.any()):
            break
        lo = np.where(need_lo, lo - width, lo)
        hi = np.where(need_hi, hi + width, hi)
        width = width * 2
        glo, ghi = g(lo), g(hi)
    else:
        raise SemilinearError("could not bracket the implicit step")
    for _ in range(max_iter):
        dg = 1.0 - c * driver.derivative(t, x, y)
        with np.errstate(divide="ignore", invalid="ignore"):
            yn = y - gy / dg
        bad = ~np.isfinite(yn) | (yn <= lo) | (yn >= hi)
        yn = np.where(bad, 0.5 * (lo + hi), yn)
        gn = g(yn)
        lo = np.where(gn <= 0, yn, lo)
        hi = np.where(gn >= 0, yn, hi)
        done = np.abs(yn - y) <= tol * np.maximum(1.0, np.abs(yn))
        y, gy = yn, gn
        if np.all(done | (gn == 0)):
            return y
    return y


def _implicit(problem: LinearProblem, driver: Driver, tol) -> SolveResult:
    g = problem.grid
    gen = problem.gen
    dt = g.dt
    if driver.alpha > 0 and np.max(dt) * driver.alpha >= 1:
        raise StepSizeError(f"time step {np.max(dt):.3g} too large for alpha={driver.alpha}: "
                            "need dt * alpha < 1")
    rates = to_revuz_rates(problem.mu)
    D, J, R = rates.density, rates.jumps, rates.atom_rate
    prop = propagator(gen, 0.0)
    M = g.n_steps
    U = np.empty((M + 1, g.n_nodes))
    U[M] = problem.phi
    x = g.nodes
    for i in range(M - 1, -1, -1):
        h = dt[i]
        after = U[i + 1] + J[i + 1]
        f_next = driver(g.times[i + 1], x, after)
        c0 = D[i + 1] + R[i]
        c1 = (D[i] - D[i + 1]) / h
        base = prop.evolve(i, after + 0.5 * h * f_next, c0, c1)
        U[i] = _solve_scalar(driver, g.times[i], x, 0.5 * h, base)
        if not np.all(np.isfinite(U[i])):
            raise SemilinearError(f"implicit step at t={g.times[i]} produced non-finite values")
    return SolveResult(SpaceTimeField(U, g), "implicit", info={"iterations": 1, "steps": M})


def driver_measure(u: SpaceTimeField, driver: Driver) -> MeasureData:
    """``f(., u) . m_1`` as a density measure."""
    g = u.grid
    return MeasureData(g, SpaceTimeField(_driver_field(driver, u.values, g), g))


def total_rates(u: SpaceTimeField, problem: LinearProblem, driver: Driver) -> RevuzRates:
    return to_revuz_rates(problem.mu + driver_measure(u, driver))


@dataclass(eq=False)
class BsdePath:
    """``Y`` at knots along one path and the martingale increments."""

    knots: np.ndarray
    Y: np.ndarray
    Y_left: np.ndarray
    M_increments: np.ndarray
    terminal: float
    residual: float

    @property
    def M_final(self) -> float:
        return float(self.M_increments.sum())


def _field_at(u: np.ndarray, grid, t: float, node: int, left: bool = False) -> float:
    """``u(t, node)`` linear between mesh times (left limit if asked)."""
    times = grid.times
    if left:
        i = int(np.clip(np.searchsorted(times, t, side="left") - 1, 0, grid.n_steps - 1))
    else:
        i = int(grid.cell_of(t))
    th = (t - times[i]) / (times[i + 1] - times[i])
    return float((1 - th) * u[i, node] + th * u[i + 1, node])


def reconstruct_bsde(u: SpaceTimeField, path: PathSample, problem: LinearProblem,
                     driver: Driver, rates: RevuzRates | None = None) -> BsdePath:
    g = problem.grid
    rates = total_rates(u, problem, driver) if rates is None else rates
    s0 = path.start[0]
    end = path.horizon_clip
    # left-limit field: u(t-) differs from u(t) at slice times
    U = u.values
    ULeft = U.copy()
    ULeft[1:] += rates.jumps[1:]
    mesh = g.times - s0
    knots = np.unique(np.concatenate([[0.0], mesh[(mesh > 0) & (mesh < end)],
                                      path.event_times[path.event_times < end], [end]]))
    Y = np.empty(knots.size)
    YL = np.empty(knots.size)
    A = np.empty(knots.size)
    for n, k in enumerate(knots):
        t = s0 + k
        node = int(path.node_at(k))
        prev = int(path.node_at(np.nextafter(k, -np.inf))) if k > 0 else node
        at_mesh = np.isclose(t, g.times, rtol=0, atol=1e-13 * max(1.0, g.T))
        if k == 0:
            Y[n] = YL[n] = _field_at(U, g, t, node)
        elif at_mesh.any():
            j = int(np.argmax(at_mesh))
            YL[n] = ULeft[j, prev]
            Y[n] = U[j, node]
        else:
            YL[n] = _field_at(U, g, t, prev, left=True)
            Y[n] = _field_at(U, g, t, node)
        A[n] = accumulate(path, rates, upto=k)
    terminal = float(problem.phi[path.final_node]) if path.survived else 0.0
    Y[-1] = terminal
    incr = np.diff(Y, prepend=Y[0]) + np.diff(A, prepend=0.0)
    incr[0] = 0.0
    resid = abs(Y[0] - (terminal + A[-1] - incr.sum()))
    return BsdePath(knots, Y, YL, incr, terminal, float(resid))


@dataclass(eq=False)
class MartingaleReport:
    residual: SpaceTimeField
    stderr: SpaceTimeField
    mc_mean: SpaceTimeField

    def within(self, k: float = 3.0, band: float = 0.0) -> np.ndarray:
        return self.residual.values <= k * self.stderr.values + band


def martingale_residual(u: SpaceTimeField, problem: LinearProblem, driver: Driver,
                        n_paths: int, seed, workers: int = 1, levels=None) -> MartingaleReport:
    """``|u(z) - E_z(terminal + int f(u) dt + A^mu)|`` per start point, by MC."""
    g = problem.grid
    rates = total_rates(u, problem, driver)
    mean, err = run_levels(problem.gen, problem.phi, rates, n_paths, seed, workers, levels)
    res = np.abs(u.values - mean)
    if levels is not None:
        keep = np.zeros(g.n_steps + 1, dtype=bool)
        keep[list(levels)] = True
        keep[-1] = True
        res[~keep] = 0.0
    return MartingaleReport(SpaceTimeField(res, g), SpaceTimeField(err, g), SpaceTimeField(mean, g))


@dataclass(eq=False)
class SemilinearInputs:
    phi: np.ndarray
    mu: MeasureData
    driver: Driver
    monotone: bool = True


def check_comparison(inputs1: SemilinearInputs, inputs2: SemilinearInputs,
                     u1: SpaceTimeField, u2: SpaceTimeField, n_samples: int = 200) -> dict:
    """Order check ``u1 <= u2`` after verifying the ordering hypotheses."""
    g = u1.grid
    reasons = []
    if np.any(np.asarray(inputs1.phi) > np.asarray(inputs2.phi)):
        reasons.append("terminal data not ordered")
    if not inputs1.mu.dominated_by(inputs2.mu):
        reasons.append("measures not ordered")
    if not (inputs1.monotone or inputs2.monotone):
        reasons.append("neither driver monotone")
    lo = min(u1.values.min(), u2.values.min())
    hi = max(u1.values.max(), u2.values.max())
    rng = np.random.default_rng(0)
    for _ in range(n_samples):
        t = rng.uniform(0, g.T)
        y = rng.uniform(lo, hi, g.n_nodes) if hi > lo else np.full(g.n_nodes, lo)
        if np.any(inputs1.driver(t, g.nodes, y) > inputs2.driver(t, g.nodes, y) + 1e-12):
            reasons.append("drivers not ordered")
            break
    if reasons:
        return {"ordered": None, "skipped": True, "reason": "; ".join(reasons),
                "worst_violation": np.nan}
    scale = max(1.0, u1.sup(), u2.sup())
    worst = float(max(0.0, np.max(u1.values - u2.values)))
    return {"ordered": worst <= 1e-10 * scale, "skipped": False, "reason": "",
            "worst_violation": worst, "scale": scale}


def l1_constant(alpha: float, T: float, gamma: float) -> float:
    """Implementation-defined constant ``e^{(|alpha| + gamma) T} (1 + gamma T)``."""
    return float(np.exp((abs(alpha) + gamma) * T) * (1 + gamma * T))


def check_driver_l1(u: SpaceTimeField, problem: LinearProblem, driver: Driver, gamma: float) -> dict:
    if gamma is None:
        raise SemilinearError("the L1 driver bound needs the dual-Markov constant gamma")
    g = problem.grid
    fu = SpaceTimeField(_driver_field(driver, u.values, g), g)
    f0 = SpaceTimeField(_driver_field(driver, np.zeros_like(u.values), g), g)
    lhs = spacetime_l1(fu)
    data = (total_variation(problem.mu) + m_inner(np.abs(problem.phi), np.ones(g.n_nodes), g)
            + spacetime_l1(f0))
    C = l1_constant(driver.alpha, g.T, gamma)
    rhs = C * data
    return {"lhs": lhs, "rhs": rhs, "holds": lhs <= rhs + 1e-10 * max(1.0, rhs), "constant": C}


def terminal_martingale(u: SpaceTimeField, problem: LinearProblem, driver: Driver, z,
                        n_paths: int, seed, n_reconstruct: int = 200) -> dict:
    """Samples of ``M`` at the clipped lifetime from mesh point ``z = (level, node)``.

    ``M_end = terminal + int f(u) dt + A^mu - u(z)``, the telescoped sum of the
    pathwise increments; the first ``n_reconstruct`` paths are rebuilt knot by
    knot as a consistency check.
    """
    from .process import simulate

    g = problem.grid
    level, node = int(z[0]), int(z[1])
    rates = total_rates(u, problem, driver)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), level, node]))
    s = g.times[level]
    res = simulate(problem.gen, np.full(n_paths, s), np.full(n_paths, node), rng,
                   rates=rates, record=True)
    payoff = np.where(res["survived"], problem.phi[res["final"]], 0.0)
    M = payoff + res["acc"] - u.values[level, node]
    worst = 0.0
    for p in range(min(n_reconstruct, n_paths)):
        et, ek = res["events"][p]
        life = res["lifetime"][p]
        path = PathSample((s, node), et, ek, life, min(life, g.T - s), g)
        b = reconstruct_bsde(u, path, problem, driver, rates)
        worst = max(worst, b.residual, abs(b.M_final - M[p]))
    return {"mean": float(M.mean()), "stderr": float(M.std(ddof=1) / np.sqrt(n_paths)),
            "samples": M, "max_residual": worst}
