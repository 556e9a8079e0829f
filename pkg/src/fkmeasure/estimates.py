"""A-priori estimates: truncation, time mollification, energy and L1 bounds,
and total-variation domination of measures with ordered potentials."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .grid import SpaceTimeField, m_inner, spacetime_l1
from .linear import LinearProblem, solve_backward
from .measures import MeasureData, total_variation
from .operators import GeneratorFamily, structural_report


class EstimateError(ValueError):
    pass


class PreconditionError(EstimateError):
    pass


@dataclass
class EstimateReport:
    name: str
    lhs: float
    rhs: float
    holds: bool | None = None
    margin: float = field(init=False)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.margin = float(self.rhs - self.lhs)
        if self.holds is None and np.isfinite(self.margin):
            scale = max(1.0, abs(self.lhs), abs(self.rhs))
            self.holds = bool(self.margin >= -1e-10 * scale)

    def row(self) -> tuple:
        return (self.name, self.lhs, self.rhs, self.margin, self.holds)


def truncate(u, k: float):
    """Clamp to ``[-k, k]``."""
    if k < 0:
        raise EstimateError("truncation level must be nonnegative")
    if isinstance(u, SpaceTimeField):
        return SpaceTimeField(np.clip(u.values, -k, k), u.grid)
    return np.clip(u, -k, k)


def mollify(w: SpaceTimeField, m_rate: float) -> SpaceTimeField:
    """Causal average ``int_0^t m e^{-m(t-s)} w(s) ds`` (zero before 0).

    Exact for ``w`` linear between mesh times.
    """
    if m_rate <= 0:
        raise EstimateError("mollifier rate must be positive")
    g = w.grid
    W = w.values
    Y = np.zeros_like(W)
    for i in range(g.n_steps):
        a = m_rate * g.dt[i]
        E = np.exp(-a)
        ramp = 1.0 - (-np.expm1(-a)) / a
        Y[i + 1] = E * Y[i] + W[i] * (-np.expm1(-a)) + (W[i + 1] - W[i]) * ramp
    return SpaceTimeField(Y, g)


def _require_gamma(gamma, what):
    if gamma is None:
        raise PreconditionError(f"{what} requires the dual Markov property of the shifted form "
                                "(no dual-Markov constant gamma available)")


def energy_estimate(u: SpaceTimeField, gen: GeneratorFamily, gamma, k: float,
                    mu: MeasureData, phi) -> EstimateReport:
    """``sum_i dt_i B_gamma(T_k u_i, T_k u_i)`` against ``k (|mu| + |phi|_1 + gamma |u|_1)``."""
    _require_gamma(gamma, "the energy estimate")
    g = u.grid
    m = g.cell_measure
    Tk = truncate(u, k).values
    lhs = 0.0
    for i in range(g.n_steps):
        Q = gen.stages[gen.cell_stage(i)].Q
        v = Tk[i]
        lhs += g.dt[i] * (-(Q @ v) @ (v * m) + gamma * v @ (v * m))
    phi = np.asarray(phi, dtype=float)
    rhs = k * (total_variation(mu) + m_inner(np.abs(phi), np.ones(g.n_nodes), g)
               + gamma * spacetime_l1(u))
    return EstimateReport("energy", float(lhs), float(rhs), info={"k": k, "gamma": gamma})


def l1_rhs(alpha: float, T: float, gamma: float, data: float) -> float:
    return float(np.exp(T * (alpha + gamma)) / alpha * data)


def optimal_alpha(T: float, gamma: float) -> float:
    res = minimize_scalar(lambda la: -la + T * np.exp(la), bounds=(-30, 30), method="bounded",
                          options={"xatol": 1e-12})
    return float(np.exp(res.x))


def l1_estimate(u: SpaceTimeField, phi, mu: MeasureData, gamma, alpha: float | None = None) -> EstimateReport:
    """``|u|_L1 <= alpha^{-1} e^{T(alpha + gamma)} (|phi|_1 + |mu|)``; ``alpha=None`` uses the minimizer."""
    _require_gamma(gamma, "the L1 estimate")
    g = u.grid
    best = optimal_alpha(g.T, gamma)
    if alpha is None:
        alpha = best
    if alpha <= 0:
        raise EstimateError("alpha must be positive")
    phi = np.asarray(phi, dtype=float)
    data = m_inner(np.abs(phi), np.ones(g.n_nodes), g) + total_variation(mu)
    lhs = spacetime_l1(u)
    return EstimateReport("l1", lhs, l1_rhs(alpha, g.T, gamma, data),
                          info={"alpha": alpha, "optimal_alpha": best, "gamma": gamma})


def tv_domination(mu: MeasureData, nu: MeasureData, gen: GeneratorFamily,
                  gamma: float | None = None, rtol: float = 1e-12) -> EstimateReport:
    """``|mu|_TV <= |nu|_TV`` for ``mu, nu >= 0`` with ordered potentials.

    The potential ordering is checked by direct solves.  The inequality is
    asserted only when the dual-Markov constant is 0; otherwise it is
    reported in exploratory mode.
    """
    if not (mu.is_nonnegative() and nu.is_nonnegative()):
        raise EstimateError("total-variation domination needs nonnegative measures")
    g = gen.grid
    if gamma is None:
        gamma = structural_report(gen).dual_markov_gamma
    zero = np.zeros(g.n_nodes)
    Rmu = solve_backward(LinearProblem(gen, zero, mu)).u.values
    Rnu = solve_backward(LinearProblem(gen, zero, nu)).u.values
    scale = max(1.0, np.abs(Rnu).max())
    gap = float(np.max(Rmu - Rnu))
    ordered = gap <= rtol * scale
    lhs, rhs = total_variation(mu), total_variation(nu)
    mode = "assert" if gamma == 0 else "exploratory"
    if not ordered:
        rep = EstimateReport("tv_domination", lhs, rhs,
                             info={"hypothesis": False, "mode": mode, "potential_gap": gap,
                                   "message": "hypothesis not satisfied"})
        rep.holds = None
        return rep
    return EstimateReport("tv_domination", lhs, rhs,
                          info={"hypothesis": True, "mode": mode, "potential_gap": gap})
