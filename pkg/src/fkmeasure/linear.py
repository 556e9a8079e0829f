"""Linear Cauchy problem ``-du/dt - L_t u = mu, u(T) = phi`` on a grid.

Three routes are provided: Monte Carlo over chain paths, the direct
backward evolution, and resolvents with their discrete adjoints.

The direct solve is exact in time for the discrete data: densities are
piecewise linear in time, atoms are constant rates on their cell, slices
are jumps at mesh times.  The adjoint objects are the exact transposes of
the direct solve with respect to the trapezoid pairing, so the duality and
adjointness identities hold to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import SpaceTimeField, SpaceTimeGrid, m_inner, spacetime_inner
from .measures import MeasureData, RevuzRates, to_revuz_rates
from .operators import GeneratorFamily, adjoint
from .propagation import Propagator, _augmented_action, van_loan_blocks


class LinearError(ValueError):
    pass


@dataclass(eq=False)
class LinearProblem:
    gen: GeneratorFamily
    phi: np.ndarray
    mu: MeasureData | None = None

    def __post_init__(self):
        g = self.gen.grid
        self.phi = np.asarray(self.phi, dtype=float)
        if self.phi.shape != (g.n_nodes,) or not np.all(np.isfinite(self.phi)):
            raise LinearError("terminal data must be a finite node vector")
        if self.mu is None:
            self.mu = MeasureData.zero(g)
        elif not self.mu.grid.same_as(g):
            raise LinearError("measure lives on another grid")

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.gen.grid


@dataclass(eq=False)
class SolveResult:
    u: SpaceTimeField
    method: str
    stderr: SpaceTimeField | None = None
    info: dict = field(default_factory=dict)


def propagator(gen: GeneratorFamily, alpha: float = 0.0, dual: bool = False) -> Propagator:
    """Cached cell propagator of ``Q - alpha`` (or of the ``m``-adjoint)."""
    cache = gen.__dict__.setdefault("_propagators", {})
    key = (float(alpha), dual)
    if key not in cache:
        fam = adjoint(gen) if dual else gen
        cache[key] = Propagator([s.Q for s in fam.stages], gen.grid.dt, gen.cell_stage, shift=alpha)
    return cache[key]


def _backward_values(gen, phi, D, J, R, alpha=0.0) -> np.ndarray:
    g = gen.grid
    prop = propagator(gen, alpha)
    M = g.n_steps
    U = np.empty((M + 1, g.n_nodes))
    U[M] = phi
    dt = g.dt
    for i in range(M - 1, -1, -1):
        # time-to-go s from t_{i+1}: rate = D_{i+1} + R_i + (D_i - D_{i+1}) s / h
        c0 = D[i + 1] + R[i]
        c1 = (D[i] - D[i + 1]) / dt[i]
        U[i] = prop.evolve(i, U[i + 1] + J[i + 1], c0, c1)
    return U


def solve_backward(problem: LinearProblem, alpha: float = 0.0) -> SolveResult:
    g = problem.grid
    rates = to_revuz_rates(problem.mu)
    U = _backward_values(problem.gen, problem.phi, rates.density, rates.jumps, rates.atom_rate, alpha)
    return SolveResult(SpaceTimeField(U, g), "direct")


def resolvent(gen: GeneratorFamily, alpha: float, f: SpaceTimeField) -> SpaceTimeField:
    if alpha < 0:
        raise LinearError("resolvent parameter must be nonnegative")
    g = gen.grid
    zero_lvl = np.zeros((g.n_steps + 1, g.n_nodes))
    U = _backward_values(gen, np.zeros(g.n_nodes), f.values, zero_lvl, zero_lvl[:-1], alpha)
    return SpaceTimeField(U, g)


@dataclass(eq=False)
class AdjointPairing:
    """Exact transpose of the direct solve for a weight ``eta``.

    ``lam[k]``  pairs with terminal data (``k = M``),
    ``before[k]`` pairs with a slice at ``t_k``,
    ``density_dual[k]`` pairs (trapezoid weight) with a density value at ``t_k``,
    ``atom_dual[i]`` pairs with an atom mass on cell ``i``.
    """

    grid: SpaceTimeGrid
    lam: np.ndarray
    before: np.ndarray
    density_dual: np.ndarray
    atom_dual: np.ndarray

    def terminal(self) -> np.ndarray:
        return self.lam[-1]

    def pair(self, phi, mu: MeasureData | None) -> float:
        g = self.grid
        total = m_inner(phi, self.lam[-1], g)
        if mu is not None:
            total += self.pair_measure(mu)
        return total

    def pair_measure(self, mu: MeasureData) -> float:
        g = self.grid
        D, J, W = mu.arrays()
        c = g.time_weights()
        out = float(((D * self.density_dual) @ g.cell_measure) @ c)
        out += float(((J * self.before) @ g.cell_measure).sum())
        out += float((W * self.atom_dual).sum())
        return out

    def sup_norm(self) -> float:
        return float(max(np.abs(self.lam[-1]).max(), np.abs(self.before[1:]).max(),
                         np.abs(self.density_dual).max(), np.abs(self.atom_dual).max()))


def adjoint_pairing(gen: GeneratorFamily, alpha: float, eta: SpaceTimeField) -> AdjointPairing:
    g = gen.grid
    prop = propagator(gen, alpha, dual=True)
    M, N = g.n_steps, g.n_nodes
    c = g.time_weights()
    dt = g.dt
    E = eta.values
    lam = np.empty((M + 1, N))
    before = np.zeros((M + 1, N))
    dens = np.zeros((M + 1, N))
    atom = np.zeros((M, N))
    lam[0] = c[0] * E[0]
    for i in range(M):
        P_l, F1_l, F2_l = prop.adjoint_parts(i, lam[i])
        before[i + 1] = P_l
        lam[i + 1] = P_l + c[i + 1] * E[i + 1]
        dens[i] += F2_l / dt[i]
        dens[i + 1] += F1_l - F2_l / dt[i]
        atom[i] = F1_l / dt[i]
    dens /= c[:, None]
    return AdjointPairing(g, lam, before, dens, atom)


def adjoint_resolvent(gen: GeneratorFamily, alpha: float, eta: SpaceTimeField) -> SpaceTimeField:
    """Transpose of :func:`resolvent` for the trapezoid space-time pairing."""
    if alpha < 0:
        raise LinearError("resolvent parameter must be nonnegative")
    return SpaceTimeField(adjoint_pairing(gen, alpha, eta).density_dual, gen.grid)


def adjoint_potential(gen: GeneratorFamily, alpha: float, eta: SpaceTimeField) -> SpaceTimeField:
    """Forward evolution from zero with the adjoint generator and source ``eta``.

    Pointwise approximation of the adjoint potential (exact in time for
    ``eta`` piecewise linear).  Differs from :func:`adjoint_resolvent` by
    ``O(dt)`` at the ends of the time mesh.
    """
    g = gen.grid
    prop = propagator(gen, alpha, dual=True)
    E = eta.values
    V = np.zeros_like(E)
    for i in range(g.n_steps):
        V[i + 1] = prop.evolve(i, V[i], E[i], (E[i + 1] - E[i]) / g.dt[i])
    return SpaceTimeField(V, g)


def check_delta_condition(gen: GeneratorFamily, alpha: float = 0.0) -> dict:
    g = gen.grid
    ones = SpaceTimeField(np.ones((g.n_steps + 1, g.n_nodes)), g)
    candidates = [ones] + [SpaceTimeField(np.tile(np.eye(g.n_nodes)[j] + 1e-3, (g.n_steps + 1, 1)), g)
                           for j in range(g.n_nodes)]
    for eta in candidates:
        pot = adjoint_potential(gen, alpha, eta)
        if np.all(np.isfinite(pot.values)):
            return {"holds": True, "eta": eta, "bound": pot.sup(), "potential": pot}
    return {"holds": False, "eta": None, "bound": np.inf, "potential": None}


def duality_scale(u: SpaceTimeField, problem: LinearProblem, eta: SpaceTimeField) -> float:
    from .measures import total_variation

    g = problem.grid
    l1_phi = m_inner(np.abs(problem.phi), np.ones(g.n_nodes), g)
    return max(1.0, u.sup() * eta.sup() * g.T * g.cell_measure.sum(),
               (l1_phi + total_variation(problem.mu)) * eta.sup() * g.T)


def check_duality(u: SpaceTimeField, problem: LinearProblem, eta: SpaceTimeField) -> float:
    """Residual of ``(u, eta) = (phi, G^eta(T)) + int G^eta dmu``."""
    if np.any(eta.values < 0):
        raise LinearError("duality weight must be nonnegative")
    pairing = adjoint_pairing(problem.gen, 0.0, eta)
    return abs(spacetime_inner(u, eta) - pairing.pair(problem.phi, problem.mu))


def check_weak_form(u: SpaceTimeField, problem: LinearProblem, eta: SpaceTimeField) -> float:
    """Max over mesh times of the weak-form identity residual (trapezoid in time)."""
    g = problem.grid
    gen = problem.gen
    D, J, W = problem.mu.arrays()
    m = g.cell_measure
    U, E = u.values, eta.values
    dt = g.dt
    M = g.n_steps
    left = U[M] @ (E[M] * m)
    rhs = problem.phi @ (E[M] * m)
    worst = abs(left - rhs)
    integral = 0.0  # int_t^T (u, d eta) + B(u, eta) - d mu(eta)
    for i in range(M - 1, -1, -1):
        Q = gen.stages[gen.cell_stage(i)].Q
        u0, u1 = U[i], U[i + 1] + J[i + 1]
        e0, e1 = E[i], E[i + 1]
        form = 0.5 * dt[i] * (-(Q @ u0) @ (e0 * m) - (Q @ u1) @ (e1 * m))
        deta = (0.5 * (u0 + u1)) @ ((e1 - e0) * m)
        meas = 0.5 * dt[i] * (D[i] @ (e0 * m) + D[i + 1] @ (e1 * m))
        meas += J[i + 1] @ (e1 * m) + W[i] @ (0.5 * (e0 + e1))
        integral += deta + form - meas
        worst = max(worst, abs(U[i] @ (e0 * m) + integral - rhs))
    return float(worst)


def resolvent_limit_af(gen: GeneratorFamily, rates: RevuzRates, f: SpaceTimeField,
                       h: SpaceTimeField, beta: float) -> float:
    """``beta (h, U_A^beta f)`` with the pairing integrated exactly inside cells."""
    if beta <= 0:
        raise LinearError("beta must be positive")
    g = gen.grid
    mu = rates.to_measure().weighted(f)
    fr = to_revuz_rates(mu)
    prop = propagator(gen, beta)
    M = g.n_steps
    y = np.zeros(g.n_nodes)
    H = h.values
    total = 0.0
    for i in range(M - 1, -1, -1):
        c0 = fr.density[i + 1] + fr.atom_rate[i]
        c1 = (fr.density[i] - fr.density[i + 1]) / g.dt[i]
        y, Jint = prop.evolve_with_integral(i, y + fr.jumps[i + 1], c0, c1)
        total += m_inner(0.5 * (H[i] + H[i + 1]), Jint, g)
    return beta * total


def revuz_target(rates: RevuzRates, f: SpaceTimeField, h: SpaceTimeField) -> float:
    """``int f h dmu`` with the cell conventions of :func:`resolvent_limit_af`."""
    g = rates.grid
    mu = rates.to_measure().weighted(f)
    D, J, W = mu.arrays()
    Hbar = 0.5 * (h.values[:-1] + h.values[1:])
    m = g.cell_measure
    dens = float(np.sum(g.dt[:, None] * Hbar * 0.5 * (D[:-1] + D[1:]) * m[None, :]))
    slices = float(np.sum(Hbar * J[1:] * m[None, :]))
    return dens + slices + float(np.sum(W * Hbar))


def hitting_laplace(gen: GeneratorFamily, cells: np.ndarray, discount: float = 1.0) -> np.ndarray:
    """``E_z exp(-discount * S_B)`` at mesh points, ``B`` a boolean ``(M, N)`` cell set.

    Cell ``(i, j)`` is ``[t_i, t_{i+1}) x {j}``; the path dies at ``T`` and
    at killing, after which it never hits.
    """
    g = gen.grid
    cells = np.asarray(cells, dtype=bool)
    if cells.shape != (g.n_steps, g.n_nodes):
        raise LinearError("cell set has wrong shape")
    M, N = g.n_steps, g.n_nodes
    V = np.zeros((M + 1, N))
    cache = {}
    for i in range(M - 1, -1, -1):
        inB = cells[i]
        V[i, inB] = 1.0
        off = ~inB
        if not off.any():
            continue
        k = gen.cell_stage(i)
        Q = gen.stages[k].Q
        key = (k, float(g.dt[i]), inB.tobytes())
        if key not in cache:
            Aoo = Q[off][:, off] - discount * np.eye(off.sum()) if N <= 400 else None
            forcing = np.asarray(Q[off][:, inB].sum(axis=1)).ravel()
            if Aoo is not None:
                P, F1 = van_loan_blocks(np.asarray(Aoo), g.dt[i], order=1)
                cache[key] = ("dense", P, F1 @ forcing)
            else:
                import scipy.sparse as sp
                A = (Q[off][:, off] - discount * sp.identity(off.sum())).tocsr()
                cache[key] = ("sparse", A, forcing)
        kind, A, b = cache[key]
        if kind == "dense":
            V[i, off] = A @ V[i + 1, off] + b
        else:
            V[i, off] = _augmented_action(A, g.dt[i], V[i + 1, off], b, None)
    return V


def capacity_exact(gen: GeneratorFamily, cells: np.ndarray, psi) -> float:
    """``sum_z w_z E_z e^{-S_B}`` with start weights ``psi(t_i, x_j) dt_i m_j`` on cell starts."""
    g = gen.grid
    V = hitting_laplace(gen, cells)
    return float(np.sum(_start_weights(g, psi) * V[:-1]))


def _start_weights(grid: SpaceTimeGrid, psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=float)
    if psi.ndim == 1:
        psi = np.broadcast_to(psi, (grid.n_steps, grid.n_nodes))
    elif psi.shape[0] == grid.n_steps + 1:
        psi = psi[:-1]
    return psi * grid.dt[:, None] * grid.cell_measure[None, :]


def solve_fk_mc(problem: LinearProblem, n_paths: int, rng_seed: int, workers: int = 1,
                levels=None) -> SolveResult:
    """Sample mean of terminal payoff plus accumulated functional, per start cell."""
    from .process import run_levels

    if n_paths < 1:
        raise LinearError("need at least one path")
    g = problem.grid
    rates = to_revuz_rates(problem.mu)
    mean, err = run_levels(problem.gen, problem.phi, rates, n_paths, rng_seed,
                           workers=workers, levels=levels)
    return SolveResult(SpaceTimeField(mean, g), "mc", SpaceTimeField(err, g),
                       {"n_paths": n_paths, "seed": rng_seed})
