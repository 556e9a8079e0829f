"""Sub-Markov generators on a grid and the bilinear forms they define.

A generator family is piecewise constant in time: each stage holds one rate
matrix ``Q`` with nonnegative off-diagonals and nonpositive row sums.  The
row-sum deficit is the killing rate.  The associated form is
``B(u, v) = -(Q u, v)_m``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import gamma as gamma_fn

from .grid import SpaceTimeGrid, m_inner


class OperatorError(ValueError):
    pass


@dataclass(frozen=True)
class Stage:
    t0: float
    t1: float
    Q: sp.csr_matrix


@dataclass(eq=False)
class GeneratorFamily:
    grid: SpaceTimeGrid
    stages: list[Stage]
    kind: str = "custom"
    _adjoint_of: "GeneratorFamily | None" = field(default=None, repr=False)

    def __post_init__(self):
        if not self.stages:
            raise OperatorError("generator needs at least one stage")
        T = self.grid.T
        edges = [self.stages[0].t0] + [s.t1 for s in self.stages]
        if abs(edges[0]) > 1e-12 or abs(edges[-1] - T) > 1e-12 * max(T, 1):
            raise OperatorError("stages must cover [0, T]")
        for a, b in zip(self.stages[:-1], self.stages[1:]):
            if abs(a.t1 - b.t0) > 1e-12 * max(T, 1) or not a.t1 > a.t0:
                raise OperatorError("stage intervals must partition [0, T]")
        n = self.grid.n_nodes
        clean = []
        for s in self.stages:
            Q = sp.csr_matrix(s.Q, dtype=float)
            if Q.shape != (n, n):
                raise OperatorError(f"rate matrix shape {Q.shape} != {(n, n)}")
            check_sub_markov(Q)
            clean.append(Stage(float(s.t0), float(s.t1), Q))
        self.stages = clean

    @property
    def n_nodes(self) -> int:
        return self.grid.n_nodes

    def stage_index(self, t: float) -> int:
        """Stage active at time ``t``; stage intervals are closed on the left."""
        for k, s in enumerate(self.stages):
            if t < s.t1:
                return k
        return len(self.stages) - 1

    def Q(self, t: float) -> sp.csr_matrix:
        return self.stages[self.stage_index(t)].Q

    def cell_stage(self, i: int) -> int:
        """Stage of time cell ``i``; the cell must not straddle a stage boundary."""
        t0, t1 = self.grid.times[i], self.grid.times[i + 1]
        k = self.stage_index(0.5 * (t0 + t1))
        s = self.stages[k]
        tol = 1e-12 * max(self.grid.T, 1.0)
        if t0 < s.t0 - tol or t1 > s.t1 + tol:
            raise OperatorError(f"time cell [{t0}, {t1}] straddles a stage boundary")
        return k

    def killing(self, k: int = 0) -> np.ndarray:
        Q = self.stages[k].Q
        return -np.asarray(Q.sum(axis=1)).ravel()

    def max_rate(self) -> float:
        return max(float(np.max(-s.Q.diagonal())) if s.Q.nnz else 0.0 for s in self.stages)

    def shifted(self, alpha: float) -> "GeneratorFamily":
        """Generator of the process with extra killing at rate ``alpha``."""
        if alpha < 0:
            raise OperatorError("killing shift must be nonnegative")
        eye = sp.identity(self.n_nodes, format="csr")
        return GeneratorFamily(self.grid, [Stage(s.t0, s.t1, s.Q - alpha * eye)
                                           for s in self.stages], self.kind + f"+{alpha}")

    def with_grid(self, grid: SpaceTimeGrid) -> "GeneratorFamily":
        """Same rates on a grid with another time mesh."""
        return GeneratorFamily(grid, self.stages, self.kind)


def check_sub_markov(Q: sp.csr_matrix, tol: float = 1e-12) -> None:
    off = Q - sp.diags(Q.diagonal())
    if off.nnz and off.data.min() < 0:
        raise OperatorError("rate matrix has negative off-diagonal entries")
    rows = np.asarray(Q.sum(axis=1)).ravel()
    scale = max(1.0, float(np.abs(Q.diagonal()).max()) if Q.nnz else 1.0)
    if rows.size and rows.max() > tol * scale:
        raise OperatorError("rate matrix row sums must be nonpositive")


def from_matrices(grid: SpaceTimeGrid, matrices: Sequence, breakpoints: Sequence[float] | None = None,
                  kind: str = "custom") -> GeneratorFamily:
    """Family from explicit rate matrices; ``breakpoints`` are interior stage edges."""
    edges = [0.0, *(breakpoints or []), grid.T]
    if len(edges) - 1 != len(matrices):
        raise OperatorError("need one matrix per stage")
    return GeneratorFamily(grid, [Stage(a, b, sp.csr_matrix(np.asarray(Q, dtype=float) if not sp.issparse(Q) else Q))
                                  for a, b, Q in zip(edges[:-1], edges[1:], matrices)], kind)


def zero_generator(grid: SpaceTimeGrid) -> GeneratorFamily:
    n = grid.n_nodes
    return GeneratorFamily(grid, [Stage(0.0, grid.T, sp.csr_matrix((n, n)))], "zero")


def _as_callable(c) -> Callable:
    if callable(c):
        return c
    return lambda t, x: c


def _stage_edges(grid: SpaceTimeGrid, stage_times):
    inner = sorted(float(s) for s in (stage_times or []) if 0 < s < grid.T)
    return [0.0, *inner, grid.T]


def divergence_form_generator(grid: SpaceTimeGrid, a, b=0.0, stage_times=None) -> GeneratorFamily:
    """Finite-volume diffusion ``div(a grad)`` plus upwind drift ``b . grad``.

    ``a(t, x)`` is evaluated at edge midpoints and must be positive;
    ``b(t, x)`` at nodes, returning one velocity component per axis.  Both
    are frozen at each stage midpoint.  Edges leaving the lattice (the
    Dirichlet boundary or an omitted node) carry their rate into killing.
    """
    if grid.lattice is None or not grid.shape:
        raise OperatorError("divergence-form generator needs a lattice grid")
    a_fn, b_fn = _as_callable(a), _as_callable(b)
    h = grid.spacing()
    d = grid.dim
    lat = grid.lattice
    index = {tuple(p): j for j, p in enumerate(lat)}
    edges = _stage_edges(grid, stage_times)
    stages = []
    for t0, t1 in zip(edges[:-1], edges[1:]):
        tm = 0.5 * (t0 + t1)
        rows, cols, vals = [], [], []
        kill = np.zeros(grid.n_nodes)
        for j, p in enumerate(lat):
            x = grid.nodes[j]
            bj = np.broadcast_to(np.asarray(b_fn(tm, x), dtype=float), (d,))
            for ax in range(d):
                for sgn in (+1, -1):
                    q = list(p)
                    q[ax] += sgn
                    xm = x.copy()
                    xm[ax] += sgn * h[ax] / 2
                    aval = float(a_fn(tm, xm))
                    if not aval > 0:
                        raise OperatorError(f"diffusion coefficient must be positive, got {aval} at {xm}")
                    rate = aval / h[ax] ** 2
                    vel = bj[ax] * sgn
                    if vel > 0:
                        rate += vel / h[ax]
                    k = index.get(tuple(q))
                    if k is None:
                        kill[j] += rate
                    else:
                        rows.append(j)
                        cols.append(k)
                        vals.append(rate)
        Q = sp.csr_matrix((vals, (rows, cols)), shape=(grid.n_nodes,) * 2)
        out = np.asarray(Q.sum(axis=1)).ravel()
        Q = (Q - sp.diags(out + kill)).tocsr()
        stages.append(Stage(t0, t1, Q))
    return GeneratorFamily(grid, stages, "divergence_drift")


def fractional_weight(alpha, d: int):
    """Normalising weight of the jump kernel ``w |z|^{-d-alpha}``."""
    alpha = np.asarray(alpha, dtype=float)
    return (alpha * 2.0 ** (alpha - 1) * gamma_fn(0.5 * alpha + 0.5 * d)
            / (np.pi ** (d / 2) * gamma_fn(1 - 0.5 * alpha)))


def _exterior_integral(grid: SpaceTimeGrid, alpha: np.ndarray, n_theta: int = 4096) -> np.ndarray:
    # int over R^d minus the box of |y - x|^{-d-alpha} dy = (1/alpha) int_S rho(theta)^{-alpha}
    lo = np.array([b[0] for b in grid.bounds])
    hi = np.array([b[1] for b in grid.bounds])
    x = grid.nodes
    if grid.dim == 1:
        return ((x[:, 0] - lo[0]) ** -alpha + (hi[0] - x[:, 0]) ** -alpha) / alpha
    if grid.dim != 2:
        raise OperatorError("fractional generator supports d = 1, 2")
    theta = (np.arange(n_theta) + 0.5) * 2 * np.pi / n_theta
    dirs = np.column_stack([np.cos(theta), np.sin(theta)])
    with np.errstate(divide="ignore"):
        dist_hi = (hi[None, None, :] - x[:, None, :]) / dirs[None, :, :]
        dist_lo = (lo[None, None, :] - x[:, None, :]) / dirs[None, :, :]
    wall = np.where(dirs[None, :, :] > 0, dist_hi, np.where(dirs[None, :, :] < 0, dist_lo, np.inf))
    rho = wall.min(axis=2)
    return (rho ** -alpha[:, None]).mean(axis=1) * 2 * np.pi / alpha


def fractional_generator(grid: SpaceTimeGrid, alpha_fn, cutoff: float | None = None) -> GeneratorFamily:
    """Jump generator with kernel ``w(x) |z|^{-d-alpha(x)}`` integrated over cells.

    Rates use the midpoint rule on each target cell.  Jumps leaving the
    domain, and jumps longer than ``cutoff``, are routed to killing.
    """
    if not grid.bounds or grid.shape == ():
        raise OperatorError("fractional generator needs a box grid")
    if grid.lattice is not None and grid.lattice.shape[0] != int(np.prod(grid.shape)):
        raise OperatorError("fractional generator does not support omitted nodes")
    x = grid.nodes
    d = grid.dim
    if callable(alpha_fn):
        alpha = np.array([float(alpha_fn(xj)) for xj in x])
    else:
        alpha = np.broadcast_to(np.asarray(alpha_fn, dtype=float), (grid.n_nodes,)).copy()
    if np.any(alpha <= 0) or np.any(alpha >= 2):
        raise OperatorError("fractional exponent must lie in (0, 2)")
    diam = float(np.linalg.norm([hi - lo for lo, hi in grid.bounds]))
    cutoff = diam if cutoff is None else float(cutoff)
    w = fractional_weight(alpha, d)
    r = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=2)
    np.fill_diagonal(r, np.inf)
    dense = w[:, None] * grid.cell_measure[None, :] * r ** (-d - alpha[:, None])
    far = r > cutoff
    kill = w * _exterior_integral(grid, alpha) + np.where(far, dense, 0.0).sum(axis=1)
    dense[far] = 0.0
    np.fill_diagonal(dense, -(dense.sum(axis=1) + kill))
    kind = "fractional_const" if np.ptp(alpha) == 0 else "fractional_variable"
    return GeneratorFamily(grid, [Stage(0.0, grid.T, sp.csr_matrix(dense))], kind)


def bilinear_form(gen: GeneratorFamily, t: float, u, v) -> float:
    return -m_inner(gen.Q(t) @ np.asarray(u, dtype=float), v, gen.grid)


def adjoint_matrix(Q: sp.spmatrix, m: np.ndarray) -> sp.csr_matrix:
    """``m``-adjoint: ``Qhat[k, j] = Q[j, k] m_j / m_k``."""
    return (sp.diags(1.0 / m) @ Q.T @ sp.diags(m)).tocsr()


def adjoint(gen: GeneratorFamily) -> GeneratorFamily:
    if gen._adjoint_of is not None:
        return gen._adjoint_of
    m = gen.grid.cell_measure
    stages = [Stage(s.t0, s.t1, adjoint_matrix(s.Q, m)) for s in gen.stages]
    # adjoint rows may have positive sums; built without the sub-Markov check
    hat = GeneratorFamily.__new__(GeneratorFamily)
    hat.grid, hat.stages, hat.kind, hat._adjoint_of = gen.grid, stages, gen.kind + "^", gen
    return hat


@dataclass
class FormReport:
    alpha0: float
    K: float
    lam: float
    markov: bool
    dual_markov_gamma: float | None

    def rows(self) -> list[tuple[str, object]]:
        return [("alpha0", self.alpha0), ("K", self.K), ("lambda", self.lam),
                ("markov", self.markov), ("dual_markov_gamma", self.dual_markov_gamma)]


def _form_matrices(Q: sp.spmatrix, m: np.ndarray):
    # B(u, v) = u^T Bm v with Bm = -Q^T M; weighted by M^{-1/2} on both sides
    Qd = Q.toarray()
    s = 1.0 / np.sqrt(m)
    W = -(s[:, None] * Qd.T * m[None, :]) * s[None, :]
    return W, 0.5 * (W + W.T)


def _range_basis(S: np.ndarray, rtol: float = 1e-10):
    lam, V = np.linalg.eigh(S)
    tol = rtol * max(1.0, np.abs(lam).max())
    keep = lam > tol
    return lam, V, keep


def structural_report(gen: GeneratorFamily) -> FormReport:
    """Numerical constants of the form family: shift, sector, time-equivalence, dual Markov."""
    m = gen.grid.cell_measure
    mats = [_form_matrices(s.Q, m) for s in gen.stages]
    alpha0 = 0.0
    for _, S in mats:
        lmin = float(np.linalg.eigvalsh(S).min())
        scale = max(1.0, float(np.abs(S).max()))
        if lmin < -1e-12 * scale:
            alpha0 = max(alpha0, -lmin)
    eye = np.eye(gen.n_nodes)
    K = 0.0
    for W, S in mats:
        lam, V, keep = _range_basis(S + alpha0 * eye)
        R = V[:, keep] / np.sqrt(lam[keep])
        nul = V[:, ~keep]
        scale = max(1.0, float(np.abs(W).max()))
        if nul.size and (np.abs(W @ nul).max() > 1e-9 * scale or np.abs(nul.T @ W).max() > 1e-9 * scale):
            K = np.inf
            continue
        K = max(K, float(np.linalg.norm(R.T @ W @ R, 2)) if R.size else 0.0)
    lam_const = 1.0
    S0 = mats[0][1] + alpha0 * eye
    l0, V0, keep0 = _range_basis(S0)
    R0 = V0[:, keep0] / np.sqrt(l0[keep0])
    nul0 = V0[:, ~keep0]
    for _, S in mats[1:]:
        St = S + alpha0 * eye
        scale = max(1.0, float(np.abs(St).max()))
        if nul0.size and np.abs(nul0.T @ St @ nul0).max() > 1e-9 * scale:
            lam_const = np.inf
            break
        mu = np.linalg.eigvalsh(R0.T @ St @ R0)
        if mu.min() <= 0:
            lam_const = np.inf
            break
        lam_const = max(lam_const, float(mu.max()), float(1.0 / mu.min()))
    markov = True
    for s in gen.stages:
        try:
            check_sub_markov(s.Q)
        except OperatorError:
            markov = False
    gamma = 0.0
    for s in adjoint(gen).stages:
        Qh = s.Q
        off = Qh - sp.diags(Qh.diagonal())
        if off.nnz and off.data.min() < 0:
            gamma = None
            break
        gamma = max(gamma, float(np.asarray(Qh.sum(axis=1)).max()))
    if gamma is not None:
        scale = max(1.0, gen.max_rate())
        gamma = 0.0 if gamma <= 1e-12 * scale else gamma
    return FormReport(alpha0=alpha0, K=K, lam=lam_const, markov=markov, dual_markov_gamma=gamma)


def export_coo(gen: GeneratorFamily) -> str:
    """Rate matrices as ``stage t0 t1 row col value`` lines."""
    lines = ["stage t0 t1 row col value"]
    for k, s in enumerate(gen.stages):
        C = s.Q.tocoo()
        for r, c, v in zip(C.row, C.col, C.data):
            lines.append(f"{k} {s.t0!r} {s.t1!r} {r} {c} {v!r}")
    return "\n".join(lines) + "\n"
