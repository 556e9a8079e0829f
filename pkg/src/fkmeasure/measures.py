"""Signed measures on ``(0, T] x E`` and their additive-functional rates.

A measure has three component types:

* a density with respect to ``dt x m`` given at mesh times (piecewise
  linear in time),
* time slices ``delta_s (x) g m`` at mesh times ``s`` in ``(0, T]``,
* atoms: a signed mass sitting on one node over one time cell
  ``[t_i, t_{i+1})``, smeared uniformly over the cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import GridError, SpaceTimeField, SpaceTimeGrid, trapezoid_weights


class MeasureError(ValueError):
    pass


@dataclass(eq=False)
class MeasureData:
    grid: SpaceTimeGrid
    density: SpaceTimeField | None = None
    time_slices: list[tuple[float, np.ndarray]] = field(default_factory=list)
    atoms: list[tuple[int, int, float]] = field(default_factory=list)

    def __post_init__(self):
        g = self.grid
        if self.density is not None and not self.density.grid.same_as(g):
            raise MeasureError("density lives on another grid")
        slices = []
        for s, vec in self.time_slices:
            vec = np.asarray(vec, dtype=float)
            if not 0 < s <= g.T * (1 + 1e-12):
                raise MeasureError(f"slice time {s} outside (0, T]")
            if vec.shape != (g.n_nodes,):
                raise MeasureError("slice vector has wrong length")
            try:
                g.time_index(s)
            except GridError as exc:
                raise MeasureError(str(exc)) from None
            slices.append((float(s), vec))
        self.time_slices = slices
        atoms = []
        for i, j, w in self.atoms:
            if not (0 <= i < g.n_steps and 0 <= j < g.n_nodes):
                raise MeasureError(f"atom index ({i}, {j}) out of range")
            atoms.append((int(i), int(j), float(w)))
        self.atoms = atoms

    @classmethod
    def zero(cls, grid: SpaceTimeGrid) -> "MeasureData":
        return cls(grid)

    @classmethod
    def terminal(cls, grid: SpaceTimeGrid, phi) -> "MeasureData":
        """``delta_T (x) phi m``."""
        return cls(grid, time_slices=[(grid.T, np.asarray(phi, dtype=float))])

    @classmethod
    def from_arrays(cls, grid, density, jumps, atom_mass) -> "MeasureData":
        dens = None if not np.any(density) else SpaceTimeField(density, grid)
        slices = [(grid.times[k], jumps[k]) for k in range(1, grid.n_steps + 1) if np.any(jumps[k])]
        ii, jj = np.nonzero(atom_mass)
        atoms = [(i, j, atom_mass[i, j]) for i, j in zip(ii, jj)]
        return cls(grid, dens, slices, atoms)

    def arrays(self):
        """``(density (M+1, N), jumps (M+1, N), atom masses (M, N))``."""
        g = self.grid
        D = np.zeros((g.n_steps + 1, g.n_nodes)) if self.density is None else self.density.values.copy()
        J = np.zeros((g.n_steps + 1, g.n_nodes))
        for s, vec in self.time_slices:
            J[g.time_index(s)] += vec
        W = np.zeros((g.n_steps, g.n_nodes))
        for i, j, w in self.atoms:
            W[i, j] += w
        return D, J, W

    def __add__(self, other: "MeasureData") -> "MeasureData":
        if not other.grid.same_as(self.grid):
            raise MeasureError("measures live on different grids")
        a, b = self.arrays(), other.arrays()
        return MeasureData.from_arrays(self.grid, *(x + y for x, y in zip(a, b)))

    def __mul__(self, c: float) -> "MeasureData":
        return MeasureData.from_arrays(self.grid, *(c * x for x in self.arrays()))

    __rmul__ = __mul__

    def __sub__(self, other):
        return self + (-1.0) * other

    def abs(self) -> "MeasureData":
        return MeasureData.from_arrays(self.grid, *(np.abs(x) for x in self.arrays()))

    def weighted(self, f: SpaceTimeField) -> "MeasureData":
        """``f . mu``; atoms take the cell average of ``f`` at their node."""
        D, J, W = self.arrays()
        F = f.values
        return MeasureData.from_arrays(self.grid, D * F, J * F, W * 0.5 * (F[:-1] + F[1:]))

    def is_nonnegative(self) -> bool:
        return all(np.all(x >= 0) for x in self.arrays())

    def dominated_by(self, other: "MeasureData", atol: float = 0.0) -> bool:
        """Componentwise ``self <= other``."""
        return all(np.all(x <= y + atol) for x, y in zip(self.arrays(), other.arrays()))


def total_variation(mu: MeasureData) -> float:
    g = mu.grid
    D, J, W = mu.arrays()
    tv = float(np.abs(D) @ g.cell_measure @ trapezoid_weights(g.times))
    tv += float(np.abs(J) @ g.cell_measure @ np.ones(g.n_steps + 1))
    return tv + float(np.abs(W).sum())


@dataclass(eq=False)
class RevuzRates:
    """Additive functional of a measure in rate form.

    ``density[i, j]``: accumulation rate at mesh time ``t_i`` on node ``j``
    (linear in between); ``atom_rate[i, j]``: constant rate on cell ``i``;
    ``jumps[k, j]``: jump collected when alive at mesh time ``t_k``.
    """

    grid: SpaceTimeGrid
    density: np.ndarray
    atom_rate: np.ndarray
    jumps: np.ndarray
    _cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        dt = self.grid.dt[:, None]
        inc = dt * 0.5 * (self.density[:-1] + self.density[1:]) + dt * self.atom_rate
        self._cum = np.vstack([np.zeros(self.grid.n_nodes), np.cumsum(inc, axis=0)])

    def is_zero(self) -> bool:
        return not (np.any(self.density) or np.any(self.atom_rate) or np.any(self.jumps))

    def max_rate(self) -> float:
        return float(max(np.abs(self.density).max(), np.abs(self.atom_rate).max()))

    def cumulative(self, t, node) -> np.ndarray:
        """``int_0^t rate(s, node) ds`` for absolute times ``t`` (vectorised)."""
        g = self.grid
        t = np.asarray(t, dtype=float)
        node = np.asarray(node, dtype=int)
        i = g.cell_of(t)
        h = g.dt[i]
        th = np.clip((t - g.times[i]) / h, 0.0, 1.0)
        d0 = self.density[i, node]
        d1 = self.density[i + 1, node]
        r = self.atom_rate[i, node]
        return self._cum[i, node] + h * ((d0 + r) * th + (d1 - d0) * th * th / 2)

    def occupation(self, node, t0, t1) -> np.ndarray:
        return self.cumulative(t1, node) - self.cumulative(t0, node)

    def to_measure(self) -> MeasureData:
        g = self.grid
        W = self.atom_rate * g.cell_measure[None, :] * g.dt[:, None]
        return MeasureData.from_arrays(g, self.density, self.jumps, W)


def to_revuz_rates(mu: MeasureData, grid: SpaceTimeGrid | None = None) -> RevuzRates:
    grid = mu.grid if grid is None else grid
    if not grid.same_as(mu.grid):
        raise MeasureError("measure lives on another grid")
    D, J, W = mu.arrays()
    R = W / (grid.cell_measure[None, :] * grid.dt[:, None])
    return RevuzRates(grid, D, R, J)


def classify(mu: MeasureData, gen, singular_points=None, radii=None, psi=None) -> dict:
    """Membership flags for bounded, potential-finite and quasi-integrable classes.

    ``in_qL1`` excises shrinking tubes ``{|x - p| < r} x [0, T]`` around the
    given singular points and checks that the cut-off measure is finite while
    the exact capacity of the excised tubes decreases to zero.  Without
    singular points nothing is excised (every finite measure on a finite grid
    is quasi-integrable).
    """
    from .linear import LinearProblem, capacity_exact, solve_backward

    g = mu.grid
    tv = total_variation(mu)
    pot = solve_backward(LinearProblem(gen, np.zeros(g.n_nodes), mu.abs())).u
    in_R = bool(np.all(np.isfinite(pot.values)))
    D, _, _ = mu.arrays()
    if singular_points is None or len(singular_points) == 0:
        dist = np.full(g.n_nodes, np.inf)
        radii = np.zeros(0) if radii is None else np.asarray(radii, dtype=float)
    else:
        pts = np.atleast_2d(np.asarray(singular_points, dtype=float))
        dist = np.min(np.linalg.norm(g.nodes[:, None, :] - pts[None, :, :], axis=2), axis=1)
        if radii is None:
            radii = dist.max() * 0.5 ** np.arange(1, 9)
    psi = np.ones(g.n_nodes) if psi is None else np.asarray(psi, dtype=float)
    caps, masses = [], []
    for r in radii:
        inside = dist < r
        cut = MeasureData.from_arrays(g, D * (~inside), *mu.arrays()[1:])
        masses.append(total_variation(cut))
        cells = np.zeros((g.n_steps, g.n_nodes), dtype=bool)
        cells[:, inside] = True
        caps.append(capacity_exact(gen, cells, psi))
    caps = np.array(caps)
    if caps.size:
        top = max(1.0, caps[0])
        in_qL1 = bool(np.all(np.isfinite(masses)) and np.all(np.diff(caps) <= 1e-12 * top)
                      and caps[-1] <= 1e-12 * top)
    else:
        in_qL1 = bool(np.isfinite(tv) and in_R)
    return {"in_M0b": bool(np.isfinite(tv)), "in_R": in_R, "in_qL1": in_qL1,
            "tv": tv, "potential_max": pot.sup(), "radii": np.asarray(radii),
            "nest_masses": np.array(masses), "tube_capacities": caps}
