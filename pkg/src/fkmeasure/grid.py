"""Space-time grids, fields and the weighted inner products.

Spatial nodes are the interior points of a uniform lattice on an interval or
a box; the domain boundary itself is not a node, so flux across it becomes
killing.  2D nodes are stored row-major: node ``(ix, iy)`` has flat index
``iy * nx + ix``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class GridError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SpaceTimeGrid:
    """Finite state space with cell measures plus a time mesh on ``[0, T]``.

    Attributes:
        nodes: ``(N, d)`` coordinates.
        cell_measure: ``(N,)`` positive weights ``m_j``.
        boundary_mask: ``(N,)`` True for nodes adjacent to the domain boundary.
        times: ``(M + 1,)`` strictly increasing, ``times[0] == 0``.
        bounds: per-axis ``(lower, upper)`` of the domain.
        shape: lattice shape ``(nx,)`` or ``(nx, ny)``.
    """

    nodes: np.ndarray
    cell_measure: np.ndarray
    boundary_mask: np.ndarray
    times: np.ndarray
    bounds: tuple = ()
    shape: tuple = ()
    lattice: np.ndarray | None = None
    T: float = field(init=False)

    def __post_init__(self):
        nodes = np.atleast_2d(np.asarray(self.nodes, dtype=float))
        if nodes.shape[0] == 1 and np.ndim(self.nodes) == 1:
            nodes = nodes.T
        m = np.asarray(self.cell_measure, dtype=float)
        mask = np.asarray(self.boundary_mask, dtype=bool)
        times = np.asarray(self.times, dtype=float)
        if nodes.shape[0] < 1:
            raise GridError("grid needs at least one interior node")
        if m.shape != (nodes.shape[0],) or mask.shape != (nodes.shape[0],):
            raise GridError("cell_measure and boundary_mask must have one entry per node")
        if not np.all(m > 0):
            raise GridError("cell measures must be positive")
        if times.ndim != 1 or times.size < 2:
            raise GridError("time mesh needs at least two points")
        if times[0] != 0.0 or not np.all(np.diff(times) > 0):
            raise GridError("time mesh must start at 0 and increase strictly")
        for name, arr in (("nodes", nodes), ("cell_measure", m), ("times", times)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        mask.setflags(write=False)
        object.__setattr__(self, "boundary_mask", mask)
        object.__setattr__(self, "T", float(times[-1]))
        object.__setattr__(self, "bounds", tuple(tuple(map(float, b)) for b in self.bounds))
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.lattice is not None:
            lat = np.asarray(self.lattice, dtype=int).reshape(nodes.shape)
            lat.setflags(write=False)
            object.__setattr__(self, "lattice", lat)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def time_weights(self) -> np.ndarray:
        """Trapezoid weights ``c_i`` of the time mesh."""
        return trapezoid_weights(self.times)

    def with_times(self, times: Sequence[float]) -> "SpaceTimeGrid":
        return SpaceTimeGrid(self.nodes, self.cell_measure, self.boundary_mask,
                             np.asarray(times, dtype=float), self.bounds, self.shape,
                             self.lattice)

    def spacing(self) -> np.ndarray:
        """Lattice spacing per axis."""
        if not self.bounds or not self.shape:
            raise GridError("grid has no lattice structure")
        return np.array([(hi - lo) / (n + 1) for (lo, hi), n in zip(self.bounds, self.shape)])

    def boundary_distance(self) -> np.ndarray:
        """Distance of every node to the boundary of the bounding box."""
        if not self.bounds:
            raise GridError("grid has no domain bounds")
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return np.minimum(self.nodes - lo, hi - self.nodes).min(axis=1)

    def time_index(self, t: float, atol: float = 1e-12) -> int:
        """Index of a mesh time; raises if ``t`` is not on the mesh."""
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > atol * max(1.0, self.T):
            raise GridError(f"time {t!r} is not a mesh point")
        return i

    def cell_of(self, t: np.ndarray) -> np.ndarray:
        """Time-cell index containing ``t`` (cell ``i`` is ``[t_i, t_{i+1})``)."""
        idx = np.searchsorted(self.times, t, side="right") - 1
        return np.clip(idx, 0, self.n_steps - 1)

    def same_as(self, other: "SpaceTimeGrid") -> bool:
        return self is other or (
            self.nodes.shape == other.nodes.shape
            and self.times.shape == other.times.shape
            and np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.cell_measure, other.cell_measure)
            and np.array_equal(self.times, other.times)
        )


def trapezoid_weights(times: np.ndarray) -> np.ndarray:
    dt = np.diff(times)
    c = np.zeros(times.size)
    c[:-1] += dt / 2
    c[1:] += dt / 2
    return c


def uniform_times(T: float, steps: int) -> np.ndarray:
    if T <= 0:
        raise GridError("horizon T must be positive")
    if steps < 1:
        raise GridError("need at least one time step")
    return np.linspace(0.0, T, steps + 1)


def interval_grid(lower: float, upper: float, n: int, T: float, steps: int) -> SpaceTimeGrid:
    """``n`` interior nodes of a uniform lattice on ``(lower, upper)``."""
    if n < 1:
        raise GridError("need at least one interior node")
    if upper <= lower:
        raise GridError("empty interval")
    h = (upper - lower) / (n + 1)
    x = lower + h * np.arange(1, n + 1)
    mask = np.zeros(n, dtype=bool)
    mask[[0, -1]] = True
    return SpaceTimeGrid(x[:, None], np.full(n, h), mask, uniform_times(T, steps),
                         bounds=((lower, upper),), shape=(n,),
                         lattice=np.arange(n)[:, None])


def box_grid(bounds: Sequence[Sequence[float]], shape: Sequence[int], T: float,
             steps: int, omit: Sequence[float] | None = None) -> SpaceTimeGrid:
    """Interior lattice nodes of a 2D box, row-major.

    With ``omit`` set, a node coinciding with that point is dropped (its cell
    measure is not redistributed).
    """
    (x0, x1), (y0, y1) = bounds
    nx, ny = shape
    if nx < 1 or ny < 1:
        raise GridError("need at least one interior node per axis")
    hx, hy = (x1 - x0) / (nx + 1), (y1 - y0) / (ny + 1)
    xs = x0 + hx * np.arange(1, nx + 1)
    ys = y0 + hy * np.arange(1, ny + 1)
    X, Y = np.meshgrid(xs, ys)  # rows indexed by y
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny))
    mask = ((ix == 0) | (ix == nx - 1) | (iy == 0) | (iy == ny - 1)).ravel()
    keep = np.ones(len(nodes), dtype=bool)
    if omit is not None:
        keep = ~np.all(np.isclose(nodes, np.asarray(omit, dtype=float)), axis=1)
    lattice = np.column_stack([ix.ravel(), iy.ravel()])
    return SpaceTimeGrid(nodes[keep], np.full(keep.sum(), hx * hy), mask[keep],
                         uniform_times(T, steps), bounds=tuple(map(tuple, bounds)),
                         shape=(nx, ny), lattice=lattice[keep])


def point_grid(n: int, T: float, steps: int, measure=1.0) -> SpaceTimeGrid:
    """``n`` abstract states with given masses; no geometry beyond labels."""
    m = np.broadcast_to(np.asarray(measure, dtype=float), (n,)).copy()
    return SpaceTimeGrid(np.arange(n, dtype=float)[:, None], m, np.zeros(n, dtype=bool),
                         uniform_times(T, steps))


@dataclass(eq=False)
class SpaceTimeField:
    """Values ``u(t_i, x_j)`` stored as an ``(M + 1, N)`` array."""

    values: np.ndarray
    grid: SpaceTimeGrid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = (self.grid.n_steps + 1, self.grid.n_nodes)
        if self.values.shape != expected:
            raise GridError(f"field shape {self.values.shape} != {expected}")
        if not np.all(np.isfinite(self.values)):
            raise GridError("field has non-finite entries")

    @classmethod
    def zeros(cls, grid: SpaceTimeGrid) -> "SpaceTimeField":
        return cls(np.zeros((grid.n_steps + 1, grid.n_nodes)), grid)

    @classmethod
    def from_function(cls, grid: SpaceTimeGrid, fn) -> "SpaceTimeField":
        """Evaluate ``fn(t, x)`` with ``t`` of shape ``(M+1, 1)`` and ``x`` of ``(N, d)``."""
        vals = fn(grid.times[:, None], grid.nodes)
        return cls(np.broadcast_to(vals, (grid.n_steps + 1, grid.n_nodes)).copy(), grid)

    def __add__(self, other):
        return SpaceTimeField(self.values + _vals(other, self.grid), self.grid)

    def __sub__(self, other):
        return SpaceTimeField(self.values - _vals(other, self.grid), self.grid)

    def __mul__(self, c):
        return SpaceTimeField(self.values * c, self.grid)

    __rmul__ = __mul__

    def __neg__(self):
        return SpaceTimeField(-self.values, self.grid)

    def sup(self) -> float:
        return float(np.abs(self.values).max())


def _vals(other, grid):
    if isinstance(other, SpaceTimeField):
        if not other.grid.same_as(grid):
            raise GridError("fields live on different grids")
        return other.values
    return other


def m_inner(u, v, grid: SpaceTimeGrid) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape or u.shape != grid.cell_measure.shape:
        raise GridError(f"shape mismatch: {u.shape}, {v.shape} vs {grid.cell_measure.shape}")
    return float(np.sum(u * v * grid.cell_measure))


def spacetime_inner(u: SpaceTimeField, v: SpaceTimeField) -> float:
    """Time-trapezoid of the spatial ``m``-inner products."""
    if not u.grid.same_as(v.grid):
        raise GridError("fields live on different grids")
    grid = u.grid
    per_time = (u.values * v.values) @ grid.cell_measure
    return float(per_time @ grid.time_weights())


def spacetime_l1(u: SpaceTimeField) -> float:
    return spacetime_inner(SpaceTimeField(np.abs(u.values), u.grid),
                           SpaceTimeField(np.ones_like(u.values), u.grid))
