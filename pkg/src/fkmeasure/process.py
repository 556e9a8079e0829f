"""Exact simulation of the space-time chain and path functionals.

Inside a stage the chain at node ``j`` waits an ``Exp(-Q_jj)`` time and then
jumps to ``k`` with probability ``Q_jk / (-Q_jj)`` or dies with the leftover
probability.  At stage boundaries the clock is simply redrawn (memoryless),
so the sampler has no discretization bias.

Paths are simulated in vectorized batches.  Random streams are keyed by
``(seed, start level)`` so a level's results do not depend on which worker
runs it or in what order.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .grid import SpaceTimeGrid
from .measures import RevuzRates
from .operators import GeneratorFamily


class ProcessError(ValueError):
    pass


@dataclass(eq=False)
class PathSample:
    """One path from ``start = (s, node)``.

    ``event_times`` are elapsed times of jumps (killing is not an event),
    ``lifetime`` is the elapsed killing time or ``inf``, ``horizon_clip`` is
    ``min(lifetime, T - s)``.
    """

    start: tuple[float, int]
    event_times: np.ndarray
    event_nodes: np.ndarray
    lifetime: float
    horizon_clip: float
    grid: SpaceTimeGrid

    @property
    def events(self) -> list[tuple[float, int]]:
        return list(zip(self.event_times.tolist(), self.event_nodes.tolist()))

    @property
    def survived(self) -> bool:
        return not np.isfinite(self.lifetime)

    @property
    def final_node(self) -> int:
        return int(self.event_nodes[-1]) if self.event_nodes.size else int(self.start[1])

    def node_at(self, elapsed) -> np.ndarray:
        """Node occupied at elapsed time(s) (right-continuous)."""
        k = np.searchsorted(self.event_times, elapsed, side="right")
        seq = np.concatenate([[self.start[1]], self.event_nodes]).astype(int)
        return seq[k]

    def segments(self):
        """``(t_from, t_to, node)`` holding intervals in elapsed time up to ``horizon_clip``."""
        bounds = np.concatenate([[0.0], self.event_times, [self.horizon_clip]])
        seq = np.concatenate([[self.start[1]], self.event_nodes]).astype(int)
        return bounds[:-1], bounds[1:], seq

    def shift(self, t: float) -> "PathSample":
        """Path restarted at elapsed time ``t`` (the time-shift of the path)."""
        if not 0 <= t <= self.horizon_clip:
            raise ProcessError("shift outside the path's life")
        keep = self.event_times > t
        return PathSample((self.start[0] + t, int(self.node_at(t))), self.event_times[keep] - t,
                          self.event_nodes[keep], self.lifetime - t, self.horizon_clip - t,
                          self.grid)

    def to_text(self) -> str:
        lines = [f"start {self.start[0]!r} {self.start[1]}"]
        lines += [f"jump {t!r} {k}" for t, k in self.events]
        lines.append(f"end {self.horizon_clip!r} {'survived' if self.survived else 'killed'}")
        return "\n".join(lines)


class _Tables:
    """Per-stage exit rates and cumulative jump tables (last column is death)."""

    def __init__(self, gen: GeneratorFamily):
        N = gen.grid.n_nodes
        self.stage_end = np.array([s.t1 for s in gen.stages])
        self.rate = np.empty((len(gen.stages), N))
        self.cum = np.empty((len(gen.stages), N, N))
        for k, st in enumerate(gen.stages):
            Q = st.Q.toarray()
            q = -np.diag(Q).copy()
            q[q < 0] = 0.0
            P = np.where(np.eye(N, dtype=bool), 0.0, Q)
            with np.errstate(invalid="ignore", divide="ignore"):
                P = np.where(q[:, None] > 0, P / q[:, None], 0.0)
            self.rate[k] = q
            self.cum[k] = np.cumsum(P, axis=1)

    def stage_of(self, t):
        idx = np.searchsorted(self.stage_end, t, side="right")
        return np.minimum(idx, self.stage_end.size - 1)


def simulate(gen: GeneratorFamily, t0, nodes, rng: np.random.Generator,
             rates: RevuzRates | None = None, stop_cells=None, record: bool = False,
             tables: _Tables | None = None) -> dict:
    """Run a batch of paths from absolute times ``t0`` at ``nodes``.

    Returns arrays ``survived``, ``final``, ``lifetime`` (elapsed, inf if
    survived), ``acc`` (accumulated functional, if ``rates``), ``hit`` (elapsed
    first time in ``stop_cells``; paths stop there) and ``events`` (list of
    ``(times, nodes)`` per path, if ``record``).
    """
    g = gen.grid
    T = g.T
    tab = tables or _Tables(gen)
    n = np.size(nodes)
    start = np.broadcast_to(np.asarray(t0, dtype=float), (n,)).copy()
    if np.any(start < 0) or np.any(start >= T):
        raise ProcessError("start time must lie in [0, T)")
    node = np.asarray(nodes, dtype=int).copy()
    if np.any(node < 0) or np.any(node >= g.n_nodes):
        raise ProcessError("start node out of range")
    t = start.copy()
    alive = np.ones(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    lifetime = np.full(n, np.inf)
    acc = np.zeros(n)
    hit = np.full(n, np.inf)
    slice_levels = []
    if rates is not None:
        slice_levels = [k for k in range(1, g.n_steps + 1) if np.any(rates.jumps[k])]
    if stop_cells is not None:
        stop_cells = np.asarray(stop_cells, dtype=bool)
        M = g.n_steps
        # next_cell[i, j]: first cell index >= i in the stop set at node j (M if none)
        next_cell = np.full((M + 1, g.n_nodes), M)
        for i in range(M - 1, -1, -1):
            next_cell[i] = np.where(stop_cells[i], i, next_cell[i + 1])
    rec_p, rec_t, rec_k = [], [], []

    while active.any():
        idx = np.flatnonzero(active)
        tt = t[idx]
        nd = node[idx]
        st = tab.stage_of(tt)
        te = np.minimum(tab.stage_end[st], T)
        q = tab.rate[st, nd]
        with np.errstate(divide="ignore"):
            tau = np.where(q > 0, rng.standard_exponential(idx.size) / np.where(q > 0, q, 1.0), np.inf)
        tn = tt + tau
        fire = tn < te
        seg_end = np.where(fire, tn, te)

        if stop_cells is not None:
            ci = g.cell_of(tt)
            k = next_cell[ci, nd]
            t_hit = np.where(k == ci, tt, g.times[np.minimum(k, M)])
            got = (k < M) & (t_hit < seg_end)
            if got.any():
                seg_end = np.where(got, t_hit, seg_end)
                fire = fire & ~got
        else:
            got = np.zeros(idx.size, dtype=bool)

        if rates is not None:
            acc[idx] += rates.occupation(nd, tt, seg_end)
            for lev in slice_levels:
                s = g.times[lev]
                # slices count when alive at s; s == seg_end only for non-firing segments
                inside = (tt < s) & ((s < seg_end) | ((s == seg_end) & ~fire & ~got))
                if inside.any():
                    acc[idx[inside]] += rates.jumps[lev, nd[inside]]

        if got.any():
            hit[idx[got]] = seg_end[got] - start[idx[got]]
            active[idx[got]] = False

        done = ~fire & ~got & (te >= T)
        active[idx[done]] = False
        t[idx[~fire]] = seg_end[~fire]

        fi = idx[fire]
        if fi.size:
            u = rng.random(fi.size)
            cum = tab.cum[st[fire], nd[fire]]
            dest = (cum < u[:, None]).sum(axis=1)
            dead = dest >= g.n_nodes
            t[fi] = tn[fire]
            lifetime[fi[dead]] = tn[fire][dead] - start[fi[dead]]
            alive[fi[dead]] = False
            active[fi[dead]] = False
            moved = fi[~dead]
            node[moved] = dest[~dead]
            if record and moved.size:
                rec_p.append(moved)
                rec_t.append(t[moved] - start[moved])
                rec_k.append(node[moved].copy())

    out = {"survived": alive & ~np.isfinite(hit), "final": node, "lifetime": lifetime,
           "acc": acc, "hit": hit}
    if record:
        events = [(np.empty(0), np.empty(0, dtype=int)) for _ in range(n)]
        if rec_p:
            p = np.concatenate(rec_p)
            et = np.concatenate(rec_t)
            ek = np.concatenate(rec_k)
            order = np.lexsort((et, p))
            p, et, ek = p[order], et[order], ek[order]
            cuts = np.searchsorted(p, np.arange(n + 1))
            events = [(et[cuts[i]:cuts[i + 1]], ek[cuts[i]:cuts[i + 1]]) for i in range(n)]
        out["events"] = events
    return out


def sample_paths(gen: GeneratorFamily, start: tuple[float, int], n: int, rng_seed) -> list[PathSample]:
    s, j = float(start[0]), int(start[1])
    rng = np.random.default_rng(rng_seed)
    res = simulate(gen, np.full(n, s), np.full(n, j), rng, record=True)
    horizon = gen.grid.T - s
    paths = []
    for p in range(n):
        et, ek = res["events"][p]
        life = res["lifetime"][p]
        paths.append(PathSample((s, j), et, ek, life, min(life, horizon), gen.grid))
    return paths


def sample_path(gen: GeneratorFamily, start: tuple[float, int], rng_seed) -> PathSample:
    return sample_paths(gen, start, 1, rng_seed)[0]


def accumulate(path: PathSample, rates: RevuzRates, upto: float | None = None) -> float:
    """``A`` over elapsed ``[0, min(upto, horizon_clip)]``.

    Slices count at elapsed time ``sigma`` in ``(0, upto]`` while alive; the
    slice at the horizon counts only for surviving paths.
    """
    if not rates.grid.same_as(path.grid):
        raise ProcessError("path and rates live on different grids")
    g = path.grid
    s0 = path.start[0]
    end = path.horizon_clip if upto is None else min(upto, path.horizon_clip)
    a, b, seq = path.segments()
    a = np.minimum(a, end)
    b = np.minimum(b, end)
    total = float(np.sum(rates.occupation(seq, s0 + a, s0 + b)))
    for lev in range(1, g.n_steps + 1):
        if not np.any(rates.jumps[lev]):
            continue
        sigma = g.times[lev] - s0
        if sigma <= 0 or sigma > end or sigma > path.horizon_clip:
            continue
        if sigma >= path.lifetime:
            continue
        total += float(rates.jumps[lev, path.node_at(sigma)])
    return total


def _level_task(args):
    gen, phi, rates, level, n_paths, seed = args
    g = gen.grid
    N = g.n_nodes
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(level)]))
    starts = np.repeat(np.arange(N), n_paths)
    res = simulate(gen, np.full(starts.size, g.times[level]), starts, rng, rates=rates)
    val = np.where(res["survived"], phi[res["final"]], 0.0) + res["acc"]
    val = val.reshape(N, n_paths)
    mean = val.mean(axis=1)
    err = val.std(axis=1, ddof=1) / np.sqrt(n_paths) if n_paths > 1 else np.zeros(N)
    return level, mean, err


def run_levels(gen: GeneratorFamily, phi, rates: RevuzRates, n_paths: int, seed,
               workers: int = 1, levels=None):
    """MC means and standard errors of the Feynman-Kac functional at every mesh point."""
    g = gen.grid
    M = g.n_steps
    phi = np.asarray(phi, dtype=float)
    mean = np.full((M + 1, g.n_nodes), np.nan)
    err = np.zeros((M + 1, g.n_nodes))
    # started at T the path has no time left; slices count only strictly later
    mean[M] = phi
    todo = list(range(M)) if levels is None else [i for i in levels if i < M]
    tasks = [(gen, phi, rates, i, n_paths, seed) for i in todo]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_level_task, tasks))
    else:
        results = [_level_task(t) for t in tasks]
    for i, mu_i, e_i in results:
        mean[i], err[i] = mu_i, e_i
    if levels is not None:
        keep = np.zeros(M + 1, dtype=bool)
        keep[todo] = True
        keep[M] = True
        mean[~keep] = 0.0
    return mean, err


def estimate_capacity(gen: GeneratorFamily, cells, psi, n_paths: int, rng_seed) -> dict:
    """MC estimate of ``sum_z w_z E_z exp(-S_B)`` with exact cross-check.

    Start points are the cell starts ``(t_i, x_j)`` with weight
    ``psi(t_i, x_j) dt_i m_j``.  The ``h``-weighted variant uses
    ``h = G_1 psi`` in place of ``psi``.
    """
    from .grid import SpaceTimeField
    from .linear import _start_weights, hitting_laplace, resolvent

    g = gen.grid
    cells = np.asarray(cells, dtype=bool)
    if cells.shape != (g.n_steps, g.n_nodes):
        raise ProcessError("cell set has wrong shape")
    psi_arr = np.asarray(psi, dtype=float)
    if psi_arr.ndim == 1:
        psi_arr = np.tile(psi_arr, (g.n_steps + 1, 1))
    w = _start_weights(g, psi_arr)
    h = resolvent(gen, 1.0, SpaceTimeField(psi_arr, g)).values
    wh = _start_weights(g, h)
    V = hitting_laplace(gen, cells)
    out = {"exact": float(np.sum(w * V[:-1])), "exact_h": float(np.sum(wh * V[:-1]))}
    if not cells.any():
        out.update(estimate=0.0, stderr=0.0, estimate_h=0.0, stderr_h=0.0)
        return out
    tab = _Tables(gen)
    mean = np.zeros_like(w)
    var = np.zeros_like(w)
    for i in range(g.n_steps):
        use = np.flatnonzero((w[i] != 0) | (wh[i] != 0))
        if use.size == 0:
            continue
        rng = np.random.default_rng(np.random.SeedSequence([int(rng_seed), i]))
        starts = np.repeat(use, n_paths)
        res = simulate(gen, np.full(starts.size, g.times[i]), starts, rng,
                       stop_cells=cells, tables=tab)
        val = np.exp(-res["hit"]).reshape(use.size, n_paths)
        mean[i, use] = val.mean(axis=1)
        var[i, use] = val.var(axis=1, ddof=1) / n_paths if n_paths > 1 else 0.0
    out["estimate"] = float(np.sum(w * mean))
    out["stderr"] = float(np.sqrt(np.sum(w * w * var)))
    out["estimate_h"] = float(np.sum(wh * mean))
    out["stderr_h"] = float(np.sqrt(np.sum(wh * wh * var)))
    return out
