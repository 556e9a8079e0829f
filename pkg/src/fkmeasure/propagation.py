"""Exact per-cell propagation ``y' = A y + c0 + c1 s`` over one time cell.

For a cell of width ``h`` with constant matrix ``A`` this returns

    y(h) = e^{hA} y0 + F1 c0 + F2 c1,
    F1 = int_0^h e^{(h-s)A} ds,   F2 = int_0^h e^{(h-s)A} s ds,

and optionally the time integral ``int_0^h y``.  Small grids cache the
dense blocks (Van Loan block exponential); large grids use the sparse
exponential action on an augmented matrix.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply

DENSE_LIMIT = 400


def van_loan_blocks(A: np.ndarray, h: float, order: int = 2) -> list[np.ndarray]:
    """``[e^{hA}, F1, ..., F_order]`` with ``F_k = int_0^h e^{(h-s)A} s^{k-1}/(k-1)! ds``."""
    n = A.shape[0]
    size = n * (order + 1)
    big = np.zeros((size, size))
    big[:n, :n] = A
    for k in range(order):
        big[k * n:(k + 1) * n, (k + 1) * n:(k + 2) * n] = np.eye(n)
    big[:n, :n] = A
    E = scipy.linalg.expm(h * big)
    return [E[:n, k * n:(k + 1) * n] for k in range(order + 1)]


def _augmented_action(A: sp.spmatrix, h: float, y0, c0, c1, integral: bool = False):
    n = A.shape[0]
    c0 = np.zeros(n) if c0 is None else np.asarray(c0, dtype=float)
    c1 = np.zeros(n) if c1 is None else np.asarray(c1, dtype=float)
    # state (y, [J], z1, z2) with z1' = z2, z2' = 0, y' = A y + c1 z1 + c0 z2
    extra = n if integral else 0
    size = n + extra + 2
    blocks = sp.lil_matrix((size, size))
    blocks[:n, :n] = A
    blocks[:n, n + extra] = c1[:, None]
    blocks[:n, n + extra + 1] = c0[:, None]
    if integral:
        blocks[n:2 * n, :n] = sp.identity(n)
    blocks[n + extra, n + extra + 1] = 1.0
    v = np.zeros(size)
    v[:n] = y0
    v[-1] = 1.0
    out = expm_multiply(h * blocks.tocsr(), v)
    if integral:
        # J integrates y only from the start of the cell
        return out[:n], out[n:2 * n]
    return out[:n]


class Propagator:
    """Cell-wise exponential propagation for a piecewise-constant matrix family.

    ``matrices[k]`` is the stage-``k`` matrix, ``cell_stage(i)`` maps time
    cells to stages.  ``shift`` subtracts ``shift * I`` (extra killing).
    """

    def __init__(self, matrices, dt: np.ndarray, cell_stage, shift: float = 0.0,
                 dense_limit: int = DENSE_LIMIT):
        self.dt = np.asarray(dt, dtype=float)
        self.n = matrices[0].shape[0]
        eye = sp.identity(self.n, format="csr")
        self.mats = [sp.csr_matrix(Q) - shift * eye for Q in matrices]
        self.cell_stage = [cell_stage(i) for i in range(self.dt.size)]
        self.dense = self.n <= dense_limit
        self._cache: dict = {}

    def _key(self, i: int):
        return self.cell_stage[i], float(self.dt[i])

    def blocks(self, i: int, order: int = 2) -> list[np.ndarray]:
        key = (*self._key(i), order)
        if key not in self._cache:
            k, h = key[0], key[1]
            self._cache[key] = van_loan_blocks(self.mats[k].toarray(), h, order)
        return self._cache[key]

    def evolve(self, i: int, y0, c0=None, c1=None) -> np.ndarray:
        h = self.dt[i]
        if self.dense:
            P, F1, F2 = self.blocks(i)
            out = P @ y0
            if c0 is not None:
                out = out + F1 @ c0
            if c1 is not None:
                out = out + F2 @ c1
            return out
        return _augmented_action(self.mats[self.cell_stage[i]], h, y0, c0, c1)

    def evolve_with_integral(self, i: int, y0, c0=None, c1=None):
        """``(y(h), int_0^h y(s) ds)``."""
        h = self.dt[i]
        if self.dense:
            P, F1, F2, F3 = self.blocks(i, order=3)
            y = P @ y0
            J = F1 @ y0
            if c0 is not None:
                y = y + F1 @ c0
                J = J + F2 @ c0
            if c1 is not None:
                y = y + F2 @ c1
                J = J + F3 @ c1
            return y, J
        return _augmented_action(self.mats[self.cell_stage[i]], h, y0, c0, c1, integral=True)

    def adjoint_parts(self, i: int, lam: np.ndarray):
        """``(e^{hA} lam, F1 lam, F2 lam)``."""
        if self.dense:
            P, F1, F2 = self.blocks(i)
            return P @ lam, F1 @ lam, F2 @ lam
        A = self.mats[self.cell_stage[i]]
        h = self.dt[i]
        zero = np.zeros(self.n)
        return (expm_multiply(h * A, lam),
                _augmented_action(A, h, zero, lam, None),
                _augmented_action(A, h, zero, None, lam))
