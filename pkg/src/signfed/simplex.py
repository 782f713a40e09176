"""Minimal dense tableau simplex with Bland's rule.

Purpose-built for the tiny linear programs in the robustness checker:
minimize c . x over the cone cross-section {x : S x >= 0, sum(S x) = 1}
for a fixed row-sign-scaled matrix S.  The split x = u - v plus one
slack per cone row puts this in standard form with a single artificial
variable for the normalization row, so phase 1 is one driven pivot
sequence and the resulting feasible tableau can be reused for many
objectives over the same cell.

Bland's entering/leaving rule (lowest eligible index) makes the pivot
sequence deterministic and cycle-free.
"""

from __future__ import annotations

import numpy as np


class SimplexError(RuntimeError):
    """Numerical failure inside the solver (iteration cap or unbounded phase)."""


def _pivot(T: np.ndarray, basis: list[int], row: int, col: int) -> None:
    T[row] /= T[row, col]
    colvals = T[:, col].copy()
    colvals[row] = 0.0
    T -= np.outer(colvals, T[row])
    # Snap the pivot column to exact unit form to stop drift.
    T[:, col] = 0.0
    T[row, col] = 1.0
    basis[row] = col


def _bland(T: np.ndarray, basis: list[int], n_rows: int, n_cols: int, tol: float,
           max_iter: int = 10000) -> None:
    """Run Bland-rule pivots in place until the cost row has no negative entry."""
    for _ in range(max_iter):
        cost = T[-1, :n_cols]
        entering = np.nonzero(cost < -tol)[0]
        if entering.size == 0:
            return
        j = int(entering[0])
        col = T[:n_rows, j]
        rows = np.nonzero(col > tol)[0]
        if rows.size == 0:
            raise SimplexError("unbounded direction in a supposedly bounded cell")
        ratios = T[rows, -1] / col[rows]
        best = ratios.min()
        tied = rows[ratios == best]
        leave = int(min(tied, key=lambda k: basis[k]))
        _pivot(T, basis, leave, j)
    raise SimplexError("pivot iteration limit exceeded")


class CellLP:
    """Feasible cell {x : S x >= 0, sum_i (S x)_i = 1} with reusable phase-1 work.

    Construction runs phase 1 once.  If the cell is empty (only x = 0
    satisfies the cone constraints), `feasible` is False and minimize()
    must not be called.  Otherwise minimize(c) runs phase 2 from the
    stored feasible tableau and returns (value, x).
    """

    def __init__(self, scaled_rows: np.ndarray, tol: float = 1e-9):
        S = np.asarray(scaled_rows, dtype=np.float64)
        p, d = S.shape
        self.p, self.d = p, d
        self.tol = tol
        nv = 2 * d + p
        art = nv
        # Rows 0..p-1: -S_i u + S_i v + s_i = 0 (slack s_i starts basic).
        # Row p: w u - w v + a0 = 1 with w = column sums of S (a0 artificial).
        T = np.zeros((p + 2, nv + 2))
        T[:p, :d] = -S
        T[:p, d:2 * d] = S
        T[:p, 2 * d:2 * d + p] = np.eye(p)
        w = S.sum(axis=0)
        T[p, :d] = w
        T[p, d:2 * d] = -w
        T[p, art] = 1.0
        T[p, -1] = 1.0
        basis = [2 * d + i for i in range(p)] + [art]
        # Phase-1 cost row: minimize a0.  With a0 basic in row p the reduced
        # costs are -T[p] off the artificial column.
        T[-1] = -T[p]
        T[-1, art] = 0.0
        _bland(T, basis, p + 1, nv + 1, tol)
        self.feasible = -T[-1, -1] <= tol
        if not self.feasible:
            self._T = None
            self._basis = None
            return
        if art in basis:
            row = basis.index(art)
            pivots = np.nonzero(np.abs(T[row, :nv]) > tol)[0]
            if pivots.size:
                _pivot(T, basis, row, int(pivots[0]))
            else:
                # Redundant row (all zeros, rhs 0): drop it.
                T = np.delete(T, row, axis=0)
                del basis[row]
        self._T = np.delete(T[:-1], art, axis=1)
        self._basis = basis
        self.n_vars = nv

    def minimize(self, c_x: np.ndarray) -> tuple[float, np.ndarray]:
        """Minimize c_x . x over the cell.  Returns (objective value, optimizer x)."""
        if not self.feasible:
            raise SimplexError("cell is infeasible")
        d, p, nv = self.d, self.p, self.n_vars
        costs = np.concatenate([c_x, -c_x, np.zeros(p)])
        T = self._T
        basis = list(self._basis)
        cost_row = np.append(costs, 0.0)
        for k, b in enumerate(basis):
            cb = costs[b]
            if cb != 0.0:
                cost_row = cost_row - cb * T[k]
        work = np.vstack([T, cost_row])
        _bland(work, basis, len(basis), nv, self.tol)
        z = np.zeros(nv)
        for k, b in enumerate(basis):
            z[b] = work[k, -1]
        x = z[:d] - z[d:2 * d]
        return float(c_x @ x), x
