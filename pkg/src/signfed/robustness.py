"""Decide whether an observation matrix tolerates a given number of adversaries.

The core question: for matrix A and adversary budget m, does

    sum_{i not in K} |a_i . x|  >  sum_{i in K} |a_i . x|

hold for every nonzero x and every node subset K of size m?  When it
does, no coalition of m nodes can pull the estimate away from the truth;
when it fails, the witness direction x and subset K describe an attack
surface.

The exact checker enumerates sign patterns sigma (modulo the global
flip) and subsets K, solving one small LP per pair on the cross-section
{sigma_i a_i . x >= 0, sum_i sigma_i a_i . x = 1}; any optimum <= 0 is a
certified violation.  Since full column rank forces sum_i |a_i . x| > 0
off the origin, the cross-section is bounded and the homogeneous check
becomes a finite family of bounded LPs.  The reported margin is the
minimum over the unit sphere of

    sum_i |a_i . x| - 2 * (sum of the m largest |a_i . x|),

which is exact whenever positive: the margin function restricted to any
sign cell is linear and positive there, so its sphere minimum sits on a
cell edge, i.e. on a direction orthogonal to d-1 independent rows, and
those directions are enumerable.  For a certified-negative instance the
reported value is the best violation found (exact in d = 1).

All reductions walk (sigma, K) in a fixed total order, so verdicts and
witnesses are deterministic.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .model import RANK_RTOL, ObservationMatrix
from .simplex import CellLP

# Exact enumeration is 2^(p-1) * C(p, m) small LPs; beyond this many rows
# the sampled checker is the intended tool.
MAX_EXACT_P = 12

# Margins inside [-STRICT_TOL, STRICT_TOL] count as tight, hence non-robust.
STRICT_TOL = 1e-9


class MatrixTooLargeError(ValueError):
    """Raised when the exact checker is asked to enumerate too many rows."""


@dataclass(frozen=True, eq=False)
class RobustnessVerdict:
    """Decision plus the sphere margin and the direction/subset that attains it.

    witness is (x, K): for a non-robust verdict the pair violates the
    strict inequality; for a robust one it is the tightest pair found.
    """

    robust: bool
    margin: float
    witness: tuple[np.ndarray, tuple[int, ...]] | None


@dataclass(frozen=True, eq=False)
class EtaEstimate:
    """Certified drift floor for one fixed adversary set M.

    eta is a true lower bound for (1/p) * [sum_{M^c} |a_i . x| -
    sum_M |a_i . x|] over unit x, zero when the set defeats the matrix;
    margin keeps the signed minimum so callers can see how badly a
    non-robust set fails.
    """

    eta: float
    margin: float
    argmin_x: np.ndarray
    adversary_set: tuple[int, ...]


def margin_at(A: ObservationMatrix, m: int, x: np.ndarray) -> float:
    """Robustness margin function at a direction x (degree-1 homogeneous)."""
    absp = np.abs(A.matrix @ x)
    total = float(absp.sum())
    if m:
        total -= 2.0 * float(np.sort(absp)[-m:].sum())
    return total


def _top_m_subset(absp: np.ndarray, m: int) -> tuple[int, ...]:
    """Indices of the m largest magnitudes, ties broken toward lower index."""
    if m == 0:
        return ()
    order = np.lexsort((np.arange(absp.size), -absp))
    return tuple(sorted(int(i) for i in order[:m]))


def _canonical_direction(x: np.ndarray) -> np.ndarray:
    """Unit vector with a fixed sign convention (first nonzero component > 0)."""
    x = np.asarray(x, dtype=np.float64)
    nrm = np.linalg.norm(x)
    if nrm == 0.0:
        raise ValueError("zero direction")
    x = x / nrm
    for v in x:
        if v != 0.0:
            if v < 0.0:
                x = -x
            break
    return x


def _sign_patterns(p: int):
    """All sign vectors in {+1, -1}^p with the first entry pinned to +1."""
    for bits in range(1 << (p - 1)):
        sigma = np.ones(p)
        for i in range(1, p):
            if (bits >> (i - 1)) & 1:
                sigma[i] = -1.0
        yield sigma


def _candidate_directions(A: ObservationMatrix) -> list[np.ndarray]:
    """Unit null directions of every rank-(d-1) subset of d-1 rows.

    Every cell-edge direction of the |a_i . x| arrangement is of this
    form, and the positive sphere minimum of any fixed-sign linear piece
    is attained on a cell edge, so this list contains the argmin
    whenever the instance is robust.
    """
    d = A.d
    if d == 1:
        return [np.array([1.0])]
    out: list[np.ndarray] = []
    for rows in itertools.combinations(range(A.p), d - 1):
        sub = A.matrix[list(rows)]
        svals_uvh = np.linalg.svd(sub)
        svals = svals_uvh[1]
        if svals[0] <= 0.0 or int(np.sum(svals > RANK_RTOL * svals[0])) != d - 1:
            continue
        out.append(_canonical_direction(svals_uvh[2][d - 1]))
    return out


def _lp_minimizer_points(A: ObservationMatrix, weight_rows: list[np.ndarray],
                         tol: float) -> list[np.ndarray]:
    """Unit-sphere projections of every (sigma, w) cell-LP optimizer.

    For each nonempty sign cell the LP minimizes sum_i w_i sigma_i a_i . x
    over the cell cross-section; a nonpositive optimum certifies that the
    weighted sum is nonpositive somewhere on the sphere.
    """
    pts: list[np.ndarray] = []
    mat = A.matrix
    for sigma in _sign_patterns(A.p):
        scaled = sigma[:, None] * mat
        cell = CellLP(scaled, tol=tol)
        if not cell.feasible:
            continue
        for w in weight_rows:
            _, x = cell.minimize(scaled.T @ w)
            if np.linalg.norm(x) > 1e-12:
                pts.append(_canonical_direction(x))
    return pts


def _validate_m(p: int, m: int) -> int:
    m = int(m)
    if not 0 <= m < p:
        raise ValueError(f"adversary budget m={m} must satisfy 0 <= m < p={p}")
    return m


def check_robust_exact(A: ObservationMatrix, m: int, *, tol: float = STRICT_TOL) -> RobustnessVerdict:
    """Exact enumeration-based verdict for budget m.

    Raises MatrixTooLargeError beyond MAX_EXACT_P rows.  robust is True
    iff the sphere margin exceeds tol; values inside [-tol, tol] report
    as tight, hence non-robust, with the attaining witness.
    """
    m = _validate_m(A.p, m)
    if A.p > MAX_EXACT_P:
        raise MatrixTooLargeError(
            f"p={A.p} exceeds the exact enumeration limit ({MAX_EXACT_P}); use the sampled checker")
    weight_rows = []
    for K in itertools.combinations(range(A.p), m):
        w = np.ones(A.p)
        w[list(K)] = -1.0
        weight_rows.append(w)
    points = _lp_minimizer_points(A, weight_rows, tol) + _candidate_directions(A)
    best_val = np.inf
    best_x = None
    for x in points:
        val = margin_at(A, m, x)
        if val < best_val:
            best_val = val
            best_x = x
    subset = _top_m_subset(np.abs(A.matrix @ best_x), m)
    return RobustnessVerdict(bool(best_val > tol), float(best_val), (best_x, subset))


def check_robust_d1(weights, m: int, *, tol: float = STRICT_TOL) -> RobustnessVerdict:
    """Closed form for d = 1: robust iff sum|w| > 2 * (sum of m largest |w|)."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.size == 0 or not np.all(np.isfinite(w)):
        raise ValueError("weights must be a nonempty finite vector")
    if not np.any(w != 0.0):
        raise ValueError("all-zero weights have no identifiable direction")
    m = _validate_m(w.size, m)
    absw = np.abs(w)
    margin = float(absw.sum())
    if m:
        margin -= 2.0 * float(np.sort(absw)[-m:].sum())
    witness = (np.array([1.0]), _top_m_subset(absw, m))
    return RobustnessVerdict(bool(margin > tol), margin, witness)


def check_robust_sampled(A: ObservationMatrix, m: int, trials: int = 1000,
                         rng=None, *, refine_steps: int = 80,
                         tol: float = STRICT_TOL) -> RobustnessVerdict:
    """Randomized margin search: uniform sphere starts plus projected subgradient descent.

    One-sided: a nonpositive minimum certifies non-robustness, while a
    positive one is only evidence of robustness.  The reported margin is
    the best (lowest) sphere value seen across all starts and descent
    iterates.
    """
    m = _validate_m(A.p, m)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    mat = A.matrix
    p, d = A.p, A.d
    X = rng.standard_normal((trials, d))
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    X = np.where(norms > 1e-12, X / np.maximum(norms, 1e-12), np.eye(d)[0])

    best_val = np.inf
    best_x = None

    def scan(P_abs: np.ndarray, pts: np.ndarray) -> None:
        nonlocal best_val, best_x
        vals = P_abs.sum(axis=1)
        if m:
            vals = vals - 2.0 * np.sort(P_abs, axis=1)[:, p - m:].sum(axis=1)
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best_val = float(vals[k])
            best_x = pts[k].copy()

    for step_idx in range(refine_steps):
        P = X @ mat.T
        absp = np.abs(P)
        scan(absp, X)
        w = np.ones_like(P)
        if m:
            top_idx = np.argsort(absp, axis=1)[:, p - m:]
            np.put_along_axis(w, top_idx, -1.0, axis=1)
        G = (np.sign(P) * w) @ mat
        G = G - (G * X).sum(axis=1, keepdims=True) * X
        gn = np.linalg.norm(G, axis=1, keepdims=True)
        step = 0.5 / (step_idx + 3.0)
        X = X - step * G / np.maximum(gn, 1e-12)
        X = X / np.linalg.norm(X, axis=1, keepdims=True)
    scan(np.abs(X @ mat.T), X)

    best_x = _canonical_direction(best_x)
    best_val = margin_at(A, m, best_x)
    subset = _top_m_subset(np.abs(mat @ best_x), m)
    return RobustnessVerdict(bool(best_val > tol), float(best_val), (best_x, subset))


def estimate_eta(A: ObservationMatrix, adversary_set, *, tol: float = STRICT_TOL) -> EtaEstimate:
    """Certified drift floor for a fixed adversary set M.

    Minimizes phi(x) = (1/p) [sum_{M^c} |a_i . x| - sum_M |a_i . x|] over
    unit x with the same LP-plus-edge-direction machinery as the exact
    checker, so the value is exact when positive.  eta clamps the signed
    minimum at zero; argmin_x attains the signed minimum.
    """
    M = tuple(sorted(int(i) for i in adversary_set))
    if any(i < 0 or i >= A.p for i in M):
        raise ValueError("adversary index out of range")
    if len(set(M)) != len(M):
        raise ValueError("duplicate adversary index")
    if A.p > MAX_EXACT_P:
        raise MatrixTooLargeError(
            f"p={A.p} exceeds the exact enumeration limit ({MAX_EXACT_P}); use the sampled checker")
    w = np.ones(A.p)
    w[list(M)] = -1.0
    inv_p = 1.0 / A.p

    def phi(x: np.ndarray) -> float:
        return inv_p * float(w @ np.abs(A.matrix @ x))

    points = _lp_minimizer_points(A, [w], tol) + _candidate_directions(A)
    best_val = np.inf
    best_x = None
    for x in points:
        val = phi(x)
        if val < best_val:
            best_val = val
            best_x = x
    eta = float(best_val) if best_val > tol else 0.0
    return EtaEstimate(eta, float(best_val), best_x, M)
