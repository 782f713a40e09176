"""Update law, mean-field envelope, and trajectory diagnostics.

The per-step law moves the estimate x along +/- a_i depending only on
the sign of y(i) - a_i . x, and relaxes the scalar tracker y(i) toward
the freshly reported value.  The x update always reads the pre-update
y.  The remaining pieces describe the averaged picture: admissible
mean-field directions (h_sample), the drift/bias/noise split of one
realized increment (decompose), and an explicit Euler integrator for
the limiting differential inclusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ObservationMatrix, ProblemSpec, State, StepSchedule


def sign(r: float) -> int:
    """Three-valued sign: 0 only on exact zero, no epsilon band."""
    if r > 0.0:
        return 1
    if r < 0.0:
        return -1
    return 0


def _dot(row, x) -> float:
    """Left-to-right accumulated dot product.

    The simulation loop, the live server, and replay verification all
    funnel scalar products through this exact accumulation order, which
    is what makes bit-identical replays possible.
    """
    acc = 0.0
    for a, b in zip(row, x):
        acc += float(a) * float(b)
    return acc


def step(state: State, i: int, sample: float, A: ObservationMatrix,
         schedule: StepSchedule) -> State:
    """Apply one asynchronous update at node i with response value `sample`.

    Returns the successor state; the input state is not mutated.  An
    exact tie y(i) == a_i . x leaves x in place (sign 0) while y still
    relaxes toward the sample.
    """
    if not 0 <= i < A.p:
        raise ValueError(f"node index {i} out of range")
    if state.x.size != A.d or state.y.size != A.p:
        raise ValueError("state dimensions do not match the matrix")
    sample = float(sample)
    if not math.isfinite(sample):
        raise ValueError("sample must be finite")
    row = A.row(i).tolist()
    x = state.x.tolist()
    ax = _dot(row, x)
    yi = float(state.y[i])
    s = sign(yi - ax)
    if s:
        t = schedule.alpha(state.n) * s
        x = [xj + t * aj for xj, aj in zip(x, row)]
    y = state.y.copy()
    y[i] = yi + schedule.beta(state.n) * (sample - yi)
    return State(np.array(x), y, state.n + 1)


@dataclass(frozen=True, eq=False)
class HElement:
    """One admissible mean-field direction theta = (1/p) sum_i lambda_i a_i."""

    theta: np.ndarray
    lambdas: np.ndarray


def h_sample(x, A: ObservationMatrix, spec: ProblemSpec, adversary_lambdas=(),
             tie_lambdas: dict[int, float] | None = None) -> HElement:
    """Select one element of the mean-field map at x.

    Honest coordinates are forced to sign(E[Y(i)] - a_i . x) whenever
    that difference is nonzero; exact ties take the caller-supplied
    value (default 0).  Adversarial coordinates take adversary_lambdas,
    aligned with sorted(spec.adversary_set).  Free values outside
    [-1, 1] are rejected.
    """
    spec.validate_for(A)
    x = np.asarray(x, dtype=np.float64).reshape(A.d)
    adv = sorted(spec.adversary_set)
    adversary_lambdas = np.asarray(adversary_lambdas, dtype=np.float64).reshape(-1)
    if adversary_lambdas.size != len(adv):
        raise ValueError(f"expected {len(adv)} adversary values, got {adversary_lambdas.size}")
    ey = spec.expected_y(A)
    ax = A.matrix @ x
    lam = np.empty(A.p)
    ties = tie_lambdas or {}
    for i in range(A.p):
        if i in spec.adversary_set:
            continue
        r = ey[i] - ax[i]
        lam[i] = float(sign(r)) if r != 0.0 else float(ties.get(i, 0.0))
    for k, i in enumerate(adv):
        lam[i] = adversary_lambdas[k]
    if np.any(np.abs(lam) > 1.0) or not np.all(np.isfinite(lam)):
        raise ValueError("lambda values must lie in [-1, 1]")
    theta = (A.matrix.T @ lam) / A.p
    return HElement(theta, lam)


@dataclass(frozen=True, eq=False)
class IncrementDecomposition:
    """Drift/bias/noise split of one realized x increment.

    g carries the ground-truth signs on honest nodes (and the realized
    signs on adversarial ones); b is the honest-node discrepancy between
    realized and ground-truth signs; noise is the residual of the drawn
    node's realized direction against g + b, stored so that

        x_{n+1} - x_n = alpha_n * ((g + b) + noise)

    holds under exactly that evaluation order.
    """

    g: np.ndarray
    b: np.ndarray
    noise: np.ndarray
    alpha_n: float
    node: int

    def reconstruct(self) -> np.ndarray:
        """The increment alpha_n * ((g + b) + noise) in the documented order."""
        return self.alpha_n * ((self.g + self.b) + self.noise)


def decompose(state: State, i: int, A: ObservationMatrix, spec: ProblemSpec,
              schedule: StepSchedule) -> IncrementDecomposition:
    """Split the increment realized by drawing node i at the given state.

    Harness-only diagnostic: it reads the ground truth E[Y] off `spec`,
    which no live estimator has.  Uniform averaging over the drawn node
    makes g + b the exact conditional mean of the realized direction.
    """
    spec.validate_for(A)
    if not 0 <= i < A.p:
        raise ValueError(f"node index {i} out of range")
    mat = A.matrix
    ax = mat @ state.x
    ey = spec.expected_y(A)
    s_cur = np.sign(state.y - ax)
    s_true = np.sign(ey - ax)
    honest = np.array([j not in spec.adversary_set for j in range(A.p)])
    g = (mat.T @ np.where(honest, s_true, s_cur)) / A.p
    b = (mat.T @ np.where(honest, s_cur - s_true, 0.0)) / A.p
    realized = mat[i] * s_cur[i]
    noise = realized - (g + b)
    return IncrementDecomposition(g, b, noise, schedule.alpha(state.n), int(i))


def lyapunov_dd(x, theta: HElement | np.ndarray, mu) -> float:
    """Directional derivative of V(x) = 0.5 ||x - mu||^2 along theta."""
    t = theta.theta if isinstance(theta, HElement) else np.asarray(theta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    mu = np.asarray(mu, dtype=np.float64).reshape(-1)
    return float((x - mu) @ t)


def repelling_selection(A: ObservationMatrix, spec: ProblemSpec):
    """Worst-case adversary for the inclusion: push along sign(a_i . (x - mu))."""
    adv = sorted(spec.adversary_set)
    rows = A.matrix[adv]
    mu = spec.mu

    def select(_k: int, x: np.ndarray) -> np.ndarray:
        return np.sign(rows @ (x - mu))

    return select


def constant_selection(values):
    """Fixed adversary coordinates, e.g. all +1."""
    vals = np.asarray(values, dtype=np.float64).reshape(-1)

    def select(_k: int, _x: np.ndarray) -> np.ndarray:
        return vals

    return select


def integrate_di(x0, A: ObservationMatrix, spec: ProblemSpec, adversary_selection,
                 dt: float = 0.01, steps: int = 1000) -> np.ndarray:
    """Explicit Euler path of the mean-field inclusion dx/dt in h(x).

    adversary_selection(k, x) supplies the adversarial coordinates for
    step k.  Returns the path as an array of shape (steps + 1, d); each
    Euler increment is dt * theta with ||theta|| <= max_i ||a_i||, so
    the per-step displacement is bounded by dt times that norm.
    """
    if dt <= 0.0 or not math.isfinite(dt):
        raise ValueError("dt must be positive and finite")
    if steps < 0:
        raise ValueError("steps must be >= 0")
    x = np.array(x0, dtype=np.float64).reshape(A.d)
    path = np.empty((steps + 1, A.d))
    path[0] = x
    for k in range(steps):
        lam = adversary_selection(k, x)
        theta = h_sample(x, A, spec, lam).theta
        x = x + dt * theta
        path[k + 1] = x
    return path
