"""Core types: observation matrices, problem setup, stepsize schedules, sampling.

Everything downstream (robustness checks, simulation, the wire protocol)
builds on the types in this module.  Node indices are 0-based throughout.
"""

from __future__ import annotations

import math
import numbers
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

# Singular values below this fraction of the largest one count as zero
# when deciding column rank.
RANK_RTOL = 1e-9

# Tolerance used when validating covariance symmetry / positive
# semidefiniteness, relative to the matrix scale.
PSD_TOL = 1e-9

ALPHA_CLAUSE = "alpha in (2/3, 1]"
BETA_RANGE_CLAUSE = "beta in (1/2, 1]"
BETA_WINDOW_CLAUSE = "beta in (2*(1 - alpha), alpha)"


@dataclass(frozen=True)
class ScheduleVerdict:
    """Outcome of validating a stepsize exponent pair."""

    valid: bool
    violations: tuple[str, ...]


def validate_schedule(alpha: float, beta: float) -> ScheduleVerdict:
    """Check the admissibility conditions on the stepsize exponents.

    The slow (x) exponent must satisfy alpha in (2/3, 1]; the fast (y)
    exponent must satisfy beta in (1/2, 1] and additionally fall inside
    the open window (2*(1 - alpha), alpha).  Returns a verdict listing
    every violated clause; never raises.
    """
    alpha = float(alpha)
    beta = float(beta)
    violations: list[str] = []
    if not (alpha > 2.0 / 3.0 and alpha <= 1.0):
        violations.append(ALPHA_CLAUSE)
    if not (beta > 0.5 and beta <= 1.0):
        violations.append(BETA_RANGE_CLAUSE)
    if not (2.0 * (1.0 - alpha) < beta < alpha):
        violations.append(BETA_WINDOW_CLAUSE)
    return ScheduleVerdict(not violations, tuple(violations))


@dataclass(eq=False)
class StepSchedule:
    """Power-law stepsize pair alpha_n = (n+offset)^-a, beta_n = (n+offset)^-b.

    The exponents are validated at construction; an inadmissible pair
    raises ValueError naming the violated clauses.  Partial sums of
    beta_n (needed by :meth:`gamma`) are cached incrementally.  The
    schedule is logically immutable after construction; the cache only
    grows, so sharing an instance across simulations is safe.
    """

    alpha_exponent: float
    beta_exponent: float
    offset: int = 1
    _beta_cumsum: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        verdict = validate_schedule(self.alpha_exponent, self.beta_exponent)
        if not verdict.valid:
            raise ValueError("inadmissible stepsize exponents: " + "; ".join(verdict.violations))
        if not isinstance(self.offset, numbers.Integral) or self.offset < 1:
            raise ValueError(f"offset must be a positive integer, got {self.offset!r}")
        self.offset = int(self.offset)
        self._beta_cumsum = np.array([self.beta(0)])

    def alpha(self, n: int) -> float:
        """Slow stepsize at iteration n (scales the x update)."""
        if n < 0:
            raise ValueError("n must be >= 0")
        return (n + self.offset) ** (-self.alpha_exponent)

    def beta(self, n: int) -> float:
        """Fast stepsize at iteration n (scales the y update)."""
        if n < 0:
            raise ValueError("n must be >= 0")
        return (n + self.offset) ** (-self.beta_exponent)

    def _ensure_cumsum(self, n: int) -> None:
        have = len(self._beta_cumsum)
        if n < have:
            return
        # Grow geometrically so repeated scalar queries stay amortized O(1).
        upto = max(n + 1, 2 * have)
        ks = np.arange(have, upto, dtype=np.float64)
        tail = (ks + self.offset) ** (-self.beta_exponent)
        tail[0] += self._beta_cumsum[-1]
        self._beta_cumsum = np.concatenate([self._beta_cumsum, np.cumsum(tail)])

    def beta_partial_sum(self, n: int) -> float:
        """Sum of beta_k for k = 0..n inclusive."""
        if n < 0:
            raise ValueError("n must be >= 0")
        self._ensure_cumsum(n)
        return float(self._beta_cumsum[n])

    def gamma(self, n: int) -> float:
        """Normalization envelope sqrt(beta_n * log(sum_{k<=n} beta_k)).

        Clamped to 0 while the log term is nonpositive, so the value is
        well defined from n = 0 on.
        """
        s = self.beta_partial_sum(n)
        if s <= 1.0:
            return 0.0
        return math.sqrt(self.beta(n) * math.log(s))

    def alpha_array(self, n_iterations: int) -> list[float]:
        """alpha_n for n = 0..N-1, computed with the same scalar path as alpha()."""
        off, a = self.offset, self.alpha_exponent
        return [(n + off) ** (-a) for n in range(n_iterations)]

    def beta_array(self, n_iterations: int) -> list[float]:
        """beta_n for n = 0..N-1, computed with the same scalar path as beta()."""
        off, b = self.offset, self.beta_exponent
        return [(n + off) ** (-b) for n in range(n_iterations)]

    def gamma_array(self, ns) -> list[float]:
        """gamma at each iteration index in ns (single code path with gamma())."""
        ns = list(ns)
        if ns:
            self._ensure_cumsum(max(ns))
        return [self.gamma(n) for n in ns]


def gamma(n: int, schedule: StepSchedule) -> float:
    """Module-level convenience wrapper for StepSchedule.gamma."""
    return schedule.gamma(n)


class ObservationMatrix:
    """Tall, full-column-rank matrix whose rows give each node's scalar view.

    Row i belongs to node i; a fresh observation at node i has mean
    a_i^T mu.  Tallness (p > d) is required by default since the
    identification argument needs more nodes than dimensions; pass
    require_tall=False for degenerate sanity scenarios (p == d).
    """

    __slots__ = ("matrix", "p", "d", "row_norms", "max_row_norm")

    def __init__(self, rows, *, require_tall: bool = True, rank_rtol: float = RANK_RTOL):
        m = np.array(rows, dtype=np.float64)
        if m.ndim == 1:
            m = m[:, None]
        if m.ndim != 2 or m.size == 0:
            raise ValueError("expected a nonempty 2-D array of rows")
        if not np.all(np.isfinite(m)):
            raise ValueError("matrix entries must be finite")
        p, d = m.shape
        if require_tall and p <= d:
            raise ValueError(f"need more nodes than dimensions: p={p} <= d={d}")
        svals = np.linalg.svd(m, compute_uv=False)
        rank = int(np.sum(svals > rank_rtol * svals[0])) if svals[0] > 0 else 0
        if rank < d:
            raise ValueError(f"rank {rank} < d={d}: matrix is not full column rank")
        m.setflags(write=False)
        self.matrix = m
        self.p = p
        self.d = d
        self.row_norms = np.linalg.norm(m, axis=1)
        self.row_norms.setflags(write=False)
        self.max_row_norm = float(self.row_norms.max())

    @classmethod
    def column(cls, weights, **kwargs) -> "ObservationMatrix":
        """Build a p x 1 matrix from scalar per-node weights."""
        return cls(np.asarray(weights, dtype=np.float64).reshape(-1, 1), **kwargs)

    def row(self, i: int) -> np.ndarray:
        return self.matrix[i]

    def __repr__(self) -> str:
        return f"ObservationMatrix(p={self.p}, d={self.d})"


@runtime_checkable
class Distribution(Protocol):
    """Pluggable sampling interface for the per-node observation model."""

    def sample_batch(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Return `count` i.i.d. draws as an array of shape (count, d)."""
        ...


@dataclass(eq=False)
class ProblemSpec:
    """Ground truth for a run: target mean, noise model, and who is adversarial.

    adversary_set holds 0-based node indices; its size must not exceed
    m_bound, the tolerance the instance is supposed to withstand.
    perturbation_bound B adds a uniform [-B, B] term to every honest
    sample.  A custom distribution (anything satisfying Distribution)
    replaces the default Gaussian; mu remains the declared mean used by
    all ground-truth diagnostics.
    """

    mu: np.ndarray
    covariance: np.ndarray
    adversary_set: frozenset[int] = frozenset()
    m_bound: int = 0
    perturbation_bound: float = 0.0
    distribution: Distribution | None = None
    cov_factor: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        mu = np.array(self.mu, dtype=np.float64).reshape(-1)
        if mu.size == 0 or not np.all(np.isfinite(mu)):
            raise ValueError("mu must be a nonempty finite vector")
        cov = np.array(self.covariance, dtype=np.float64)
        if cov.ndim == 0:
            cov = float(cov) * np.eye(mu.size)
        if cov.shape != (mu.size, mu.size):
            raise ValueError(f"covariance shape {cov.shape} does not match d={mu.size}")
        scale = max(1.0, float(np.abs(cov).max()))
        if float(np.abs(cov - cov.T).max()) > PSD_TOL * scale:
            raise ValueError("covariance must be symmetric")
        try:
            eigvals, eigvecs = np.linalg.eigh(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"covariance factorization failed: {exc}") from exc
        if eigvals.min() < -PSD_TOL * scale:
            raise ValueError(f"covariance is not positive semidefinite (min eig {eigvals.min():g})")
        factor = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))
        adv = frozenset(int(i) for i in self.adversary_set)
        if any(i < 0 for i in adv):
            raise ValueError("adversary indices must be nonnegative")
        m_bound = int(self.m_bound)
        if m_bound < 0:
            raise ValueError("m_bound must be >= 0")
        if len(adv) > m_bound:
            raise ValueError(f"|adversary_set|={len(adv)} exceeds m_bound={m_bound}")
        b = float(self.perturbation_bound)
        if not (b >= 0.0 and math.isfinite(b)):
            raise ValueError("perturbation_bound must be finite and >= 0")
        mu.setflags(write=False)
        cov.setflags(write=False)
        factor.setflags(write=False)
        self.mu = mu
        self.covariance = cov
        self.adversary_set = adv
        self.m_bound = m_bound
        self.perturbation_bound = b
        self.cov_factor = factor

    @property
    def d(self) -> int:
        return self.mu.size

    def validate_for(self, A: ObservationMatrix) -> None:
        """Cross-check dimensions and adversary indices against a matrix."""
        if A.d != self.d:
            raise ValueError(f"matrix has d={A.d}, problem has d={self.d}")
        if self.adversary_set and max(self.adversary_set) >= A.p:
            raise ValueError("adversary index out of range for this matrix")

    def expected_y(self, A: ObservationMatrix) -> np.ndarray:
        """Ground-truth sample means A @ mu (the adversary-free targets)."""
        self.validate_for(A)
        return A.matrix @ self.mu

    def honest_nodes(self, p: int) -> tuple[int, ...]:
        return tuple(i for i in range(p) if i not in self.adversary_set)


@dataclass(frozen=True, eq=False)
class State:
    """Joint iterate: running estimate x, per-node filtered samples y, step count n."""

    x: np.ndarray
    y: np.ndarray
    n: int

    def __post_init__(self) -> None:
        x = np.array(self.x, dtype=np.float64).reshape(-1)
        y = np.array(self.y, dtype=np.float64).reshape(-1)
        if self.n < 0:
            raise ValueError("n must be >= 0")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)


def sample_x(spec: ProblemSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw one observation vector X.

    Gaussian by default (mean mu, the declared covariance); a pluggable
    spec.distribution overrides the law.  Zero covariance returns mu
    exactly.
    """
    if spec.distribution is not None:
        batch = np.asarray(spec.distribution.sample_batch(rng, 1), dtype=np.float64)
        return batch.reshape(-1, spec.d)[0].copy()
    z = rng.standard_normal(spec.d)
    return spec.mu + spec.cov_factor @ z


def sample_y_batch(spec: ProblemSpec, A: ObservationMatrix, i: int, count: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Draw `count` honest scalar responses for node i.

    Each draw uses a fresh X; with perturbation_bound B > 0 an
    independent uniform [-B, B] term is added per draw.
    """
    spec.validate_for(A)
    if not (0 <= i < A.p):
        raise ValueError(f"node index {i} out of range")
    row = A.row(i)
    if spec.distribution is not None:
        xs = np.asarray(spec.distribution.sample_batch(rng, count), dtype=np.float64)
        vals = xs.reshape(count, spec.d) @ row
    else:
        z = rng.standard_normal((count, spec.d))
        vals = (z @ spec.cov_factor.T + spec.mu) @ row
    if spec.perturbation_bound > 0.0:
        vals = vals + rng.uniform(-spec.perturbation_bound, spec.perturbation_bound, size=count)
    return vals


def sample_y(spec: ProblemSpec, A: ObservationMatrix, i: int, rng: np.random.Generator) -> float:
    """Draw one honest scalar response for node i (batch of one)."""
    return float(sample_y_batch(spec, A, i, 1, rng)[0])
