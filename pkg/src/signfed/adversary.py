"""Response policies for compromised nodes.

A policy sees everything: the live run state, the ground truth, and a
true-sample oracle it may call or ignore.  It influences the run only
through the scalar it returns, and a returned value can move x by at
most alpha_n * max_i ||a_i|| per step no matter how large it is; that
cap is the whole reason the estimator tolerates these nodes.

Policies that draw randomness get a dedicated generator bound by the
harness (`bind_rng`), so adding or reconfiguring one policy never
shifts the samples seen by anyone else.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import _dot, sign
from .model import ObservationMatrix, ProblemSpec, State, sample_y

REPEL_DEFAULT_SCALE = 1e3


@dataclass
class RunView:
    """What a policy may inspect while the run is live.

    x and y are the harness's own working buffers (plain float lists),
    updated in place between calls; `expected` holds a_i . mu per node.
    `history` stays None unless some policy sets needs_history, since
    retaining every state costs O(iterations * (d + p)) memory.
    """

    A: ObservationMatrix
    mu: Sequence[float]
    expected: Sequence[float]
    x0: Sequence[float]
    x: Sequence[float]
    y: Sequence[float]
    n: int = 0
    history: Optional[list[State]] = None


class Policy:
    """Base response policy; subclasses override respond()."""

    needs_history = False

    def __init__(self) -> None:
        self._rng: Optional[np.random.Generator] = None

    def bind_rng(self, rng: np.random.Generator) -> None:
        self._rng = rng

    @property
    def rng(self) -> np.random.Generator:
        if self._rng is None:
            # Standalone use outside the harness; the harness always binds
            # an explicit per-policy stream before the first respond().
            self._rng = np.random.default_rng(0)
        return self._rng

    def respond(self, i: int, view: RunView, true_sample: Callable[[], float]) -> float:
        raise NotImplementedError


@dataclass
class Honest(Policy):
    """Pass-through: report a genuine sample."""

    def __post_init__(self) -> None:
        Policy.__init__(self)

    def respond(self, i, view, true_sample):
        return float(true_sample())


@dataclass
class Constant(Policy):
    """Always report the same value."""

    value: float

    def __post_init__(self) -> None:
        Policy.__init__(self)
        if not math.isfinite(self.value):
            raise ValueError("constant response must be finite")

    def respond(self, i, view, true_sample):
        return float(self.value)


@dataclass
class RandomUniform(Policy):
    """Report uniform noise on [low, high], independent of everything."""

    low: float
    high: float

    def __post_init__(self) -> None:
        Policy.__init__(self)
        if not (math.isfinite(self.low) and math.isfinite(self.high) and self.low <= self.high):
            raise ValueError("need finite low <= high")

    def respond(self, i, view, true_sample):
        return float(self.rng.uniform(self.low, self.high))


@dataclass
class Repel(Policy):
    """Drag y(i) far from a_i . x on the side that pushes x away from mu.

    Reporting a_i . x + s * L with s = sign(a_i . (x - mu)) parks the
    tracker at distance ~L from the current projection, so the sign fed
    to the x update stays pinned at the outward direction essentially
    forever.  With magnitude None, L is derived on first use as
    REPEL_DEFAULT_SCALE * max_i ||a_i|| * (1 + ||x0 - mu||).
    """

    magnitude: Optional[float] = None
    _resolved: Optional[float] = field(default=None, repr=False, init=False, compare=False)

    def __post_init__(self) -> None:
        Policy.__init__(self)
        if self.magnitude is not None and not (
                math.isfinite(self.magnitude) and self.magnitude > 0.0):
            raise ValueError("magnitude must be positive and finite")

    def _level(self, view: RunView) -> float:
        if self.magnitude is not None:
            return self.magnitude
        if self._resolved is None:
            off = math.sqrt(sum((a - b) ** 2 for a, b in zip(view.x0, view.mu)))
            self._resolved = REPEL_DEFAULT_SCALE * view.A.max_row_norm * (1.0 + off)
        return self._resolved

    def respond(self, i, view, true_sample):
        row = view.A.row(i)
        ax = _dot(row, view.x)
        s = sign(ax - float(view.expected[i]))
        if s == 0:
            s = 1
        return ax + s * self._level(view)


@dataclass
class Collude(Policy):
    """Report values consistent with a fabricated center x_target.

    Give the same instance (or same target) to every compromised node
    and their reports jointly mimic a world whose truth sits at
    x_target; jitter adds uniform noise of that half-width on top.
    """

    x_target: Sequence[float]
    jitter: float = 0.0

    def __post_init__(self) -> None:
        Policy.__init__(self)
        self.x_target = [float(v) for v in np.asarray(self.x_target, dtype=np.float64).reshape(-1)]
        if not all(math.isfinite(v) for v in self.x_target):
            raise ValueError("x_target must be finite")
        if not (math.isfinite(self.jitter) and self.jitter >= 0.0):
            raise ValueError("jitter must be >= 0")

    def respond(self, i, view, true_sample):
        base = _dot(view.A.row(i), self.x_target)
        if self.jitter > 0.0:
            base += float(self.rng.uniform(-self.jitter, self.jitter))
        return base


def respond(policy: Policy, i: int, state_history: Sequence[State],
            A: ObservationMatrix, true_sample: Callable[[], float],
            spec: Optional[ProblemSpec] = None) -> float:
    """Standalone dispatch for one response, outside the simulation loop.

    Builds a RunView from the newest state in `state_history`.  Policies
    that consult the ground truth (Repel) need `spec`; the others accept
    spec=None, in which case mu-dependent fields are zero-filled.
    """
    if not state_history:
        raise ValueError("state_history must contain at least one state")
    cur = state_history[-1]
    first = state_history[0]
    if spec is not None:
        mu = [float(v) for v in spec.mu]
        expected = [float(v) for v in spec.expected_y(A)]
    else:
        mu = [0.0] * A.d
        expected = [0.0] * A.p
    view = RunView(
        A=A, mu=mu, expected=expected,
        x0=[float(v) for v in first.x],
        x=[float(v) for v in cur.x],
        y=[float(v) for v in cur.y],
        n=cur.n,
        history=list(state_history) if policy.needs_history else None,
    )
    return policy.respond(i, view, true_sample)


def oracle_for(spec: ProblemSpec, A: ObservationMatrix, i: int,
               rng: np.random.Generator) -> Callable[[], float]:
    """True-sample oracle for node i, drawing from `rng` when called."""

    def draw() -> float:
        return sample_y(spec, A, i, rng)

    return draw
