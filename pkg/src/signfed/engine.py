"""Seeded single-process simulation loop with trajectory recording.

The hot loop runs on plain Python floats (lists, inlined dot products);
at the target of a few hundred thousand iterations per run that is both
fast enough (~1e6 steps/s) and keeps every arithmetic expression
identical to dynamics.step, so a recorded run can be replayed
bit-for-bit through the functional API.

Randomness is split into named Philox streams derived from one root
seed: (0, 0) drives the scheduler's node draws, (1, i) feeds node i's
observations, (2, i) feeds node i's policy.  Reconfiguring one node
never perturbs anyone else's stream.
"""

from __future__ import annotations

import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adversary import Honest, Policy, RunView
from .model import (ObservationMatrix, ProblemSpec, State, StepSchedule,
                    sample_y, sample_y_batch)

STREAM_SCHEDULER = 0
STREAM_NODE = 1
STREAM_POLICY = 2

CSV_HEADER = "n,err_x,err_y_mc,gamma,ratio,l1_obj"

DEFAULT_MAX_RECORDS = 10_000


def stream(seed: int, kind: int, index: int = 0) -> np.random.Generator:
    """Named substream (kind, index) of the root seed."""
    ss = np.random.SeedSequence(seed, spawn_key=(kind, index))
    return np.random.Generator(np.random.Philox(ss))


def record_points(n_iterations: int, max_records: int = DEFAULT_MAX_RECORDS) -> list[int]:
    """Iteration indices whose pre-step state gets recorded.

    Always includes 0; the rest are log-spaced over [1, N-1] and
    deduplicated, so short runs record every step and long runs stay
    within max_records rows.
    """
    if n_iterations < 1:
        raise ValueError("need at least one iteration")
    if max_records < 1:
        raise ValueError("max_records must be >= 1")
    if n_iterations == 1 or max_records == 1:
        return [0]
    hi = n_iterations - 1
    pts = np.unique(np.round(np.geomspace(1.0, hi, max_records - 1)).astype(np.int64))
    pts = pts[(pts >= 1) & (pts <= hi)]
    return [0] + pts.tolist()


@dataclass(eq=False)
class Trajectory:
    """Recorded metrics at log-spaced iterations, plus the final state.

    ratio[k] is err_y_mc / gamma at the recorded iteration, or None
    while gamma is still clamped to zero; max_norm[k] is the running
    max of ||x_j|| over all j <= ns[k] (every step, not just recorded
    ones).
    """

    ns: np.ndarray
    err_x: np.ndarray
    err_y_mc: np.ndarray
    gamma: np.ndarray
    ratio: list[Optional[float]]
    l1_obj: np.ndarray
    max_norm: np.ndarray
    max_norm_full: float
    final_state: State
    final_err: float
    seed: int
    iterations: int

    def to_csv_text(self) -> str:
        lines = [CSV_HEADER]
        for k in range(len(self.ns)):
            r = self.ratio[k]
            lines.append("%d,%.17g,%.17g,%.17g,%s,%.17g" % (
                self.ns[k], self.err_x[k], self.err_y_mc[k], self.gamma[k],
                "" if r is None else "%.17g" % r, self.l1_obj[k]))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        """Atomic write: temp file in the target directory, then rename."""
        path = os.fspath(path)
        d = os.path.dirname(path) or "."
        fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as f:
                f.write(self.to_csv_text())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise


def read_trajectory_csv(path):
    """Parse a trajectory CSV back into column arrays (ratio keeps None gaps)."""
    with open(path) as f:
        header = f.readline().strip()
        if header != CSV_HEADER:
            raise ValueError(f"unexpected trajectory header: {header!r}")
        ns, err_x, err_y, gam, ratio, l1 = [], [], [], [], [], []
        for line in f:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise ValueError(f"malformed trajectory row: {line!r}")
            ns.append(int(parts[0]))
            err_x.append(float(parts[1]))
            err_y.append(float(parts[2]))
            gam.append(float(parts[3]))
            ratio.append(None if parts[4] == "" else float(parts[4]))
            l1.append(float(parts[5]))
    return {
        "n": np.array(ns, dtype=np.int64),
        "err_x": np.array(err_x),
        "err_y_mc": np.array(err_y),
        "gamma": np.array(gam),
        "ratio": ratio,
        "l1_obj": np.array(l1),
    }


class Recorder:
    """Accumulates trajectory rows; shared by the local loop and the server."""

    def __init__(self, A: ObservationMatrix, spec: ProblemSpec,
                 schedule: StepSchedule, points: Sequence[int]):
        self.points = list(points)
        self._A = A
        self._mu = spec.mu
        self._ey = spec.expected_y(A)
        self._honest = np.array(sorted(spec.honest_nodes(A.p)), dtype=np.intp)
        self._gammas = schedule.gamma_array(self.points)
        self._k = 0
        self.ns: list[int] = []
        self.err_x: list[float] = []
        self.err_y_mc: list[float] = []
        self.gamma: list[float] = []
        self.ratio: list[Optional[float]] = []
        self.l1_obj: list[float] = []
        self.max_norm: list[float] = []

    @property
    def next_point(self) -> int:
        """Next iteration to record, or -1 when done."""
        return self.points[self._k] if self._k < len(self.points) else -1

    def record(self, n: int, x, y, max_norm_sq: float) -> None:
        if n != self.points[self._k]:
            raise ValueError(f"expected record at n={self.points[self._k]}, got {n}")
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        ex = float(np.linalg.norm(x - self._mu))
        ey = float(np.linalg.norm(y[self._honest] - self._ey[self._honest]))
        g = self._gammas[self._k]
        self.ns.append(n)
        self.err_x.append(ex)
        self.err_y_mc.append(ey)
        self.gamma.append(g)
        self.ratio.append(ey / g if g > 0.0 else None)
        self.l1_obj.append(float(np.abs(self._A.matrix @ x - self._ey).sum()))
        self.max_norm.append(math.sqrt(max_norm_sq))
        self._k += 1

    def build(self, final_state: State, seed: int, iterations: int,
              max_norm_full: Optional[float] = None) -> Trajectory:
        last = self.max_norm[-1] if self.max_norm else 0.0
        return Trajectory(
            ns=np.array(self.ns, dtype=np.int64),
            err_x=np.array(self.err_x),
            err_y_mc=np.array(self.err_y_mc),
            gamma=np.array(self.gamma),
            ratio=list(self.ratio),
            l1_obj=np.array(self.l1_obj),
            max_norm=np.array(self.max_norm),
            max_norm_full=last if max_norm_full is None else float(max_norm_full),
            final_state=final_state,
            final_err=float(np.linalg.norm(final_state.x - self._mu)),
            seed=seed,
            iterations=iterations,
        )


@dataclass(eq=False)
class SimConfig:
    """Everything one run needs; safe to pickle for process pools.

    policies has one entry per node; nodes outside spec.adversary_set
    must carry Honest (their samples are pregenerated from the node
    streams, so a non-honest policy there would silently be ignored --
    rejected here instead).
    """

    A: ObservationMatrix
    spec: ProblemSpec
    schedule: StepSchedule
    policies: tuple
    iterations: int
    seed: int
    x0: Optional[np.ndarray] = None
    y0: Optional[np.ndarray] = None
    max_records: int = DEFAULT_MAX_RECORDS
    keep_history: bool = field(default=False)

    def __post_init__(self):
        self.spec.validate_for(self.A)
        self.policies = tuple(self.policies)
        if len(self.policies) != self.A.p:
            raise ValueError(f"need {self.A.p} policies, got {len(self.policies)}")
        for i, pol in enumerate(self.policies):
            if not isinstance(pol, Policy):
                raise TypeError(f"policies[{i}] is not a Policy")
            if i not in self.spec.adversary_set and not isinstance(pol, Honest):
                raise ValueError(
                    f"node {i} is outside the adversary set but has policy "
                    f"{type(pol).__name__}; honest nodes must use Honest")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.max_records < 1:
            raise ValueError("max_records must be >= 1")
        self.x0 = self._vec(self.x0, self.A.d, "x0")
        self.y0 = self._vec(self.y0, self.A.p, "y0")

    @staticmethod
    def _vec(v, size, name):
        if v is None:
            return np.zeros(size)
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.size != size:
            raise ValueError(f"{name} must have length {size}")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{name} must be finite")
        return v.copy()


def run(config: SimConfig) -> Trajectory:
    """Execute one seeded run and return its recorded trajectory.

    Deterministic: the same config (same seed) always produces the same
    trajectory, byte-identical CSVs included.
    """
    A, spec, sched = config.A, config.spec, config.schedule
    p, d, N = A.p, A.d, config.iterations
    rows = [A.row(i).tolist() for i in range(p)]

    # Pre-draw everything random: the node visit sequence from the
    # scheduler stream, and each honest node's observations from its own
    # stream (exactly as many as its visit count).
    iseq_arr = stream(config.seed, STREAM_SCHEDULER).integers(0, p, size=N)
    counts = np.bincount(iseq_arr, minlength=p)
    iseq = iseq_arr.tolist()
    honest_samples: dict[int, list[float]] = {}
    for i in spec.honest_nodes(p):
        if counts[i]:
            honest_samples[i] = sample_y_batch(
                spec, A, i, int(counts[i]), stream(config.seed, STREAM_NODE, i)).tolist()
        else:
            honest_samples[i] = []

    adversarial = sorted(spec.adversary_set)
    oracles = {}
    for i in adversarial:
        def make(i=i):
            gen = None

            def draw() -> float:
                nonlocal gen
                if gen is None:
                    gen = stream(config.seed, STREAM_NODE, i)
                return sample_y(spec, A, i, gen)

            return draw
        oracles[i] = make()
        config.policies[i].bind_rng(stream(config.seed, STREAM_POLICY, i))

    x = config.x0.tolist()
    y = config.y0.tolist()
    mu_l = spec.mu.tolist()
    ey_l = spec.expected_y(A).tolist()
    alphas = sched.alpha_array(N)
    betas = sched.beta_array(N)

    points = record_points(N, config.max_records)
    rec = Recorder(A, spec, sched, points)
    next_rec = rec.next_point

    keep_history = config.keep_history or any(
        pol.needs_history for pol in config.policies)
    history: Optional[list[State]] = [] if keep_history else None
    view = RunView(A=A, mu=mu_l, expected=ey_l, x0=list(x), x=x, y=y,
                   n=0, history=history)

    hs: list[Optional[list[float]]] = [honest_samples.get(i) for i in range(p)]
    sample_ptr = [0] * p
    max_nsq = 0.0

    for n in range(N):
        nsq = 0.0
        for v in x:
            nsq += v * v
        if nsq > max_nsq:
            max_nsq = nsq
        if n == next_rec:
            rec.record(n, x, y, max_nsq)
            next_rec = rec.next_point
        if history is not None:
            history.append(State(np.array(x), np.array(y), n))

        i = iseq[n]
        lst = hs[i]
        if lst is not None:
            k = sample_ptr[i]
            sample_ptr[i] = k + 1
            val = lst[k]
        else:
            view.n = n
            val = float(config.policies[i].respond(i, view, oracles[i]))
            if not math.isfinite(val):
                raise ValueError(f"policy for node {i} returned a non-finite value")

        row = rows[i]
        ax = 0.0
        for aj, xj in zip(row, x):
            ax += aj * xj
        yi = y[i]
        r = yi - ax
        if r > 0.0:
            t = alphas[n]
            for j in range(d):
                x[j] += t * row[j]
        elif r < 0.0:
            t = -alphas[n]
            for j in range(d):
                x[j] += t * row[j]
        y[i] = yi + betas[n] * (val - yi)

    nsq = 0.0
    for v in x:
        nsq += v * v
    if nsq > max_nsq:
        max_nsq = nsq

    final = State(np.array(x), np.array(y), N)
    return rec.build(final, config.seed, N, max_norm_full=math.sqrt(max_nsq))


def replay(config: SimConfig, traj: Trajectory) -> bool:
    """Re-run `config` and check the final state matches bit for bit."""
    again = run(config)
    return (np.array_equal(again.final_state.x, traj.final_state.x)
            and np.array_equal(again.final_state.y, traj.final_state.y))


def estimate_rate_constant(traj: Trajectory, n_min: int = 1000) -> float:
    """Empirical sup of err_y_mc / gamma over recorded iterations >= n_min.

    Raises if no recorded point lies at or past n_min, or if gamma is
    still zero somewhere in that tail (pick a later n_min).
    """
    idx = [k for k, n in enumerate(traj.ns) if n >= n_min]
    if not idx:
        raise ValueError(f"no recorded iterations at or beyond n_min={n_min}")
    vals = []
    for k in idx:
        r = traj.ratio[k]
        if r is None:
            raise ValueError(
                f"gamma is zero at recorded n={traj.ns[k]}; increase n_min")
        vals.append(r)
    return max(vals)


def boundedness_probe(traj: Trajectory) -> tuple[float, float, bool]:
    """(max ||x|| over first half, over full run, stabilized?).

    The run tracks the running max of ||x_n|| at every step; the probe
    compares the value reached by mid-run against the final one.
    Equality means the iterates never escaped after the first half,
    which is the cheap sanity signal for stability-without-projections.
    """
    half = traj.iterations // 2
    first = 0.0
    for k, n in enumerate(traj.ns):
        if n <= half:
            first = float(traj.max_norm[k])
    full = float(traj.max_norm_full)
    return first, full, first == full


def _run_worker(config: SimConfig) -> Trajectory:
    return run(config)


def run_many(configs: Sequence[SimConfig], max_workers: Optional[int] = None,
             parallel: bool = True) -> list[Trajectory]:
    """Run several configs, in worker processes when it pays off.

    Results keep the input order and are identical to serial execution
    (each run is deterministic given its own seed).
    """
    configs = list(configs)
    if not configs:
        return []
    if not parallel or len(configs) == 1 or (os.cpu_count() or 1) == 1:
        return [run(c) for c in configs]
    workers = min(max_workers or os.cpu_count() or 1, len(configs))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_worker, configs))
