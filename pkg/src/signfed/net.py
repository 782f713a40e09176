"""Line-delimited JSON protocol: a coordinator serving live estimation rounds.

One server owns the state (x, y, n) and a pool of TCP clients answer
sample queries for their node.  The server draws an eligible node,
sends a query stamped with a fresh round number, and applies whatever
comes back in arrival order; queries outlive their usefulness after
`query_timeout` seconds, at which point the round is abandoned and a
late reply is logged and discarded.  Snapshots of x go out to every
client at a fixed stride, so policies that react to the estimate (e.g.
Repel) work from a stale-but-recent view, exactly like a real
deployment.

Wire records are one JSON object per line, all carrying {"v": 1}:

    {"v":1,"type":"hello","node":i}            client -> server, once
    {"v":1,"type":"query","round":r,"node":i}  server -> client
    {"v":1,"type":"sample","round":r,"node":i,"value":f}
    {"v":1,"type":"snapshot","round":r,"x":[...]}
    {"v":1,"type":"shutdown"}

Floats ride as JSON numbers; Python's shortest-repr serialization makes
the value -> text -> value trip bit-exact, which is what lets the
message log replay to the server's final state with zero tolerance.
"""

from __future__ import annotations

import asyncio
import json
import math
import os
import socket
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import dynamics
from .adversary import Policy, RunView, oracle_for
from .engine import (Recorder, Trajectory, record_points, stream,
                     STREAM_NODE, STREAM_POLICY, STREAM_SCHEDULER,
                     DEFAULT_MAX_RECORDS)
from .model import ObservationMatrix, ProblemSpec, State, StepSchedule

PROTOCOL_VERSION = 1


def _msg(**kw) -> bytes:
    kw["v"] = PROTOCOL_VERSION
    return json.dumps(kw).encode() + b"\n"


@dataclass(eq=False)
class NetConfig:
    """Parameters for one served run."""

    A: ObservationMatrix
    spec: ProblemSpec
    schedule: StepSchedule
    iterations: int
    seed: int
    x0: Optional[np.ndarray] = None
    y0: Optional[np.ndarray] = None
    snapshot_stride: int = 25
    query_timeout: float = 1.0
    pipeline_depth: Optional[int] = None
    max_records: int = DEFAULT_MAX_RECORDS
    log_path: Optional[str] = None

    def __post_init__(self):
        self.spec.validate_for(self.A)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.snapshot_stride < 1:
            raise ValueError("snapshot_stride must be >= 1")
        if self.query_timeout <= 0.0:
            raise ValueError("query_timeout must be positive")
        depth = self.pipeline_depth if self.pipeline_depth is not None else self.A.p
        if not 1 <= depth <= self.A.p:
            raise ValueError("pipeline_depth must be in [1, p]")
        self.pipeline_depth = depth
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


@dataclass(eq=False)
class NetRunResult:
    """What a completed served run hands back."""

    trajectory: Trajectory
    final_state: State
    applied: int
    timeouts: int
    late: int
    log_path: Optional[str]


class Server:
    """Coordinator for one served run.

    start() launches the event loop in a background thread and returns
    once the listening address is known; run() is start-and-wait.
    Progress requires clients: with no eligible node connected the
    server idles until one says hello or shutdown() is called.
    """

    def __init__(self, config: NetConfig, host: str = "127.0.0.1", port: int = 0):
        self._config = config
        self._host = host
        self._port = port
        self._thread: Optional[threading.Thread] = None
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._started = threading.Event()
        self._finished = threading.Event()
        self._result: Optional[NetRunResult] = None
        self._error: Optional[BaseException] = None
        self.address: Optional[tuple[str, int]] = None

        # run state, touched only on the loop thread
        self._state = State(config.x0.copy(), config.y0.copy(), 0)
        self._rng = stream(config.seed, STREAM_SCHEDULER)
        self._writers: dict[int, asyncio.StreamWriter] = {}
        self._snap_sent: dict[int, int] = {}
        self._busy: set[int] = set()
        self._outstanding: dict[int, int] = {}
        self._round = 0
        self._timeouts = 0
        self._late = 0
        self._done = False
        self._max_nsq = 0.0
        self._recorder = Recorder(config.A, config.spec, config.schedule,
                                  record_points(config.iterations, config.max_records))
        self._log_lines: list[str] = []
        self._log(kind="meta", p=config.A.p, d=config.A.d,
                  matrix=[row.tolist() for row in config.A.matrix],
                  alpha_exponent=config.schedule.alpha_exponent,
                  beta_exponent=config.schedule.beta_exponent,
                  offset=config.schedule.offset,
                  x0=config.x0.tolist(), y0=config.y0.tolist(),
                  iterations=config.iterations, seed=config.seed,
                  snapshot_stride=config.snapshot_stride)

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "Server":
        if self._thread is not None:
            return self
        self._thread = threading.Thread(target=self._thread_main, daemon=True)
        self._thread.start()
        self._started.wait()
        if self._error is not None:
            raise RuntimeError("server failed to start") from self._error
        return self

    def run(self, timeout: Optional[float] = None) -> NetRunResult:
        self.start()
        return self.wait(timeout)

    def wait(self, timeout: Optional[float] = None) -> NetRunResult:
        if not self._finished.wait(timeout):
            raise TimeoutError("served run did not finish in time")
        if self._error is not None:
            raise RuntimeError("served run failed") from self._error
        assert self._result is not None
        return self._result

    def shutdown(self) -> None:
        """Force the run to wrap up with whatever has been applied."""
        if self._loop is not None and not self._finished.is_set():
            try:
                self._loop.call_soon_threadsafe(self._finish)
            except RuntimeError:
                pass

    def _thread_main(self):
        try:
            asyncio.run(self._amain())
        except BaseException as exc:  # surface on the caller's side
            self._error = exc
        finally:
            self._started.set()
            self._finished.set()

    async def _amain(self):
        self._loop = asyncio.get_running_loop()
        self._completion = asyncio.Event()
        server = await asyncio.start_server(self._handle_conn, self._host, self._port)
        self.address = server.sockets[0].getsockname()[:2]
        self._started.set()
        try:
            await self._completion.wait()
        finally:
            server.close()
            await server.wait_closed()

    # -- logging -----------------------------------------------------------

    def _log(self, **kw):
        self._log_lines.append(json.dumps(kw))

    def _write_log(self):
        if self._config.log_path is None:
            return
        path = os.fspath(self._config.log_path)
        tmp = path + ".tmp"
        with open(tmp, "w") as f:
            f.write("\n".join(self._log_lines) + "\n")
        os.replace(tmp, path)

    # -- protocol ----------------------------------------------------------

    async def _handle_conn(self, reader: asyncio.StreamReader,
                           writer: asyncio.StreamWriter):
        node = None
        try:
            line = await reader.readline()
            if not line:
                return
            msg = json.loads(line)
            if msg.get("type") != "hello" or not isinstance(msg.get("node"), int):
                return
            node = msg["node"]
            if not 0 <= node < self._config.A.p or node in self._writers:
                return
            self._writers[node] = writer
            self._snap_sent[node] = self._state.n
            writer.write(_msg(type="snapshot", round=self._state.n,
                              x=self._state.x.tolist()))
            await writer.drain()
            self._refill()
            while not self._done:
                line = await reader.readline()
                if not line:
                    break
                msg = json.loads(line)
                if msg.get("type") == "sample":
                    self._on_sample(msg)
        except (ConnectionError, json.JSONDecodeError, UnicodeDecodeError):
            pass
        finally:
            if node is not None and self._writers.get(node) is writer:
                del self._writers[node]
                self._snap_sent.pop(node, None)
                stale = [r for r, i in self._outstanding.items() if i == node]
                for r in stale:
                    del self._outstanding[r]
                    self._busy.discard(node)
                    self._log(kind="dropped", round=r, node=node)
                self._refill()
            try:
                writer.close()
            except Exception:
                pass

    def _refill(self):
        if self._done:
            return
        cfg = self._config
        while (len(self._outstanding) < cfg.pipeline_depth
               and self._state.n + len(self._outstanding) < cfg.iterations):
            eligible = sorted(i for i in self._writers if i not in self._busy)
            if not eligible:
                return
            node = eligible[int(self._rng.integers(0, len(eligible)))]
            rnd = self._round
            self._round += 1
            self._outstanding[rnd] = node
            self._busy.add(node)
            w = self._writers[node]
            w.write(_msg(type="query", round=rnd, node=node))
            self._loop.call_later(cfg.query_timeout, self._expire, rnd)

    def _expire(self, rnd: int):
        if self._done or rnd not in self._outstanding:
            return
        node = self._outstanding.pop(rnd)
        self._busy.discard(node)
        self._timeouts += 1
        self._log(kind="timeout", round=rnd, node=node)
        self._refill()

    def _on_sample(self, msg):
        if self._done:
            return
        rnd, node, value = msg.get("round"), msg.get("node"), msg.get("value")
        if not (isinstance(rnd, int) and isinstance(node, int)
                and isinstance(value, (int, float)) and math.isfinite(value)):
            return
        if self._outstanding.get(rnd) != node:
            self._late += 1
            self._log(kind="late", round=rnd, node=node)
            return
        del self._outstanding[rnd]
        self._busy.discard(node)

        st = self._state
        nsq = float(st.x @ st.x)
        if nsq > self._max_nsq:
            self._max_nsq = nsq
        if st.n == self._recorder.next_point:
            self._recorder.record(st.n, st.x, st.y, self._max_nsq)
        self._state = dynamics.step(st, node, float(value), self._config.A,
                                    self._config.schedule)
        self._log(kind="applied", n=st.n, round=rnd, node=node, value=float(value))

        if self._state.n % self._config.snapshot_stride == 0:
            self._broadcast_snapshot()
        if self._state.n >= self._config.iterations:
            self._finish()
        else:
            self._refill()

    def _broadcast_snapshot(self):
        rnd = self._state.n
        payload = _msg(type="snapshot", round=rnd, x=self._state.x.tolist())
        for node, w in list(self._writers.items()):
            # snapshot rounds are strictly increasing per connection
            if self._snap_sent.get(node, -1) >= rnd:
                continue
            try:
                w.write(payload)
                self._snap_sent[node] = rnd
            except Exception:
                pass

    def _finish(self):
        if self._done:
            return
        self._done = True
        st = self._state
        nsq = float(st.x @ st.x)
        if nsq > self._max_nsq:
            self._max_nsq = nsq
        self._log(kind="final", n=st.n, x=st.x.tolist(), y=st.y.tolist())
        self._write_log()
        traj = self._recorder.build(st, self._config.seed, self._config.iterations,
                                    max_norm_full=math.sqrt(self._max_nsq))
        self._result = NetRunResult(
            trajectory=traj, final_state=st, applied=st.n,
            timeouts=self._timeouts, late=self._late,
            log_path=self._config.log_path)
        payload = _msg(type="shutdown")
        for w in self._writers.values():
            try:
                w.write(payload)
            except Exception:
                pass
        self._finished.set()
        self._completion.set()


@dataclass
class ClientConfig:
    """Everything a client process needs to answer for its node."""

    A: ObservationMatrix
    spec: ProblemSpec
    seed: int
    delay: float = 0.0
    connect_timeout: float = 10.0
    reconnect_attempts: int = 5


@dataclass
class ClientStats:
    node: int
    answered: int
    snapshots: int


def client_loop(node: int, policy: Policy, connect: tuple[str, int],
                config: ClientConfig,
                stop: Optional[Callable[[], bool]] = None) -> ClientStats:
    """Serve one node until the coordinator says shutdown.

    Blocking; run it in a thread or its own process.  `delay` sleeps
    before answering each query, which is how the slow-node scenarios
    are staged.  The policy sees the latest snapshot as x; the tracker
    vector y is not on the wire, so the view zero-fills it.

    A dropped connection or a malformed line from the coordinator is
    handled by closing the socket and reconnecting with exponential
    backoff; after `reconnect_attempts` consecutive failures the loop
    gives up and returns whatever it has counted so far.
    """
    if not 0 <= node < config.A.p:
        raise ValueError("node out of range")
    spec, A = config.spec, config.A
    oracle = oracle_for(spec, A, node, stream(config.seed, STREAM_NODE, node))
    policy.bind_rng(stream(config.seed, STREAM_POLICY, node))
    x0 = [0.0] * A.d
    view = RunView(
        A=A, mu=[float(v) for v in spec.mu],
        expected=[float(v) for v in spec.expected_y(A)],
        x0=x0, x=list(x0), y=[0.0] * A.p, n=0, history=None)
    answered = snapshots = 0
    first_snapshot = True
    failures = 0
    backoff = 0.05
    done = False
    while not done and failures <= config.reconnect_attempts:
        if stop is not None and stop():
            break
        if failures:
            time.sleep(backoff)
            backoff = min(backoff * 2.0, 1.0)
        try:
            with socket.create_connection(connect,
                                          timeout=config.connect_timeout) as sock:
                sock.settimeout(None)
                f = sock.makefile("rwb")
                f.write(_msg(type="hello", node=node))
                f.flush()
                while True:
                    if stop is not None and stop():
                        done = True
                        break
                    line = f.readline()
                    if not line:
                        break  # dropped; reconnect
                    try:
                        msg = json.loads(line)
                    except json.JSONDecodeError:
                        break  # garbled stream; drop it and reconnect
                    t = msg.get("type")
                    if t == "snapshot":
                        xs = [float(v) for v in msg["x"]]
                        view.x[:] = xs
                        if first_snapshot:
                            view.x0[:] = xs
                            first_snapshot = False
                        snapshots += 1
                        failures = 0
                        backoff = 0.05
                    elif t == "query":
                        if config.delay > 0.0:
                            time.sleep(config.delay)
                        view.n = int(msg["round"])
                        value = float(policy.respond(node, view, oracle))
                        f.write(_msg(type="sample", round=int(msg["round"]),
                                     node=node, value=value))
                        f.flush()
                        answered += 1
                    elif t == "shutdown":
                        done = True
                        break
        except OSError:
            pass
        if not done:
            failures += 1
    return ClientStats(node=node, answered=answered, snapshots=snapshots)


@dataclass(eq=False)
class ReplayResult:
    final_state: State
    applied: int
    matches_log: bool


def replay_log(log_path) -> ReplayResult:
    """Rebuild the run from its message log and check the final state.

    The log's meta row pins the matrix, schedule, and initial state; the
    applied rows are fed through the same step function the live server
    used, in the same order, so the reconstructed final state must equal
    the logged one bit for bit.  matches_log reports that comparison.
    """
    meta = None
    applied_rows = []
    final_row = None
    with open(log_path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            kind = row.get("kind")
            if kind == "meta":
                meta = row
            elif kind == "applied":
                applied_rows.append(row)
            elif kind == "final":
                final_row = row
    if meta is None:
        raise ValueError("log has no meta row")
    A = ObservationMatrix(np.array(meta["matrix"], dtype=np.float64),
                          require_tall=meta["p"] > meta["d"])
    schedule = StepSchedule(meta["alpha_exponent"], meta["beta_exponent"],
                            offset=meta["offset"])
    state = State(np.array(meta["x0"], dtype=np.float64),
                  np.array(meta["y0"], dtype=np.float64), 0)
    for row in applied_rows:
        if row["n"] != state.n:
            raise ValueError(f"applied rows out of order at n={row['n']}")
        state = dynamics.step(state, row["node"], row["value"], A, schedule)
    matches = final_row is not None and (
        state.n == final_row["n"]
        and np.array_equal(state.x, np.array(final_row["x"], dtype=np.float64))
        and np.array_equal(state.y, np.array(final_row["y"], dtype=np.float64)))
    return ReplayResult(final_state=state, applied=len(applied_rows),
                        matches_log=matches)
