"""Adversary-tolerant asynchronous federated mean estimation.

A coordinator keeps a running estimate x of an unobserved vector mu
while p nodes each report scalar observations with mean a_i . mu; up to
m of the nodes may lie arbitrarily.  The estimate moves by fixed-length
sign steps, so a liar's influence is bounded no matter what it reports,
and a combinatorial condition on the observation matrix (every
size-m coalition is outweighed, in L1 projection mass, by the rest)
decides exactly when the estimate still converges to mu.

The package provides the update law and its mean-field analysis
(dynamics), exact and sampled checkers for the tolerance condition
(robustness), omniscient attack policies (adversary), a deterministic
seeded simulator (engine), a TCP coordinator/client pair speaking a
JSON-line protocol (net), and a CLI (cli) gluing it together.
"""

from .model import (Distribution, ObservationMatrix, ProblemSpec,
                    ScheduleVerdict, State, StepSchedule, gamma, sample_x,
                    sample_y, sample_y_batch, validate_schedule)
from .robustness import (EtaEstimate, MatrixTooLargeError, RobustnessVerdict,
                         check_robust_d1, check_robust_exact,
                         check_robust_sampled, estimate_eta, margin_at)
from .dynamics import (HElement, IncrementDecomposition, constant_selection,
                       decompose, h_sample, integrate_di, lyapunov_dd,
                       repelling_selection, sign, step)
from .adversary import (Collude, Constant, Honest, Policy, RandomUniform,
                        Repel, RunView, respond)
from .engine import (SimConfig, Trajectory, boundedness_probe,
                     estimate_rate_constant, read_trajectory_csv,
                     record_points, run, run_many)
from .net import (ClientConfig, NetConfig, NetRunResult, Server, client_loop,
                  replay_log)

__version__ = "0.1.0"

__all__ = [
    "Distribution", "ObservationMatrix", "ProblemSpec", "ScheduleVerdict",
    "State", "StepSchedule", "gamma", "sample_x", "sample_y",
    "sample_y_batch", "validate_schedule",
    "EtaEstimate", "MatrixTooLargeError", "RobustnessVerdict",
    "check_robust_d1", "check_robust_exact", "check_robust_sampled",
    "estimate_eta", "margin_at",
    "HElement", "IncrementDecomposition", "constant_selection", "decompose",
    "h_sample", "integrate_di", "lyapunov_dd", "repelling_selection", "sign",
    "step",
    "Collude", "Constant", "Honest", "Policy", "RandomUniform", "Repel",
    "RunView", "respond",
    "SimConfig", "Trajectory", "boundedness_probe", "estimate_rate_constant",
    "read_trajectory_csv", "record_points", "run", "run_many",
    "ClientConfig", "NetConfig", "NetRunResult", "Server", "client_loop",
    "replay_log",
    "__version__",
]
