"""Command line front end: config files, builtins, and the six commands.

    signfed check     robustness verdict for a matrix (exit 0 robust, 1 not)
    signfed simulate  one seeded run, trajectory CSV + manifest
    signfed sweep     grid of runs over seeds/exponents, CSVs + manifest
    signfed serve     coordinator for a live TCP run
    signfed client    one node answering a coordinator
    signfed di        explicit-Euler path of the mean-field inclusion

Configs are YAML with up to five sections (matrix, problem, schedule,
run, output); unknown keys anywhere are errors.  Parsing resolves every
default, so parse -> emit -> parse is the identity on the resolved
form.  Exit codes: 0 success (robust for `check`), 1 non-robust, 2
usage or config problems.  The output directory resolves as
--out flag > SIGNFED_OUT env var > output.dir in the config.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from typing import Any, Optional

import numpy as np
import yaml

from .adversary import (Collude, Constant, Honest, Policy, RandomUniform,
                        Repel)
from .dynamics import constant_selection, integrate_di, repelling_selection
from .engine import (CSV_HEADER, SimConfig, Trajectory, boundedness_probe,
                     estimate_rate_constant, run, run_many)
from .model import ObservationMatrix, ProblemSpec, StepSchedule
from .net import ClientConfig, NetConfig, Server, client_loop
from .robustness import (MAX_EXACT_P, MatrixTooLargeError, check_robust_exact,
                         check_robust_sampled, estimate_eta)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.yaml"

# Five nodes reading the same scalar: the geometric-median special case.
# Tolerates any 2 compromised nodes (margin 1), never 3 (margin -1).
ONES5_ROWS = [[1.0]] * 5

# Five nodes in the plane: three spread unit rows plus a heavy
# near-vertical pair.  Any single compromised node is tolerated (margin
# 0.776); the pair {3, 4} jointly outweighs everyone else (margin -1).
FIG1_GENERIC_ROWS = [
    [1.00, 0.00],
    [0.77, 0.64],
    [-0.77, 0.64],
    [0.12, 1.14],
    [-0.12, 1.14],
]

BUILTINS: dict[str, dict] = {
    "ones5": {
        "matrix": {"rows": ONES5_ROWS},
        "problem": {
            "mu": [1.0],
            "covariance": [[1.0]],
            "adversary_set": [3, 4],
            "m_bound": 2,
        },
        "run": {
            "seeds": [7],
            "policies": {3: {"type": "repel"}, 4: {"type": "repel"}},
        },
        "output": {"prefix": "ones5"},
    },
    "fig1_generic": {
        "matrix": {"rows": FIG1_GENERIC_ROWS},
        "problem": {
            "mu": [0.6, -0.4],
            "covariance": [[1.0, 0.0], [0.0, 1.0]],
            "adversary_set": [3],
            "m_bound": 1,
        },
        "run": {
            "seeds": [11],
            "policies": {3: {"type": "repel"}},
        },
        "output": {"prefix": "fig1_generic"},
    },
}

# config-file alias: matrix.builtin accepts the short name too
_MATRIX_ALIASES = {"ones": "ones5"}

_SECTIONS = ("matrix", "problem", "schedule", "run", "output")


class ConfigError(ValueError):
    """Anything wrong with a config file or its overrides."""


def _expect_keys(d: dict, allowed, where: str):
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(map(str, unknown))}")


def _float_list(v, name: str) -> list[float]:
    try:
        out = [float(x) for x in v]
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a list of numbers")
    if not all(math.isfinite(x) for x in out):
        raise ConfigError(f"{name} must be finite")
    return out


def _policy_entry(node: int, raw: Any) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"run.policies[{node}] must be a mapping")
    if "type" not in raw:
        raise ConfigError(f"run.policies[{node}] needs a 'type'")
    t = raw["type"]
    if t == "honest":
        _expect_keys(raw, {"type"}, f"run.policies[{node}]")
        return {"type": "honest"}
    if t == "constant":
        _expect_keys(raw, {"type", "value"}, f"run.policies[{node}]")
        if "value" not in raw:
            raise ConfigError(f"run.policies[{node}] (constant) needs 'value'")
        return {"type": "constant", "value": float(raw["value"])}
    if t == "random_uniform":
        _expect_keys(raw, {"type", "low", "high"}, f"run.policies[{node}]")
        if "low" not in raw or "high" not in raw:
            raise ConfigError(f"run.policies[{node}] (random_uniform) needs 'low' and 'high'")
        return {"type": "random_uniform", "low": float(raw["low"]),
                "high": float(raw["high"])}
    if t == "repel":
        _expect_keys(raw, {"type", "magnitude"}, f"run.policies[{node}]")
        mag = raw.get("magnitude")
        return {"type": "repel", "magnitude": None if mag is None else float(mag)}
    if t == "collude":
        _expect_keys(raw, {"type", "x_target", "jitter"}, f"run.policies[{node}]")
        if "x_target" not in raw:
            raise ConfigError(f"run.policies[{node}] (collude) needs 'x_target'")
        return {"type": "collude",
                "x_target": _float_list(raw["x_target"], f"run.policies[{node}].x_target"),
                "jitter": float(raw.get("jitter", 0.0))}
    raise ConfigError(f"run.policies[{node}]: unknown policy type {t!r}")


def policy_from_dict(d: dict) -> Policy:
    t = d["type"]
    if t == "honest":
        return Honest()
    if t == "constant":
        return Constant(d["value"])
    if t == "random_uniform":
        return RandomUniform(d["low"], d["high"])
    if t == "repel":
        return Repel(d.get("magnitude"))
    if t == "collude":
        return Collude(d["x_target"], d.get("jitter", 0.0))
    raise ConfigError(f"unknown policy type {t!r}")


def resolve_config(raw: dict) -> dict:
    """Validate a raw config mapping and fill every default.

    Returns the canonical fully-resolved dict; resolving is idempotent,
    so emit_config output parses back to an identical dict.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    _expect_keys(raw, _SECTIONS, "config")
    if "matrix" not in raw:
        raise ConfigError("config needs a 'matrix' section")

    msec = raw["matrix"]
    if not isinstance(msec, dict):
        raise ConfigError("'matrix' must be a mapping")
    _expect_keys(msec, {"rows", "builtin"}, "matrix")
    if ("rows" in msec) == ("builtin" in msec):
        raise ConfigError("matrix needs exactly one of 'rows' or 'builtin'")
    if "builtin" in msec:
        name = _MATRIX_ALIASES.get(msec["builtin"], msec["builtin"])
        if name not in BUILTINS:
            raise ConfigError(f"unknown builtin matrix {msec['builtin']!r}; "
                              f"choices: {', '.join(sorted(BUILTINS))}")
        rows = [list(r) for r in BUILTINS[name]["matrix"]["rows"]]
    else:
        rows = msec["rows"]
    try:
        mat = np.array(rows, dtype=np.float64)
    except (TypeError, ValueError):
        raise ConfigError("matrix.rows must be a rectangular list of number lists")
    if mat.ndim != 2 or mat.size == 0:
        raise ConfigError("matrix.rows must be a nonempty 2-d array")
    p, d = mat.shape
    rows_canon = [[float(v) for v in row] for row in mat]

    psec = raw.get("problem", {}) or {}
    if not isinstance(psec, dict):
        raise ConfigError("'problem' must be a mapping")
    _expect_keys(psec, {"mu", "covariance", "adversary_set", "adversary_count",
                        "m_bound", "perturbation_bound"}, "problem")
    if "mu" in psec:
        mu = _float_list(psec["mu"], "problem.mu")
        if len(mu) != d:
            raise ConfigError(f"problem.mu must have length {d}")
    else:
        mu = [1.0 / math.sqrt(d)] * d
    cov_raw = psec.get("covariance", 1.0)
    if isinstance(cov_raw, (int, float)):
        if cov_raw < 0:
            raise ConfigError("scalar covariance must be >= 0")
        cov = [[float(cov_raw) if i == j else 0.0 for j in range(d)] for i in range(d)]
    else:
        cov = [_float_list(r, "problem.covariance row") for r in cov_raw]
        if len(cov) != d or any(len(r) != d for r in cov):
            raise ConfigError(f"problem.covariance must be {d}x{d}")
    if "adversary_set" in psec and "adversary_count" in psec:
        raise ConfigError("problem takes adversary_set or adversary_count, not both")
    if "adversary_count" in psec:
        # count k means the k highest-indexed nodes are compromised
        count = int(psec["adversary_count"])
        if not 0 <= count < p:
            raise ConfigError("problem.adversary_count must be in [0, p)")
        adv = list(range(p - count, p))
    else:
        adv = psec.get("adversary_set", [])
        try:
            adv = sorted({int(i) for i in adv})
        except (TypeError, ValueError):
            raise ConfigError("problem.adversary_set must be a list of node indices")
        if any(not 0 <= i < p for i in adv):
            raise ConfigError("problem.adversary_set indices out of range")
    m_bound = int(psec.get("m_bound", len(adv)))
    if m_bound < len(adv):
        raise ConfigError("problem.m_bound cannot be smaller than |adversary_set|")
    pert = float(psec.get("perturbation_bound", 0.0))
    if pert < 0 or not math.isfinite(pert):
        raise ConfigError("problem.perturbation_bound must be finite and >= 0")

    ssec = raw.get("schedule", {}) or {}
    if not isinstance(ssec, dict):
        raise ConfigError("'schedule' must be a mapping")
    _expect_keys(ssec, {"alpha_exponent", "beta_exponent", "offset"}, "schedule")
    alpha = float(ssec.get("alpha_exponent", 0.8))
    beta = float(ssec.get("beta_exponent", 0.6))
    offset = int(ssec.get("offset", 1))

    rsec = raw.get("run", {}) or {}
    if not isinstance(rsec, dict):
        raise ConfigError("'run' must be a mapping")
    _expect_keys(rsec, {"iterations", "seed", "seeds", "x0", "y0", "policies",
                        "snapshot_stride", "query_timeout", "max_records"}, "run")
    iterations = int(rsec.get("iterations", 200_000))
    if "seed" in rsec and "seeds" in rsec:
        raise ConfigError("run takes seed or seeds, not both")
    if "seeds" in rsec:
        try:
            seeds = [int(s) for s in rsec["seeds"]]
        except (TypeError, ValueError):
            raise ConfigError("run.seeds must be a list of integers")
        if not seeds:
            raise ConfigError("run.seeds must not be empty")
    else:
        seeds = [int(rsec.get("seed", 0))]
    x0 = _float_list(rsec["x0"], "run.x0") if rsec.get("x0") is not None else [0.0] * d
    y0 = _float_list(rsec["y0"], "run.y0") if rsec.get("y0") is not None else [0.0] * p
    if len(x0) != d:
        raise ConfigError(f"run.x0 must have length {d}")
    if len(y0) != p:
        raise ConfigError(f"run.y0 must have length {p}")
    pol_raw = rsec.get("policies", {}) or {}
    if not isinstance(pol_raw, dict):
        raise ConfigError("run.policies must map node index -> policy")
    policies: dict[int, dict] = {}
    for key, entry in pol_raw.items():
        try:
            node = int(key)
        except (TypeError, ValueError):
            raise ConfigError(f"run.policies key {key!r} is not a node index")
        if not 0 <= node < p:
            raise ConfigError(f"run.policies[{node}] out of range")
        resolved = _policy_entry(node, entry)
        if node not in adv:
            if resolved["type"] != "honest":
                raise ConfigError(
                    f"node {node} is not in adversary_set; only an honest "
                    f"policy is allowed there")
            continue  # honest is the forced default; keep canonical form lean
        policies[node] = resolved
    for node in adv:
        policies.setdefault(node, {"type": "repel", "magnitude": None})
    snapshot_stride = int(rsec.get("snapshot_stride", 25))
    query_timeout = float(rsec.get("query_timeout", 1.0))
    max_records = int(rsec.get("max_records", 10_000))

    osec = raw.get("output", {}) or {}
    if not isinstance(osec, dict):
        raise ConfigError("'output' must be a mapping")
    _expect_keys(osec, {"dir", "prefix"}, "output")
    out_dir = osec.get("dir", "out")
    prefix = osec.get("prefix", "run")

    return {
        "matrix": {"rows": rows_canon},
        "problem": {"mu": mu, "covariance": cov, "adversary_set": adv,
                    "m_bound": m_bound, "perturbation_bound": pert},
        "schedule": {"alpha_exponent": alpha, "beta_exponent": beta,
                     "offset": offset},
        "run": {"iterations": iterations, "seeds": seeds, "x0": x0, "y0": y0,
                "policies": {k: policies[k] for k in sorted(policies)},
                "snapshot_stride": snapshot_stride,
                "query_timeout": query_timeout, "max_records": max_records},
        "output": {"dir": str(out_dir), "prefix": str(prefix)},
    }


def load_config(path) -> dict:
    """Read + resolve a YAML config file."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}")
    if raw is None:
        raise ConfigError(f"config {path} is empty")
    return resolve_config(raw)


def builtin_config(name: str) -> dict:
    name = _MATRIX_ALIASES.get(name, name)
    if name not in BUILTINS:
        raise ConfigError(f"unknown builtin {name!r}; choices: "
                          f"{', '.join(sorted(BUILTINS))}")
    return resolve_config(BUILTINS[name])


def emit_config(config: dict) -> str:
    """Serialize a resolved config back to YAML (parse of this is identity)."""
    return yaml.safe_dump(config, sort_keys=False)


def build_matrix(config: dict) -> ObservationMatrix:
    rows = np.array(config["matrix"]["rows"], dtype=np.float64)
    return ObservationMatrix(rows, require_tall=rows.shape[0] > rows.shape[1])


def build_problem(config: dict) -> ProblemSpec:
    prob = config["problem"]
    return ProblemSpec(
        mu=np.array(prob["mu"], dtype=np.float64),
        covariance=np.array(prob["covariance"], dtype=np.float64),
        adversary_set=frozenset(prob["adversary_set"]),
        m_bound=prob["m_bound"],
        perturbation_bound=prob["perturbation_bound"],
    )


def build_schedule(config: dict) -> StepSchedule:
    s = config["schedule"]
    return StepSchedule(s["alpha_exponent"], s["beta_exponent"], offset=s["offset"])


def build_policies(config: dict, p: int) -> tuple[Policy, ...]:
    entries = config["run"]["policies"]
    return tuple(
        policy_from_dict(entries[i]) if i in entries else Honest()
        for i in range(p))


def build_sim_config(config: dict, seed: Optional[int] = None, **overrides) -> SimConfig:
    """SimConfig for one seed (default: the first of run.seeds)."""
    A = build_matrix(config)
    run_cfg = config["run"]
    kw = dict(
        A=A,
        spec=build_problem(config),
        schedule=build_schedule(config),
        policies=build_policies(config, A.p),
        iterations=run_cfg["iterations"],
        seed=run_cfg["seeds"][0] if seed is None else int(seed),
        x0=np.array(run_cfg["x0"], dtype=np.float64),
        y0=np.array(run_cfg["y0"], dtype=np.float64),
        max_records=run_cfg["max_records"],
    )
    kw.update(overrides)
    return SimConfig(**kw)


def build_net_config(config: dict, log_path=None) -> NetConfig:
    run_cfg = config["run"]
    return NetConfig(
        A=build_matrix(config),
        spec=build_problem(config),
        schedule=build_schedule(config),
        iterations=run_cfg["iterations"],
        seed=run_cfg["seeds"][0],
        x0=np.array(run_cfg["x0"], dtype=np.float64),
        y0=np.array(run_cfg["y0"], dtype=np.float64),
        snapshot_stride=run_cfg["snapshot_stride"],
        query_timeout=run_cfg["query_timeout"],
        max_records=run_cfg["max_records"],
        log_path=log_path,
    )


def parse_policy_spec(spec_str: str) -> Policy:
    """Parse the client-side policy shorthand.

    honest | constant:V | random_uniform:LO:HI | repel[:MAG] |
    collude:X1,X2,...[:JITTER]
    """
    parts = spec_str.split(":")
    name = parts[0]
    try:
        if name == "honest" and len(parts) == 1:
            return Honest()
        if name == "constant" and len(parts) == 2:
            return Constant(float(parts[1]))
        if name == "random_uniform" and len(parts) == 3:
            return RandomUniform(float(parts[1]), float(parts[2]))
        if name == "repel" and len(parts) in (1, 2):
            return Repel(float(parts[1]) if len(parts) == 2 else None)
        if name == "collude" and len(parts) in (2, 3):
            target = [float(v) for v in parts[1].split(",")]
            jitter = float(parts[2]) if len(parts) == 3 else 0.0
            return Collude(target, jitter)
    except ValueError:
        pass
    raise ConfigError(f"cannot parse policy spec {spec_str!r}")


# --- manifest -------------------------------------------------------------


def _run_entry(path: str, variant: dict, traj: Trajectory, vary: dict) -> dict:
    """Manifest row for one run; `variant` is that run's resolved config."""
    try:
        rate = estimate_rate_constant(traj, n_min=min(1000, max(traj.ns[-1], 1)))
    except ValueError:
        rate = None
    adv = list(variant["problem"]["adversary_set"])
    label_parts = [f"{k}={vary[k]}" for k in sorted(vary) if k != "seed"]
    label_parts.append(f"seed={traj.seed}")
    return {
        "path": path,
        "label": ",".join(label_parts),
        "vary": {k: vary[k] for k in sorted(vary)},
        "seed": int(traj.seed),
        "iterations": int(traj.iterations),
        "m": len(adv),
        "adversary_set": adv,
        "final_err": float(traj.final_err),
        "rate_constant": None if rate is None else float(rate),
        "max_norm_full": float(traj.max_norm_full),
    }


def write_manifest(out_dir: str, kind: str, config: dict, entries: list[dict]) -> str:
    A = build_matrix(config)
    adv = set(config["problem"]["adversary_set"])
    eta = None
    if adv and A.p <= MAX_EXACT_P:
        eta = float(estimate_eta(A, adv).eta)
    doc = {
        "version": MANIFEST_VERSION,
        "kind": kind,
        "csv_header": CSV_HEADER,
        "matrix": {"rows": config["matrix"]["rows"]},
        "problem": dict(config["problem"]),
        "schedule": dict(config["schedule"]),
        "eta": eta,
        "runs": entries,
    }
    path = os.path.join(out_dir, MANIFEST_NAME)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
    os.replace(tmp, path)
    return path


# --- commands ---------------------------------------------------------------


def _set_adversaries(config: dict, nodes: list[int]) -> None:
    config["problem"]["adversary_set"] = sorted(nodes)
    config["problem"]["m_bound"] = len(nodes)
    config["run"]["policies"] = {i: {"type": "repel", "magnitude": None}
                                 for i in nodes}


def _load_from_args(args) -> dict:
    if getattr(args, "config", None):
        config = load_config(args.config)
    else:
        config = builtin_config(args.builtin)
    # flag overrides, applied to the resolved dict then re-resolved
    if getattr(args, "iterations", None) is not None:
        config["run"]["iterations"] = args.iterations
    if getattr(args, "seed", None) is not None:
        config["run"]["seeds"] = [args.seed]
    if getattr(args, "seeds", None) is not None:
        try:
            config["run"]["seeds"] = [int(v) for v in args.seeds.split(",") if v]
        except ValueError:
            raise ConfigError(f"--seeds must be comma-separated integers, "
                              f"got {args.seeds!r}")
    if getattr(args, "alpha", None) is not None:
        config["schedule"]["alpha_exponent"] = args.alpha
    if getattr(args, "beta", None) is not None:
        config["schedule"]["beta_exponent"] = args.beta
    if getattr(args, "adversary", None) is not None:
        txt = args.adversary.strip()
        try:
            nodes = sorted({int(v) for v in txt.split(",")} if txt else set())
        except ValueError:
            raise ConfigError(f"--adversary must be comma-separated node "
                              f"indices, got {args.adversary!r}")
        _set_adversaries(config, nodes)
    out_flag = getattr(args, "out", None)
    env_out = os.environ.get("SIGNFED_OUT")
    if out_flag is not None:
        config["output"]["dir"] = out_flag
    elif env_out:
        config["output"]["dir"] = env_out
    if getattr(args, "prefix", None) is not None:
        config["output"]["prefix"] = args.prefix
    return resolve_config(config)


def cmd_check(args) -> int:
    config = _load_from_args(args)
    A = build_matrix(config)
    m = args.m if args.m is not None else config["problem"]["m_bound"]
    if m >= A.p:
        raise ConfigError(f"m must be < p = {A.p}")
    if args.sampled:
        rng = np.random.default_rng(config["run"]["seeds"][0])
        verdict = check_robust_sampled(A, m, trials=args.trials, rng=rng)
        mode = "sampled"
    else:
        try:
            verdict = check_robust_exact(A, m)
        except MatrixTooLargeError as exc:
            raise ConfigError(str(exc))
        mode = "exact"
    adv = set(config["problem"]["adversary_set"])
    eta = None
    if adv and A.p <= MAX_EXACT_P:
        eta = estimate_eta(A, adv)
    if args.json:
        out = {
            "mode": mode, "m": m, "robust": bool(verdict.robust),
            "margin": float(verdict.margin),
            "witness_x": [float(v) for v in verdict.witness[0]],
            "witness_set": sorted(int(i) for i in verdict.witness[1]),
        }
        if eta is not None:
            out["eta"] = float(eta.eta)
            out["eta_margin"] = float(eta.margin)
        print(json.dumps(out))
    else:
        print(f"robust (m={m}, {mode}): {'yes' if verdict.robust else 'no'}")
        print(f"margin: {verdict.margin:.6g}")
        wx = ", ".join(f"{v:.6g}" for v in verdict.witness[0])
        print(f"tight direction: [{wx}]  worst set: {sorted(verdict.witness[1])}")
        if eta is not None:
            print(f"eta({sorted(adv)}): {eta.eta:.6g}  (margin {eta.margin:.6g})")
    return 0 if verdict.robust else 1


def _summarize(traj: Trajectory) -> str:
    lines = [f"final err: {traj.final_err:.6g}"]
    try:
        lam = estimate_rate_constant(traj, n_min=min(1000, max(traj.ns[-1], 1)))
        lines.append(f"rate constant (sup ratio): {lam:.6g}")
    except ValueError:
        lines.append("rate constant: n/a (gamma not positive on tail)")
    first, full, stable = boundedness_probe(traj)
    lines.append(f"max |x|: first half {first:.6g}, full {full:.6g}"
                 f" ({'stable' if stable else 'grew in second half'})")
    return "\n".join(lines)


def cmd_simulate(args) -> int:
    config = _load_from_args(args)
    seeds = config["run"]["seeds"]
    sims = [build_sim_config(config, seed=s) for s in seeds]
    trajs = run_many(sims, parallel=len(sims) > 1)
    out_dir = config["output"]["dir"]
    prefix = config["output"]["prefix"]
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for traj in trajs:
        csv_name = f"{prefix}_seed{traj.seed}.csv"
        traj.write_csv(os.path.join(out_dir, csv_name))
        entries.append(_run_entry(csv_name, config, traj, vary={"seed": traj.seed}))
    manifest = write_manifest(out_dir, "simulate", config, entries)
    print(f"wrote {len(entries)} run(s) + {MANIFEST_NAME} to {out_dir}")
    if len(trajs) == 1:
        print(_summarize(trajs[0]))
    else:
        errs = sorted(t.final_err for t in trajs)
        med = errs[len(errs) // 2]
        print(f"final err: median {med:.6g}, "
              f"min {errs[0]:.6g}, max {errs[-1]:.6g} over {len(errs)} seeds")
    _ = manifest
    return 0


# --vary axes: m rewrites the adversary set (the m highest-indexed nodes,
# repel policies), the others overwrite one scalar config field.
_VARY_KEYS = {
    "m": ("problem", "adversary_count", int),
    "iterations": ("run", "iterations", int),
    "alpha": ("schedule", "alpha_exponent", float),
    "beta": ("schedule", "beta_exponent", float),
}


def _parse_vary(tokens: list[str]) -> list[tuple[str, list]]:
    axes = []
    for tok in tokens:
        if "=" not in tok:
            raise ConfigError(f"--vary expects KEY=V1,V2,... got {tok!r}")
        key, _, vals = tok.partition("=")
        key = key.strip()
        if key not in _VARY_KEYS:
            raise ConfigError(f"--vary key must be one of "
                              f"{', '.join(sorted(_VARY_KEYS))}; got {key!r}")
        conv = _VARY_KEYS[key][2]
        try:
            values = [conv(v) for v in vals.split(",") if v != ""]
        except ValueError:
            raise ConfigError(f"--vary {key}: cannot parse values {vals!r}")
        if not values:
            raise ConfigError(f"--vary {key}: no values given")
        axes.append((key, values))
    return axes


def _apply_combo(config: dict, combo: dict) -> dict:
    variant = json.loads(json.dumps(config))  # deep copy of plain data
    for key, value in combo.items():
        if key == "m":
            p = len(variant["matrix"]["rows"])
            if not 0 <= value < p:
                raise ConfigError(f"--vary m: {value} out of [0, {p})")
            _set_adversaries(variant, list(range(p - value, p)))
        elif key == "seed":
            variant["run"]["seeds"] = [value]
        else:
            section, field, _ = _VARY_KEYS[key]
            variant[section][field] = value
    return resolve_config(variant)


def run_sweep(config: dict, axes: list[tuple[str, list]],
              parallel: bool = True) -> tuple[str, list[dict], list]:
    """Run the cartesian grid (vary axes x run.seeds); write CSVs + manifest.

    Returns (output dir, manifest run entries, trajectories).  Each combo
    runs once per seed in run.seeds; filenames carry the combo tag and
    the seed.
    """
    combos: list[dict] = [{}]
    for key, values in axes:
        combos = [dict(c, **{key: v}) for c in combos for v in values]
    combos = [dict(c, seed=s) for c in combos for s in config["run"]["seeds"]]
    variants = [_apply_combo(config, combo) for combo in combos]
    sims = [build_sim_config(v) for v in variants]
    trajs = run_many(sims, parallel=parallel)
    out_dir = config["output"]["dir"]
    prefix = config["output"]["prefix"]
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for k, (combo, variant, traj) in enumerate(zip(combos, variants, trajs)):
        tag = "_".join(f"{key}{combo[key]}" for key in sorted(combo))
        csv_name = f"{prefix}_{k:03d}_{tag}.csv"
        traj.write_csv(os.path.join(out_dir, csv_name))
        entries.append(_run_entry(csv_name, variant, traj, vary=combo))
    write_manifest(out_dir, "sweep", config, entries)
    return out_dir, entries, trajs


def cmd_sweep(args) -> int:
    config = _load_from_args(args)
    if args.vary is not None and not args.vary:
        raise ConfigError("--vary given without arguments: nothing to sweep")
    axes = _parse_vary(args.vary) if args.vary else []
    out_dir, entries, _ = run_sweep(config, axes, parallel=not args.serial)
    print(f"wrote {len(entries)} run(s) + {MANIFEST_NAME} to {out_dir}")
    for e in entries:
        rate = "n/a" if e["rate_constant"] is None else f"{e['rate_constant']:.4g}"
        print(f"  {e['path']}: final err {e['final_err']:.6g}, rate {rate}")
    return 0


def cmd_serve(args) -> int:
    config = _load_from_args(args)
    bind_host, _, bind_port = args.bind.rpartition(":")
    if not bind_host or not bind_port.isdigit():
        raise ConfigError(f"--bind must be HOST:PORT, got {args.bind!r}")
    out_dir = config["output"]["dir"]
    prefix = config["output"]["prefix"]
    os.makedirs(out_dir, exist_ok=True)
    log_path = args.log or os.path.join(out_dir, f"{prefix}_messages.jsonl")
    net = build_net_config(config, log_path=log_path)
    server = Server(net, host=bind_host, port=int(bind_port)).start()
    host, port = server.address
    print(f"listening on {host}:{port}", flush=True)
    try:
        result = server.wait(timeout=args.timeout)
    except TimeoutError:
        server.shutdown()
        result = server.wait(timeout=10.0)
    csv_name = f"{prefix}_net_seed{net.seed}.csv"
    result.trajectory.write_csv(os.path.join(out_dir, csv_name))
    entry = _run_entry(csv_name, config, result.trajectory,
                       vary={"seed": net.seed})
    entry["applied"] = result.applied
    entry["timeouts"] = result.timeouts
    entry["late"] = result.late
    write_manifest(out_dir, "serve", config, [entry])
    print(f"applied {result.applied} updates "
          f"({result.timeouts} timeouts, {result.late} late)")
    print(f"wrote {os.path.join(out_dir, csv_name)} and {log_path}")
    print(_summarize(result.trajectory))
    return 0


def cmd_client(args) -> int:
    config = _load_from_args(args)
    host, _, port = args.connect.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"--connect must be HOST:PORT, got {args.connect!r}")
    policy = parse_policy_spec(args.policy)
    ccfg = ClientConfig(
        A=build_matrix(config), spec=build_problem(config),
        seed=config["run"]["seeds"][0], delay=args.delay)
    stats = client_loop(args.node, policy, (host, int(port)), ccfg)
    print(f"node {stats.node}: answered {stats.answered} queries, "
          f"saw {stats.snapshots} snapshots")
    return 0


def cmd_di(args) -> int:
    config = _load_from_args(args)
    A = build_matrix(config)
    spec = build_problem(config)
    if args.x0:
        x0 = np.array(_float_list(args.x0.split(","), "--x0"))
        if x0.size != A.d:
            raise ConfigError(f"--x0 must have {A.d} components")
    else:
        x0 = np.array(config["run"]["x0"], dtype=np.float64)
    if args.selection == "repel":
        sel = repelling_selection(A, spec)
    elif args.selection.startswith("constant:"):
        vals = _float_list(args.selection.split(":", 1)[1].split(","), "--selection")
        if len(vals) != len(spec.adversary_set):
            raise ConfigError(f"constant selection needs "
                              f"{len(spec.adversary_set)} values")
        sel = constant_selection(vals)
    else:
        raise ConfigError(f"--selection must be 'repel' or 'constant:...', "
                          f"got {args.selection!r}")
    path = integrate_di(x0, A, spec, sel, dt=args.dt, steps=args.steps)
    errs = np.linalg.norm(path - spec.mu, axis=1)
    print(f"start err {errs[0]:.6g}, final err {errs[-1]:.6g} "
          f"after {args.steps} steps (dt={args.dt:g})")
    below = np.nonzero(errs <= args.dt)[0]
    if below.size:
        print(f"first within dt of mu at t = {below[0] * args.dt:.4g}")
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("t,err\n")
            for k, e in enumerate(errs):
                fh.write("%.17g,%.17g\n" % (k * args.dt, e))
        print(f"wrote {args.csv}")
    return 0


def _add_source_args(sp, need_source=True):
    g = sp.add_mutually_exclusive_group(required=need_source)
    g.add_argument("--config", help="YAML config file")
    g.add_argument("--builtin", help="builtin problem: "
                   + ", ".join(sorted(BUILTINS)))
    sp.add_argument("--iterations", type=int, help="override run.iterations")
    sg = sp.add_mutually_exclusive_group()
    sg.add_argument("--seed", type=int, help="run a single seed")
    sg.add_argument("--seeds", help="comma-separated list overriding run.seeds")
    sp.add_argument("--alpha", type=float, help="override schedule.alpha_exponent")
    sp.add_argument("--beta", type=float, help="override schedule.beta_exponent")
    sp.add_argument("--adversary",
                    help="override adversary set, e.g. '3,4' (policies become repel)")
    sp.add_argument("--out", help="override output.dir")
    sp.add_argument("--prefix", help="override output.prefix")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="signfed",
        description="Adversary-tolerant asynchronous mean estimation: "
                    "check, simulate, and serve.")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("check", help="robustness verdict for the matrix")
    _add_source_args(sp)
    sp.add_argument("-m", type=int, default=None,
                    help="tolerated adversary count (default: problem.m_bound)")
    sp.add_argument("--sampled", action="store_true",
                    help="randomized descent instead of the exact checker "
                         f"(required for p > {MAX_EXACT_P})")
    sp.add_argument("--trials", type=int, default=1000,
                    help="starts for --sampled (default 1000)")
    sp.add_argument("--json", action="store_true", help="machine-readable output")
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("simulate", help="one seeded run -> CSV + manifest")
    _add_source_args(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", help="grid of runs -> CSVs + manifest")
    _add_source_args(sp)
    sp.add_argument("--vary", nargs="*", metavar="KEY=V1,V2",
                    help="axes: m, alpha, beta, iterations; cartesian "
                         "product over all --vary arguments and run.seeds")
    sp.add_argument("--serial", action="store_true",
                    help="run combos sequentially (default: process pool)")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("serve", help="coordinate a live TCP run")
    _add_source_args(sp)
    sp.add_argument("--bind", default="127.0.0.1:0", metavar="HOST:PORT",
                    help="listen address; port 0 picks a free port")
    sp.add_argument("--log", help="message log path (default <out>/<prefix>_messages.jsonl)")
    sp.add_argument("--timeout", type=float, default=None,
                    help="give up after this many seconds")
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("client", help="answer queries for one node")
    _add_source_args(sp)
    sp.add_argument("--node", type=int, required=True)
    sp.add_argument("--connect", required=True, metavar="HOST:PORT")
    sp.add_argument("--policy", default="honest",
                    help="honest | constant:V | random_uniform:LO:HI | "
                         "repel[:MAG] | collude:X1,..[:JITTER]")
    sp.add_argument("--delay", type=float, default=0.0,
                    help="seconds to sleep before each answer")
    sp.set_defaults(func=cmd_client)

    sp = sub.add_parser("di", help="integrate the mean-field inclusion")
    _add_source_args(sp)
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--dt", type=float, default=0.01)
    sp.add_argument("--x0", help="comma-separated start point (default run.x0)")
    sp.add_argument("--selection", default="repel",
                    help="'repel' or 'constant:V1,V2,...'")
    sp.add_argument("--csv", help="write t,err CSV here")
    sp.set_defaults(func=cmd_di)
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
