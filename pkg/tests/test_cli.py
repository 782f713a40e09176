"""Config resolution, sweep plumbing, and command exit codes.

resolve_config is the contract everything else leans on: it fills every
default, so parse -> emit -> parse must be the identity, and the sweep
machinery only ever touches resolved dicts.  Command tests go through
main(argv) so they cover argument wiring and exit codes too.
"""

import json
from types import SimpleNamespace

import pytest
import yaml

from signfed.adversary import Collude, Constant, Honest, RandomUniform, Repel
from signfed.cli import (
    BUILTINS,
    FIG1_GENERIC_ROWS,
    MANIFEST_NAME,
    ConfigError,
    _load_from_args,
    _parse_vary,
    build_matrix,
    build_policies,
    build_sim_config,
    builtin_config,
    emit_config,
    main,
    parse_policy_spec,
    resolve_config,
    run_sweep,
)
from signfed.engine import read_trajectory_csv


def minimal():
    return {"matrix": {"rows": [[1.0]] * 5}}


class TestResolveConfig:
    def test_fills_every_default(self):
        cfg = resolve_config(minimal())
        assert cfg["problem"] == {
            "mu": [1.0], "covariance": [[1.0]], "adversary_set": [],
            "m_bound": 0, "perturbation_bound": 0.0}
        assert cfg["schedule"] == {"alpha_exponent": 0.8, "beta_exponent": 0.6,
                                   "offset": 1}
        assert cfg["run"]["iterations"] == 200_000
        assert cfg["run"]["seeds"] == [0]
        assert cfg["run"]["x0"] == [0.0]
        assert cfg["run"]["y0"] == [0.0] * 5
        assert cfg["run"]["policies"] == {}
        assert cfg["output"] == {"dir": "out", "prefix": "run"}

    def test_resolving_is_idempotent(self):
        cfg = resolve_config(minimal())
        assert resolve_config(cfg) == cfg

    def test_emit_parse_round_trip(self):
        cfg = builtin_config("ones5")
        again = resolve_config(yaml.safe_load(emit_config(cfg)))
        assert again == cfg

    def test_rows_and_builtin_are_exclusive(self):
        with pytest.raises(ConfigError, match="exactly one"):
            resolve_config({"matrix": {"rows": [[1.0]] * 5, "builtin": "ones5"}})
        with pytest.raises(ConfigError, match="exactly one"):
            resolve_config({"matrix": {}})

    def test_builtin_alias_in_matrix_section(self):
        via_alias = resolve_config({"matrix": {"builtin": "ones"}})
        direct = resolve_config({"matrix": {"builtin": "ones5"}})
        assert via_alias["matrix"] == direct["matrix"]

    def test_adversary_count_takes_highest_indices(self):
        raw = minimal()
        raw["problem"] = {"adversary_count": 2}
        cfg = resolve_config(raw)
        assert cfg["problem"]["adversary_set"] == [3, 4]
        assert cfg["problem"]["m_bound"] == 2
        # compromised nodes default to the repel policy
        assert cfg["run"]["policies"] == {
            3: {"type": "repel", "magnitude": None},
            4: {"type": "repel", "magnitude": None}}

    def test_count_and_set_are_exclusive(self):
        raw = minimal()
        raw["problem"] = {"adversary_set": [4], "adversary_count": 1}
        with pytest.raises(ConfigError, match="not both"):
            resolve_config(raw)

    def test_seed_and_seeds_are_exclusive(self):
        raw = minimal()
        raw["run"] = {"seed": 1, "seeds": [1, 2]}
        with pytest.raises(ConfigError, match="not both"):
            resolve_config(raw)

    def test_seed_becomes_seeds_list(self):
        raw = minimal()
        raw["run"] = {"seed": 9}
        assert resolve_config(raw)["run"]["seeds"] == [9]

    def test_unknown_keys_rejected_everywhere(self):
        with pytest.raises(ConfigError, match="unknown key.*extra"):
            resolve_config(dict(minimal(), extra={}))
        raw = minimal()
        raw["problem"] = {"typo": 1}
        with pytest.raises(ConfigError, match="unknown key.*typo"):
            resolve_config(raw)

    def test_scalar_covariance_broadcasts(self):
        raw = {"matrix": {"rows": [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]},
               "problem": {"mu": [0.0, 0.0], "covariance": 2.0}}
        cfg = resolve_config(raw)
        assert cfg["problem"]["covariance"] == [[2.0, 0.0], [0.0, 2.0]]

    def test_honest_policy_outside_set_is_dropped(self):
        raw = minimal()
        raw["problem"] = {"adversary_set": [4]}
        raw["run"] = {"policies": {0: {"type": "honest"},
                                   4: {"type": "constant", "value": 9.0}}}
        cfg = resolve_config(raw)
        assert cfg["run"]["policies"] == {4: {"type": "constant", "value": 9.0}}

    def test_dishonest_policy_outside_set_rejected(self):
        raw = minimal()
        raw["run"] = {"policies": {0: {"type": "repel"}}}
        with pytest.raises(ConfigError, match="not in adversary_set"):
            resolve_config(raw)

    def test_m_bound_floor(self):
        raw = minimal()
        raw["problem"] = {"adversary_set": [3, 4], "m_bound": 1}
        with pytest.raises(ConfigError, match="m_bound"):
            resolve_config(raw)

    def test_dimension_checks(self):
        raw = minimal()
        raw["problem"] = {"mu": [1.0, 2.0]}
        with pytest.raises(ConfigError, match="mu must have length 1"):
            resolve_config(raw)
        raw = minimal()
        raw["run"] = {"x0": [1.0, 2.0]}
        with pytest.raises(ConfigError, match="x0 must have length 1"):
            resolve_config(raw)

    def test_policy_entry_validation(self):
        raw = minimal()
        raw["problem"] = {"adversary_set": [4]}
        raw["run"] = {"policies": {4: {"type": "constant"}}}
        with pytest.raises(ConfigError, match="needs 'value'"):
            resolve_config(raw)
        raw["run"] = {"policies": {4: {"type": "warp"}}}
        with pytest.raises(ConfigError, match="unknown policy type"):
            resolve_config(raw)


class TestBuiltins:
    def test_alias_matches_full_name(self):
        assert builtin_config("ones") == builtin_config("ones5")

    def test_unknown_builtin_lists_choices(self):
        with pytest.raises(ConfigError, match="fig1_generic.*ones5"):
            builtin_config("nope")

    def test_fig1_shape(self):
        cfg = builtin_config("fig1_generic")
        assert cfg["matrix"]["rows"] == FIG1_GENERIC_ROWS
        assert cfg["problem"]["adversary_set"] == [3]
        assert cfg["output"]["prefix"] == "fig1_generic"

    def test_every_builtin_resolves(self):
        for name in BUILTINS:
            cfg = builtin_config(name)
            assert cfg["run"]["seeds"], name


class TestBuildHelpers:
    def test_square_matrix_allowed_from_config(self):
        cfg = resolve_config({"matrix": {"rows": [[1.0, 0.0], [0.0, 1.0]]},
                              "problem": {"mu": [0.0, 0.0]}})
        A = build_matrix(cfg)
        assert (A.p, A.d) == (2, 2)

    def test_policies_fill_honest(self):
        cfg = builtin_config("ones5")
        pols = build_policies(cfg, 5)
        assert [type(p) for p in pols] == [Honest, Honest, Honest, Repel, Repel]

    def test_sim_config_seed_override(self):
        cfg = builtin_config("ones5")
        cfg["run"]["iterations"] = 10
        sim = build_sim_config(resolve_config(cfg), seed=123)
        assert sim.seed == 123
        assert sim.iterations == 10


class TestParsePolicySpec:
    @pytest.mark.parametrize("text,cls,attrs", [
        ("honest", Honest, {}),
        ("constant:2.5", Constant, {"value": 2.5}),
        ("random_uniform:-1:1", RandomUniform, {"low": -1.0, "high": 1.0}),
        ("repel", Repel, {"magnitude": None}),
        ("repel:50", Repel, {"magnitude": 50.0}),
        ("collude:1.0,2.0", Collude, {"x_target": [1.0, 2.0], "jitter": 0.0}),
        ("collude:1.0,2.0:0.3", Collude, {"jitter": 0.3}),
    ])
    def test_accepted_forms(self, text, cls, attrs):
        pol = parse_policy_spec(text)
        assert type(pol) is cls
        for k, v in attrs.items():
            assert getattr(pol, k) == v

    @pytest.mark.parametrize("text", ["constant", "repel:x", "warp", "collude"])
    def test_rejected_forms(self, text):
        with pytest.raises(ConfigError, match="policy spec"):
            parse_policy_spec(text)


class TestParseVary:
    def test_axes_and_types(self):
        axes = _parse_vary(["m=0,2,3", "alpha=0.7,0.9"])
        assert axes == [("m", [0, 2, 3]), ("alpha", [0.7, 0.9])]

    @pytest.mark.parametrize("tok,msg", [
        ("m", "KEY=V1"),
        ("rows=1", "must be one of"),
        ("m=", "no values"),
        ("m=a", "cannot parse"),
    ])
    def test_rejects(self, tok, msg):
        with pytest.raises(ConfigError, match=msg):
            _parse_vary([tok])


class TestRunSweep:
    def test_grid_runs_and_manifest(self, tmp_path):
        cfg = builtin_config("ones5")
        cfg["run"]["iterations"] = 400
        cfg["run"]["seeds"] = [0, 1]
        cfg["output"]["dir"] = str(tmp_path)
        cfg = resolve_config(cfg)

        out_dir, entries, trajs = run_sweep(cfg, [("m", [0, 2])], parallel=False)
        assert out_dir == str(tmp_path)
        assert len(entries) == len(trajs) == 4

        want = [(0, 0), (0, 1), (2, 0), (2, 1)]
        for entry, traj, (m, seed) in zip(entries, trajs, want):
            assert entry["m"] == m
            assert entry["seed"] == seed == traj.seed
            assert entry["vary"] == {"m": m, "seed": seed}
            assert entry["adversary_set"] == ([] if m == 0 else [3, 4])
            assert entry["label"] == f"m={m},seed={seed}"
            # the CSV records pre-step states (last row is n = N-1);
            # final_err is measured at the final state, one step later
            cols = read_trajectory_csv(tmp_path / entry["path"])
            assert cols["err_x"][-1] == traj.err_x[-1]
            assert entry["final_err"] == traj.final_err

        names = [e["path"] for e in entries]
        assert names == ["ones5_000_m0_seed0.csv", "ones5_001_m0_seed1.csv",
                         "ones5_002_m2_seed0.csv", "ones5_003_m2_seed1.csv"]

        doc = yaml.safe_load((tmp_path / MANIFEST_NAME).read_text())
        assert doc["version"] == 1
        assert doc["kind"] == "sweep"
        assert doc["eta"] == pytest.approx(0.2, abs=1e-12)
        assert [r["path"] for r in doc["runs"]] == names

    def test_no_axes_runs_seeds_only(self, tmp_path):
        cfg = builtin_config("ones5")
        cfg["run"]["iterations"] = 100
        cfg["run"]["seeds"] = [5]
        cfg["output"]["dir"] = str(tmp_path)
        _, entries, _ = run_sweep(resolve_config(cfg), [], parallel=False)
        assert [e["path"] for e in entries] == ["ones5_000_seed5.csv"]


class TestOutDirResolution:
    def args(self, **kw):
        return SimpleNamespace(config=None, builtin="ones5", **kw)

    def test_flag_beats_env(self, monkeypatch):
        monkeypatch.setenv("SIGNFED_OUT", "envdir")
        cfg = _load_from_args(self.args(out="flagdir"))
        assert cfg["output"]["dir"] == "flagdir"

    def test_env_beats_config(self, monkeypatch):
        monkeypatch.setenv("SIGNFED_OUT", "envdir")
        cfg = _load_from_args(self.args())
        assert cfg["output"]["dir"] == "envdir"

    def test_config_default_without_either(self, monkeypatch):
        monkeypatch.delenv("SIGNFED_OUT", raising=False)
        cfg = _load_from_args(self.args())
        assert cfg["output"]["dir"] == "out"

    def test_adversary_flag_rewrites_set(self, monkeypatch):
        monkeypatch.delenv("SIGNFED_OUT", raising=False)
        cfg = _load_from_args(self.args(adversary="1,2"))
        assert cfg["problem"]["adversary_set"] == [1, 2]
        assert cfg["problem"]["m_bound"] == 2
        assert set(cfg["run"]["policies"]) == {1, 2}

    def test_adversary_flag_empty_clears(self, monkeypatch):
        monkeypatch.delenv("SIGNFED_OUT", raising=False)
        cfg = _load_from_args(self.args(adversary=""))
        assert cfg["problem"]["adversary_set"] == []
        assert cfg["run"]["policies"] == {}

    def test_seeds_flag_parses_csv(self, monkeypatch):
        monkeypatch.delenv("SIGNFED_OUT", raising=False)
        cfg = _load_from_args(self.args(seeds="3,5,8"))
        assert cfg["run"]["seeds"] == [3, 5, 8]


class TestMainCheck:
    def test_robust_verdict_exit_zero(self, capsys):
        rc = main(["check", "--builtin", "ones5"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "robust (m=2, exact): yes" in out
        assert "margin: 1" in out

    def test_non_robust_exit_one(self, capsys):
        rc = main(["check", "--builtin", "ones5", "-m", "3"])
        out = capsys.readouterr().out
        assert rc == 1
        assert "robust (m=3, exact): no" in out

    def test_json_output(self, capsys):
        rc = main(["check", "--builtin", "ones5", "--json"])
        doc = json.loads(capsys.readouterr().out)
        assert rc == 0
        assert doc["robust"] is True
        assert doc["margin"] == pytest.approx(1.0, rel=1e-12)
        assert doc["eta"] == pytest.approx(0.2, abs=1e-12)
        # every 2-subset of identical rows is equally bad; just check shape
        assert len(doc["witness_set"]) == 2
        assert all(0 <= i < 5 for i in doc["witness_set"])

    def test_unknown_builtin_is_usage_error(self, capsys):
        rc = main(["check", "--builtin", "nope"])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_missing_source_is_usage_error(self, capsys):
        assert main(["check"]) == 2


class TestMainSimulate:
    def test_single_seed_writes_csv_and_manifest(self, tmp_path, capsys):
        rc = main(["simulate", "--builtin", "ones", "--iterations", "300",
                   "--seed", "3", "--out", str(tmp_path)])
        assert rc == 0
        assert "final err" in capsys.readouterr().out
        cols = read_trajectory_csv(tmp_path / "ones5_seed3.csv")
        assert cols["n"][0] == 0
        doc = yaml.safe_load((tmp_path / MANIFEST_NAME).read_text())
        assert doc["kind"] == "simulate"
        assert doc["runs"][0]["path"] == "ones5_seed3.csv"
        assert doc["runs"][0]["seed"] == 3

    def test_single_iteration_records_start_error(self, tmp_path, capsys):
        rc = main(["simulate", "--builtin", "ones5", "--iterations", "1",
                   "--seed", "0", "--out", str(tmp_path)])
        assert rc == 0
        cols = read_trajectory_csv(tmp_path / "ones5_seed0.csv")
        assert list(cols["n"]) == [0]
        assert cols["err_x"][0] == 1.0  # ||x0 - mu|| with x0 = 0, mu = 1


class TestMainSweep:
    def test_empty_vary_is_usage_error(self, capsys):
        rc = main(["sweep", "--builtin", "ones5", "--vary"])
        assert rc == 2
        assert "nothing to sweep" in capsys.readouterr().err

    def test_small_sweep_exit_zero(self, tmp_path, capsys):
        rc = main(["sweep", "--builtin", "ones5", "--iterations", "120",
                   "--seed", "0", "--vary", "m=0,2", "--serial",
                   "--out", str(tmp_path)])
        out = capsys.readouterr().out
        assert rc == 0
        assert "wrote 2 run(s)" in out
        assert (tmp_path / MANIFEST_NAME).exists()


class TestMainServeClient:
    def test_bad_bind_is_usage_error(self, capsys):
        rc = main(["serve", "--builtin", "ones5", "--bind", "nocolon"])
        assert rc == 2
        assert "--bind" in capsys.readouterr().err

    def test_bad_connect_is_usage_error(self, capsys):
        rc = main(["client", "--builtin", "ones5", "--node", "0",
                   "--connect", "nocolon"])
        assert rc == 2
        assert "--connect" in capsys.readouterr().err


class TestMainDi:
    def test_honest_flow_reaches_mean(self, capsys):
        rc = main(["di", "--builtin", "ones5", "--adversary", "",
                   "--steps", "200", "--dt", "0.01"])
        out = capsys.readouterr().out
        assert rc == 0
        assert "start err 1" in out
        assert "first within dt of mu at t = 0.99" in out

    def test_csv_dump(self, tmp_path, capsys):
        path = tmp_path / "di.csv"
        rc = main(["di", "--builtin", "ones5", "--steps", "50",
                   "--dt", "0.02", "--csv", str(path)])
        assert rc == 0
        lines = path.read_text().splitlines()
        assert lines[0] == "t,err"
        assert len(lines) == 52  # header + steps + 1 rows

    def test_bad_selection_is_usage_error(self, capsys):
        rc = main(["di", "--builtin", "ones5", "--selection", "chaotic"])
        assert rc == 2
