"""Config resolution, overrides, CLI exit codes, and output idempotence."""

import json
import subprocess
import sys

import numpy as np
import pytest

from fedsep.cli import main
from fedsep.config import (
    apply_overrides,
    build_profile,
    parse_override,
    resolve_config,
)
from fedsep.errors import NumericalError, ValidationError


# ---------------------------------------------------------------------------
# Config resolution

def test_defaults_filled_and_echoed():
    cfg = resolve_config("pi-vs-r", {})
    assert cfg["experiment"] == "pi-vs-r"
    assert cfg["chain"]["n_clients"] == 12
    assert cfg["mc"]["replicas"] == 8


def test_unknown_keys_rejected_at_any_depth():
    with pytest.raises(ValidationError, match="typo_key"):
        resolve_config("pi-vs-r", {"typo_key": 1})
    with pytest.raises(ValidationError, match="horizon"):
        resolve_config("pi-vs-r", {"mc": {"horizon": 5}})


def test_experiment_mismatch_rejected():
    with pytest.raises(ValidationError):
        resolve_config("pi-vs-r", {"experiment": "mixing"})


def test_partial_override_merges_with_defaults():
    cfg = resolve_config("mixing", {"chain": {"n_clients": 4}})
    assert cfg["chain"]["n_clients"] == 4
    assert cfg["chain"]["batch_size"] == 1  # default retained


def test_parse_override_values():
    assert parse_override("a.b=3") == (["a", "b"], 3)
    assert parse_override("x=[1,2]") == (["x"], [1, 2])
    assert parse_override("s=hello") == (["s"], "hello")
    assert parse_override("f=0.5") == (["f"], 0.5)
    with pytest.raises(ValidationError):
        parse_override("novalue")


def test_overrides_win_over_file_values():
    user = {"chain": {"n_clients": 8}}
    merged = apply_overrides(user, ["chain.n_clients=6", "k_max=7"])
    cfg = resolve_config("mixing", merged)
    assert cfg["chain"]["n_clients"] == 6
    assert cfg["k_max"] == 7


def test_build_profile_kinds():
    assert np.allclose(build_profile({"kind": "uniform"}, 4).p, 0.25)
    pl = build_profile({"kind": "powerlaw", "exponent": 1.5}, 3)
    assert pl.p[0] > pl.p[1] > pl.p[2]
    r1 = build_profile({"kind": "random", "seed": 3}, 5)
    r2 = build_profile({"kind": "random", "seed": 3}, 5)
    assert np.array_equal(r1.p, r2.p)
    ex = build_profile({"kind": "explicit", "weights": [1, 1]}, 2)
    assert np.allclose(ex.p, 0.5)
    with pytest.raises(ValidationError):
        build_profile({"kind": "explicit", "weights": [1, 1]}, 3)
    with pytest.raises(ValidationError):
        build_profile({"kind": "nope"}, 3)


# ---------------------------------------------------------------------------
# CLI behaviour

def test_cli_validation_exit_code(tmp_path):
    rc = main(["pi-vs-r", "--out", str(tmp_path), "--set", "bogus=1"])
    assert rc == 2


def test_cli_feasibility_exit_code(tmp_path):
    rc = main(
        [
            "mixing",
            "--out",
            str(tmp_path),
            "--set",
            "chain.n_clients=6",
            "--set",
            "k_max=2000000000",
        ]
    )
    assert rc == 3


def test_cli_numerical_exit_code(tmp_path, monkeypatch):
    import fedsep.cli as cli_mod

    def boom(cfg, out):
        raise NumericalError("did not converge", residual=1.0)

    monkeypatch.setitem(cli_mod.RUNNERS, "mixing", boom)
    rc = main(["mixing", "--out", str(tmp_path)])
    assert rc == 4


def test_cli_config_file_and_seed_flag(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"chain": {"n_clients": 4}, "seed": 9}))
    out = tmp_path / "out"
    rc = main(["mixing", "--config", str(cfg_path), "--out", str(out), "--seed", "17"])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 17
    assert manifest["config"]["chain"]["n_clients"] == 4
    assert manifest["tool"] == "fedsep"
    out2 = tmp_path / "out2"
    assert main(["mixing", "--config", str(cfg_path), "--out", str(out2), "--seed", "17"]) == 0
    for name in ("mixing.csv", "tv_decay.csv", "manifest.json"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes()


def test_cli_bad_config_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["mixing", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["mixing", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "o")]) == 2


def test_pi_vs_r_idempotent_outputs(tmp_path):
    args = [
        "pi-vs-r",
        "--out",
        None,
        "--seed",
        "3",
        "--set",
        "chain.n_clients=4",
        "--set",
        "profile.kind=explicit",
        "--set",
        "profile.weights=[0.1,0.2,0.3,0.4]",
    ]
    out1, out2 = tmp_path / "a", tmp_path / "b"
    args[2] = str(out1)
    assert main(args) == 0
    args[2] = str(out2)
    assert main(args) == 0
    assert (out1 / "pi_vs_r.csv").read_bytes() == (out2 / "pi_vs_r.csv").read_bytes()
    assert (out1 / "manifest.json").read_bytes() == (out2 / "manifest.json").read_bytes()
    rows = (out1 / "pi_vs_r.csv").read_text().strip().splitlines()
    assert rows[0] == "R,l1_distance_to_uniform,method,stderr"
    assert len(rows) == 1 + 4  # full R grid 0..3


def test_toy_bias_command_small(tmp_path):
    rc = main(
        [
            "toy-bias",
            "--out",
            str(tmp_path),
            "--seed",
            "1",
            "--set",
            "n_seeds=3",
            "--set",
            "hyper.rounds=500",
            "--set",
            "hyper.eval_every=500",
        ]
    )
    assert rc == 0
    rows = (tmp_path / "toy_bias.csv").read_text().strip().splitlines()
    assert rows[0] == "algorithm,seed,x_T,mean_x_T,F_x_T"
    assert len(rows) == 1 + 3 * 3


def test_estimator_rate_command_small(tmp_path):
    args = ["estimator-rate", "--out", None, "--set", "horizon=200", "--set", "n_seeds=3"]
    out1, out2 = tmp_path / "a", tmp_path / "b"
    args[2] = str(out1)
    assert main(args) == 0
    rows = (out1 / "estimator_rate.csv").read_text().strip().splitlines()
    assert rows[0] == "t,mean_sq_inf_error"
    assert len(rows) == 201
    args[2] = str(out2)
    assert main(args) == 0
    assert (out1 / "estimator_rate.csv").read_bytes() == (out2 / "estimator_rate.csv").read_bytes()


def test_evolution_command_small(tmp_path):
    rc = main(
        [
            "evolution",
            "--out",
            str(tmp_path),
            "--set",
            "chain.n_clients=4",
            "--set",
            "r_grid=[0,2]",
            "--set",
            "horizon=20",
            "--set",
            "replicas=200",
        ]
    )
    assert rc == 0
    rows = (tmp_path / "evolution.csv").read_text().strip().splitlines()
    assert rows[0] == "t,R,tv_to_pi,tv_cumulative_to_pi"
    assert len(rows) == 1 + 2 * 21


def test_synth_debias_command_small(tmp_path):
    rc = main(
        [
            "synth-debias",
            "--out",
            str(tmp_path),
            "--seed",
            "2",
            "--set",
            "problem.n_clients=10",
            "--set",
            "problem.n_groups=5",
            "--set",
            "problem.dim=3",
            "--set",
            "problem.samples_per_client=10",
            "--set",
            "r_grid=[0,3]",
            "--set",
            "hyper.rounds=60",
            "--set",
            "hyper.eval_every=20",
            "--set",
            "n_seeds=2",
        ]
    )
    assert rc == 0
    summary = (tmp_path / "summary.csv").read_text().strip().splitlines()
    assert summary[0] == "algorithm,R,seed,terminal_loss,diverged"
    # per seed: oracle + (fedavg + debiased) x 2 R values
    assert len(summary) == 1 + 2 * 5
    traces = (tmp_path / "traces.csv").read_text().strip().splitlines()
    assert traces[0] == "algorithm,R,seed,t,loss,grad_norm_sq,diverged"
    assert len(traces) == 1 + 2 * 5 * 3  # 3 eval records per run


def test_cli_subprocess_entry_point(tmp_path):
    result = subprocess.run(
        [
            sys.executable,
            "-m",
            "fedsep.cli",
            "mixing",
            "--out",
            str(tmp_path),
            "--set",
            "chain.n_clients=4",
        ],
        capture_output=True,
        text=True,
    )
    assert result.returncode == 0
    assert (tmp_path / "mixing.csv").exists()
