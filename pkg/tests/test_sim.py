"""Training loops: closed-form recursion oracle, reduction identities,
conservation of the aggregation rule, determinism, divergence guard."""

import numpy as np
import pytest

from fedsep.chain import ChainConfig, ChainState, make_profile
from fedsep.errors import ValidationError
from fedsep.objectives import (
    SyntheticSpec,
    generate_synthetic,
    global_metrics,
    quadratic_toy,
)
from fedsep.sim import (
    HyperParams,
    export_trace,
    run_debiased_fedavg,
    run_fedavg,
    run_known_pi,
    run_oracle_uniform,
)

TOY_P = [0.25, 0.25, 0.5]


def test_hyperparams_validation():
    with pytest.raises(ValidationError):
        HyperParams(0, 0.1, 10)
    with pytest.raises(ValidationError):
        HyperParams(1, -0.1, 10)
    with pytest.raises(ValidationError):
        HyperParams(1, 0.1, 0)


def test_full_participation_converges_to_population_minimum():
    # B = N with R = 0 is deterministic: every client participates every
    # round and the averaged K-step map has fixed point exactly 2.
    toy = quadratic_toy()
    prof = make_profile(np.ones(3))
    cfg = ChainConfig(3, 3, 0)
    hyper = HyperParams(local_steps=5, stepsize=0.05, rounds=300, eval_every=300)
    trace = run_fedavg(toy, prof, cfg, hyper, seed=0)
    assert abs(trace.final_x - 2.0) < 1e-6
    assert not trace.diverged


def test_single_step_recursion_closed_form():
    # K = 1, B = 1: the server update is x_{t+1} = (1-a) x_t + a * value,
    # replayed here from the recorded batches.
    toy = quadratic_toy()
    prof = make_profile(TOY_P)
    cfg = ChainConfig(3, 1, 1)
    alpha = 0.07
    hyper = HyperParams(local_steps=1, stepsize=alpha, rounds=200, eval_every=1)
    trace = run_fedavg(toy, prof, cfg, hyper, seed=11)
    x = 0.0
    for k, t in enumerate(trace.eval_rounds):
        loss, grad_sq = global_metrics(toy, x)
        assert abs(trace.losses[k] - loss) < 1e-12
        assert abs(trace.grad_norms_sq[k] - grad_sq) < 1e-12
        value = trace.batches[k][0] + 1.0
        x = (1 - alpha) * x + alpha * value
    assert abs(trace.final_x - x) < 1e-12


def test_multi_step_recursion_closed_form():
    # K > 1 contracts with beta = (1-a)^K on the quadratic toy.
    toy = quadratic_toy()
    prof = make_profile(TOY_P)
    cfg = ChainConfig(3, 1, 1)
    alpha, k_steps = 0.05, 5
    hyper = HyperParams(k_steps, alpha, rounds=150, eval_every=1)
    trace = run_fedavg(toy, prof, cfg, hyper, seed=4)
    beta = (1 - alpha) ** k_steps
    x = 0.0
    for k in range(len(trace.eval_rounds)):
        value = trace.batches[k][0] + 1.0
        x = beta * x + (1 - beta) * value
    assert abs(trace.final_x - x) < 1e-10


def test_server_average_conservation():
    # Independent replay of the whole loop for a B=2 problem.
    problem = generate_synthetic(SyntheticSpec(n_clients=4, dim=3, samples_per_client=10, seed=2))
    prof = make_profile([0.1, 0.2, 0.3, 0.4])
    cfg = ChainConfig(4, 2, 1)
    hyper = HyperParams(local_steps=3, stepsize=0.05, rounds=6, eval_every=1)
    trace = run_fedavg(problem, prof, cfg, hyper, seed=9)
    x = np.zeros(3)
    for batch in trace.batches:
        finals = []
        for i in batch:
            xi = x
            for _ in range(3):
                xi = xi - 0.05 * problem.grad(i, xi)
            finals.append(xi)
        assert len(finals) == 2
        x = (finals[0] + finals[1]) / 2
    assert np.max(np.abs(trace.final_x - x)) < 1e-14


def test_eval_record_count():
    toy = quadratic_toy()
    prof = make_profile(TOY_P)
    cfg = ChainConfig(3, 1, 1)
    trace = run_fedavg(toy, prof, cfg, HyperParams(1, 0.05, 10, eval_every=3), seed=1)
    assert len(trace.eval_rounds) == 4  # ceil(10 / 3)
    assert trace.eval_rounds.tolist() == [0, 3, 6, 9]
    assert trace.mean_grad_norm_sq() == pytest.approx(np.mean(trace.grad_norms_sq))


def test_same_seed_identical_traces():
    toy = quadratic_toy()
    prof = make_profile(TOY_P)
    cfg = ChainConfig(3, 1, 1)
    hyper = HyperParams(5, 0.05, 2000, eval_every=100)
    a = run_fedavg(toy, prof, cfg, hyper, seed=33)
    b = run_fedavg(toy, prof, cfg, hyper, seed=33)
    assert a.final_x == b.final_x
    assert a.losses.tolist() == b.losses.tolist()
    assert a.batches == b.batches


def test_frozen_lambda_reduces_to_fedavg_bitwise_toy():
    toy = quadratic_toy()
    prof = make_profile(TOY_P)
    cfg = ChainConfig(3, 1, 1)
    hyper = HyperParams(5, 0.05, 3000, eval_every=250)
    vanilla = run_fedavg(toy, prof, cfg, hyper, seed=7)
    frozen = run_debiased_fedavg(
        toy, prof, cfg, hyper, seed=7, frozen_lambda=1.0 / 3.0, record_lambda=False
    )
    assert vanilla.final_x == frozen.final_x
    assert vanilla.losses.tolist() == frozen.losses.tolist()
    assert vanilla.batches == frozen.batches


def test_known_pi_uniform_reduces_to_fedavg_bitwise():
    problem = generate_synthetic(SyntheticSpec(n_clients=4, dim=3, samples_per_client=10, seed=8))
    prof = make_profile([0.1, 0.2, 0.3, 0.4])
    cfg = ChainConfig(4, 2, 1)
    hyper = HyperParams(3, 0.04, 200, eval_every=40)
    vanilla = run_fedavg(problem, prof, cfg, hyper, seed=5)
    uniform = run_known_pi(problem, prof, cfg, hyper, np.full(4, 0.25), seed=5)
    assert np.array_equal(np.asarray(vanilla.final_x), np.asarray(uniform.final_x))
    assert vanilla.losses.tolist() == uniform.losses.tolist()


def test_first_participation_nu_value():
    # lambda snapshots let us read off nu = (t+1)B/N at first participation.
    toy = quadratic_toy()
    prof = make_profile(TOY_P)
    cfg = ChainConfig(3, 1, 1)
    hyper = HyperParams(1, 0.05, 30, eval_every=1)
    trace = run_debiased_fedavg(toy, prof, cfg, hyper, seed=15)
    seen = set()
    for k, t in enumerate(trace.eval_rounds):
        batch = trace.batches[k]
        lam = trace.lambdas[k]
        assert abs(lam.sum() - 1.0) < 1e-12
        i = batch[0]
        if i not in seen:
            assert lam[i] == pytest.approx(1.0 / (t + 1), abs=1e-15)
        seen.add(i)


def test_oracle_uniform_full_batch_is_plain_gd():
    toy = quadratic_toy()
    hyper = HyperParams(5, 0.05, 200, eval_every=200)
    trace = run_oracle_uniform(toy, hyper, batch_size=3, seed=0)
    assert abs(trace.final_x - 2.0) < 1e-6


def test_oracle_uniform_batches_cover_population():
    problem = generate_synthetic(SyntheticSpec(n_clients=6, dim=2, samples_per_client=5, seed=1))
    hyper = HyperParams(1, 0.01, 300, eval_every=1)
    trace = run_oracle_uniform(problem, hyper, batch_size=2, seed=3)
    seen = set()
    for batch in trace.batches:
        assert len(set(batch)) == 2
        seen |= set(batch)
    assert seen == set(range(6))


def test_divergence_guard_flags_run():
    toy = quadratic_toy()
    prof = make_profile(TOY_P)
    cfg = ChainConfig(3, 1, 1)
    hyper = HyperParams(8, 3.0, 5000, eval_every=100)  # (1-3)^8 explodes
    trace = run_fedavg(toy, prof, cfg, hyper, seed=2)
    assert trace.diverged
    assert trace.final_loss == np.inf
    assert len(trace.eval_rounds) < 50  # aborted early


def test_known_pi_validation():
    toy = quadratic_toy()
    prof = make_profile(TOY_P)
    cfg = ChainConfig(3, 1, 1)
    hyper = HyperParams(1, 0.05, 10)
    with pytest.raises(ValidationError):
        run_known_pi(toy, prof, cfg, hyper, [0.5, 0.5, 0.0], seed=0)
    with pytest.raises(ValidationError):
        run_known_pi(toy, prof, cfg, hyper, [0.9, 0.2, 0.4], seed=0)


def test_problem_chain_size_mismatch_rejected():
    toy = quadratic_toy()
    prof = make_profile([0.1, 0.2, 0.3, 0.4])
    with pytest.raises(ValidationError):
        run_fedavg(toy, prof, ChainConfig(4, 1, 1), HyperParams(1, 0.05, 10), seed=0)


def test_export_trace_roundtrip(tmp_path):
    import json

    toy = quadratic_toy()
    prof = make_profile(TOY_P)
    cfg = ChainConfig(3, 1, 1)
    trace = run_debiased_fedavg(toy, prof, cfg, HyperParams(2, 0.05, 20, eval_every=5), seed=1)
    export_trace(trace, tmp_path, stem="run")
    rows = (tmp_path / "run.csv").read_text().strip().splitlines()
    assert rows[0] == "t,loss,grad_norm_sq,batch_members,lambda_json"
    assert len(rows) == 1 + len(trace.eval_rounds)
    manifest = json.loads((tmp_path / "run.json").read_text())
    assert manifest["algorithm"] == "debiased"
    assert manifest["config"]["min_separation"] == 1
    before = (tmp_path / "run.csv").read_bytes()
    export_trace(trace, tmp_path, stem="run")
    assert (tmp_path / "run.csv").read_bytes() == before


def test_trace_carries_dataset_fingerprint(tmp_path):
    import json

    problem = generate_synthetic(SyntheticSpec(n_clients=4, dim=3, samples_per_client=5, seed=1))
    prof = make_profile(np.ones(4))
    trace = run_fedavg(problem, prof, ChainConfig(4, 2, 1), HyperParams(1, 0.02, 10), seed=0)
    assert trace.config["dataset_fingerprint"] == problem.fingerprint
    export_trace(trace, tmp_path)
    manifest = json.loads((tmp_path / "trace.json").read_text())
    assert manifest["config"]["dataset_fingerprint"] == problem.fingerprint
