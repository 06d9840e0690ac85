"""Experiment implementations behind the CLI subcommands.

Each experiment takes its fully resolved config dict, runs the grid, and
writes tidy CSV tables plus a manifest.json echoing the resolved config,
tool version and seed. Outputs contain no timestamps or environment state:
identical config and seed produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from . import __version__
from .chain import ChainConfig, seed_sequence
from .config import build_profile
from .errors import ValidationError
from .exact import (
    distance_to_uniform,
    enumerate_exact_chain,
    mixing_time,
    state_count,
    tv_decay,
)
from .montecarlo import estimate_pi, marginal_evolution, mean_estimator_error_trace
from .objectives import (
    SyntheticSpec,
    contiguous_groups,
    make_synthetic_dataset,
    quadratic_toy,
    stacked_group_problem,
)
from .sim import (
    HyperParams,
    run_debiased_fedavg,
    run_fedavg,
    run_known_pi,
    run_oracle_uniform,
)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_manifest(out_dir: Path, resolved_cfg: dict) -> None:
    manifest = {
        "tool": "fedsep",
        "version": __version__,
        "experiment": resolved_cfg["experiment"],
        "seed": resolved_cfg["seed"],
        "config": resolved_cfg,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _prepare(out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _hyper(block: dict) -> HyperParams:
    return HyperParams(
        local_steps=int(block["local_steps"]),
        stepsize=float(block["stepsize"]),
        rounds=int(block["rounds"]),
        eval_every=int(block["eval_every"]),
    )


# ---------------------------------------------------------------------------
# pi-vs-r

def run_pi_vs_r(cfg: dict, out_dir) -> list[tuple]:
    """Distance from the participation marginal to uniform, per R.

    Exact when the augmented chain fits under exact_cap; the cyclic
    extreme R = M-1 is exactly uniform without enumeration; everything
    else is Monte Carlo with mc.rounds effective post-burn-in rounds
    split across mc.replicas chains.
    """
    out_dir = _prepare(out_dir)
    n = int(cfg["chain"]["n_clients"])
    b = int(cfg["chain"]["batch_size"])
    m = n // b
    profile = build_profile(cfg["profile"], n)
    r_grid = cfg["r_grid"] if cfg["r_grid"] is not None else list(range(m))
    cap = int(cfg["exact_cap"])
    mc = cfg["mc"]
    master = seed_sequence(int(cfg["seed"]))
    children = master.spawn(len(r_grid))
    rows = []
    for r, child in zip(r_grid, children):
        chain_cfg = ChainConfig(n, b, int(r))
        if state_count(chain_cfg) <= cap:
            chain = enumerate_exact_chain(profile, chain_cfg, max_states=cap)
            rows.append((int(r), distance_to_uniform(chain.marginal), "exact", 0.0))
        elif chain_cfg.is_cyclic:
            # The cyclic extreme is exactly uniform regardless of p.
            rows.append((int(r), 0.0, "exact", 0.0))
        else:
            replicas = int(mc["replicas"])
            burn_in = int(mc["burn_in"])
            per_replica = burn_in + math.ceil(int(mc["rounds"]) / replicas)
            est = estimate_pi(
                profile, chain_cfg, per_replica, replicas, burn_in=burn_in, seed=child
            )
            dist = distance_to_uniform(est.pi_hat)
            stderr = float(np.sqrt((est.stderr**2).sum()))
            rows.append((int(r), dist, "mc", stderr))
    write_csv(
        out_dir / "pi_vs_r.csv",
        ["R", "l1_distance_to_uniform", "method", "stderr"],
        rows,
    )
    write_manifest(out_dir, cfg)
    return rows


# ---------------------------------------------------------------------------
# toy-bias

def run_toy_bias(cfg: dict, out_dir) -> dict[str, list]:
    """Terminal iterates of the three variants on the quadratic toy."""
    out_dir = _prepare(out_dir)
    problem = quadratic_toy()
    profile = build_profile(cfg["profile"], 3)
    chain_cfg = ChainConfig(3, 1, int(cfg["min_separation"]))
    hyper = _hyper(cfg["hyper"])
    algorithms = list(cfg["algorithms"])
    n_seeds = int(cfg["n_seeds"])
    pi_exact = enumerate_exact_chain(profile, chain_cfg).marginal
    children = seed_sequence(int(cfg["seed"])).spawn(n_seeds)
    finals: dict[str, list] = {alg: [] for alg in algorithms}
    for child in children:
        for alg in algorithms:
            if alg == "fedavg":
                trace = run_fedavg(problem, profile, chain_cfg, hyper, seed=child)
            elif alg == "debiased":
                trace = run_debiased_fedavg(
                    problem, profile, chain_cfg, hyper, seed=child, record_lambda=False
                )
            elif alg == "known_pi":
                trace = run_known_pi(problem, profile, chain_cfg, hyper, pi_exact, seed=child)
            else:
                raise ValidationError(f"unknown toy algorithm '{alg}'")
            finals[alg].append((float(trace.final_x), trace.final_loss))
    means = {alg: float(np.mean([x for x, _ in vals])) for alg, vals in finals.items()}
    rows = []
    for alg in algorithms:
        for k, (x_t, loss) in enumerate(finals[alg]):
            rows.append((alg, k, x_t, means[alg], loss))
    write_csv(
        out_dir / "toy_bias.csv",
        ["algorithm", "seed", "x_T", "mean_x_T", "F_x_T"],
        rows,
    )
    write_manifest(out_dir, cfg)
    return {alg: means[alg] for alg in algorithms}


# ---------------------------------------------------------------------------
# synth-debias

def run_synth_debias(cfg: dict, out_dir) -> list[tuple]:
    """Grouped synthetic experiment: vanilla/debiased across the R grid
    plus the oracle-uniform reference, all traces emitted."""
    out_dir = _prepare(out_dir)
    pblock = cfg["problem"]
    spec = SyntheticSpec(
        n_clients=int(pblock["n_clients"]),
        dim=int(pblock["dim"]),
        samples_per_client=int(pblock["samples_per_client"]),
        seed=int(pblock["data_seed"]),
    )
    dataset = make_synthetic_dataset(spec)
    m = int(pblock["n_groups"])
    gmap = contiguous_groups(spec.n_clients, m)
    grouped = stacked_group_problem(dataset, gmap)
    profile = build_profile(cfg["profile"], m)
    hyper = _hyper(cfg["hyper"])
    r_grid = [int(r) for r in cfg["r_grid"]]
    n_seeds = int(cfg["n_seeds"])
    window = float(cfg["terminal_window"])

    trace_rows: list[tuple] = []
    summary_rows: list[tuple] = []

    def record(trace, alg, r_label, seed_idx):
        for k in range(len(trace.eval_rounds)):
            trace_rows.append(
                (
                    alg,
                    r_label,
                    seed_idx,
                    int(trace.eval_rounds[k]),
                    float(trace.losses[k]),
                    float(trace.grad_norms_sq[k]),
                    int(trace.diverged),
                )
            )
        tail = max(1, int(round(window * len(trace.losses))))
        terminal = float(np.mean(trace.losses[-tail:])) if not trace.diverged else math.inf
        summary_rows.append((alg, r_label, seed_idx, terminal, int(trace.diverged)))

    master = seed_sequence(int(cfg["seed"]))
    for seed_idx, seed_child in enumerate(master.spawn(n_seeds)):
        # One stream for the oracle, then one shared per R so vanilla and
        # debiased see identical participation sequences (paired seeds).
        streams = seed_child.spawn(1 + len(r_grid))
        if cfg["include_oracle"]:
            trace = run_oracle_uniform(grouped, hyper, batch_size=1, seed=streams[0])
            record(trace, "oracle_uniform", None, seed_idx)
        for r, stream in zip(r_grid, streams[1:]):
            chain_cfg = ChainConfig(m, 1, r)
            record(
                run_fedavg(grouped, profile, chain_cfg, hyper, seed=stream),
                "fedavg",
                r,
                seed_idx,
            )
            record(
                run_debiased_fedavg(
                    grouped, profile, chain_cfg, hyper, seed=stream, record_lambda=False
                ),
                "debiased",
                r,
                seed_idx,
            )
    write_csv(
        out_dir / "traces.csv",
        ["algorithm", "R", "seed", "t", "loss", "grad_norm_sq", "diverged"],
        trace_rows,
    )
    write_csv(
        out_dir / "summary.csv",
        ["algorithm", "R", "seed", "terminal_loss", "diverged"],
        summary_rows,
    )
    write_manifest(out_dir, cfg)
    return summary_rows


# ---------------------------------------------------------------------------
# mixing / estimator-rate / evolution

def run_mixing(cfg: dict, out_dir) -> list[tuple]:
    out_dir = _prepare(out_dir)
    n = int(cfg["chain"]["n_clients"])
    b = int(cfg["chain"]["batch_size"])
    m = n // b
    profile = build_profile(cfg["profile"], n)
    r_grid = cfg["r_grid"] if cfg["r_grid"] is not None else list(range(m))
    cap = int(cfg["exact_cap"])
    k_max = int(cfg["k_max"])
    eps = float(cfg["eps"])
    mixing_rows = []
    tv_rows = []
    for r in r_grid:
        chain_cfg = ChainConfig(n, b, int(r))
        if state_count(chain_cfg) > cap:
            mixing_rows.append((int(r), None, "infeasible"))
            continue
        chain = enumerate_exact_chain(profile, chain_cfg, max_states=cap)
        series = tv_decay(chain, k_max)
        for k, val in enumerate(series):
            tv_rows.append((int(r), k, float(val)))
        if chain_cfg.is_cyclic and m > 1:
            mixing_rows.append((int(r), None, "periodic"))
        else:
            mixing_rows.append((int(r), mixing_time(chain, eps=eps), "ok"))
    write_csv(out_dir / "mixing.csv", ["R", "tau_mix", "status"], mixing_rows)
    write_csv(out_dir / "tv_decay.csv", ["R", "k", "d_tv"], tv_rows)
    write_manifest(out_dir, cfg)
    return mixing_rows


def run_estimator_rate(cfg: dict, out_dir) -> np.ndarray:
    out_dir = _prepare(out_dir)
    chain = cfg["chain"]
    chain_cfg = ChainConfig(
        int(chain["n_clients"]), int(chain["batch_size"]), int(chain["min_separation"])
    )
    profile = build_profile(cfg["profile"], chain_cfg.n_clients)
    trace = mean_estimator_error_trace(
        profile,
        chain_cfg,
        horizon=int(cfg["horizon"]),
        n_seeds=int(cfg["n_seeds"]),
        seed=int(cfg["seed"]),
    )
    rows = [(t + 1, float(v)) for t, v in enumerate(trace)]
    write_csv(out_dir / "estimator_rate.csv", ["t", "mean_sq_inf_error"], rows)
    write_manifest(out_dir, cfg)
    return trace


def run_evolution(cfg: dict, out_dir) -> list[tuple]:
    out_dir = _prepare(out_dir)
    n = int(cfg["chain"]["n_clients"])
    b = int(cfg["chain"]["batch_size"])
    profile = build_profile(cfg["profile"], n)
    cap = int(cfg["exact_cap"])
    rows = []
    master = seed_sequence(int(cfg["seed"]))
    r_grid = [int(r) for r in cfg["r_grid"]]
    ref_mc = cfg["reference_mc"]
    for r, child in zip(r_grid, master.spawn(len(r_grid))):
        chain_cfg = ChainConfig(n, b, r)
        run_seed, ref_seed = child.spawn(2)
        if chain_cfg.is_cyclic:
            reference = np.full(n, 1.0 / n)
        elif state_count(chain_cfg) <= cap:
            reference = enumerate_exact_chain(profile, chain_cfg, max_states=cap).marginal
        else:
            replicas = int(ref_mc["replicas"])
            burn_in = int(ref_mc["burn_in"])
            horizon = burn_in + math.ceil(int(ref_mc["rounds"]) / replicas)
            reference = estimate_pi(
                profile, chain_cfg, horizon, replicas, burn_in=burn_in, seed=ref_seed
            ).pi_hat
        evo = marginal_evolution(
            profile,
            chain_cfg,
            horizon=int(cfg["horizon"]),
            replicas=int(cfg["replicas"]),
            seed=run_seed,
            reference_pi=reference,
        )
        # Companion view: running any-position frequency (the estimator's
        # convergence target), which keeps converging even for cyclic R.
        cum = np.cumsum(evo.any_position, axis=0)
        cum /= np.arange(1, cum.shape[0] + 1)[:, None]
        tv_cum = 0.5 * np.abs(cum - reference).sum(axis=1)
        for t in range(len(evo.tv_to_reference)):
            rows.append((t, r, float(evo.tv_to_reference[t]), float(tv_cum[t])))
    write_csv(
        out_dir / "evolution.csv",
        ["t", "R", "tv_to_pi", "tv_cumulative_to_pi"],
        rows,
    )
    write_manifest(out_dir, cfg)
    return rows


RUNNERS = {
    "pi-vs-r": run_pi_vs_r,
    "toy-bias": run_toy_bias,
    "synth-debias": run_synth_debias,
    "mixing": run_mixing,
    "estimator-rate": run_estimator_rate,
    "evolution": run_evolution,
}
