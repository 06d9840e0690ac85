"""Federated training loops driven by a participation chain.

All variants share one round loop: sample a batch, let each sampled client
run K full-gradient local steps from the server model, then average the B
final local models. They differ only in the per-client stepsize scaling
nu applied inside the local steps:

  vanilla FedAvg            nu = 1
  debiasing FedAvg          nu = (1/N) / lambda_t^i with the online
                            frequency estimator lambda_t^i = t_i/((t+1)B)
  known-marginal oracle     nu = (1/N) / pi_i, pi fixed
  oracle-uniform baseline   nu = 1, batches drawn iid uniformly with no
                            separation constraint

nu is computed as (1/N)/lambda rather than 1/(lambda*N): algebraically the
same, but freezing lambda at 1/N then yields exactly nu = 1.0 in floating
point, so the frozen run reduces to vanilla FedAvg bitwise.

Runs are deterministic given (problem, seed): participation is the only
randomness and local gradients are exact.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .chain import AvailabilityProfile, ChainConfig, ChainState, as_generator
from .errors import ValidationError
from .objectives import Problem, global_metrics

DIVERGENCE_CAP = 1e12
_ITERATE_CAP = 1e100  # squaring must stay below float max in loss evals


@dataclass(frozen=True)
class HyperParams:
    """Local step count K, stepsize, round budget T and eval cadence."""

    local_steps: int
    stepsize: float
    rounds: int
    eval_every: int = 1

    def __post_init__(self):
        if self.local_steps < 1 or self.rounds < 1 or self.eval_every < 1:
            raise ValidationError("local_steps, rounds and eval_every must be >= 1")
        if not self.stepsize > 0:
            raise ValidationError("stepsize must be positive")


@dataclass
class RunTrace:
    """Per-eval-round records plus the final iterate for one seeded run."""

    algorithm: str
    seed: int | None
    eval_rounds: np.ndarray
    losses: np.ndarray
    grad_norms_sq: np.ndarray
    batches: list[tuple[int, ...]]
    lambdas: list[np.ndarray] | None
    final_x: object
    final_loss: float
    final_grad_norm_sq: float
    diverged: bool
    config: dict

    def mean_grad_norm_sq(self) -> float:
        """Running average of the recorded squared gradient norms (the
        deterministic stand-in for a uniformly drawn iterate)."""
        return float(np.mean(self.grad_norms_sq))


class _DebiasPolicy:
    """Algorithm state for the counter-based reweighting."""

    def __init__(self, n_clients: int, batch_size: int, frozen_lambda: float | None):
        self.counts = [0] * n_clients
        self.batch_size = batch_size
        self.inv_n = 1.0 / n_clients
        self.frozen = frozen_lambda

    def nus(self, t: int, batch) -> list[float]:
        counts = self.counts
        inv_n = self.inv_n
        frozen = self.frozen
        denom = (t + 1) * self.batch_size
        out = []
        for i in batch:
            counts[i] += 1
            lam = frozen if frozen is not None else counts[i] / denom
            out.append(inv_n / lam)
        return out

    def lam_snapshot(self, t: int) -> np.ndarray:
        return np.asarray(self.counts, dtype=float) / ((t + 1) * self.batch_size)


def _run_loop(
    problem: Problem,
    hyper: HyperParams,
    next_batch,
    nus_for,
    algorithm: str,
    seed,
    config_echo: dict,
    lam_snapshot=None,
) -> RunTrace:
    k_steps, alpha, rounds, ev = (
        hyper.local_steps,
        hyper.stepsize,
        hyper.rounds,
        hyper.eval_every,
    )
    x = problem.init_point()
    scalar = problem.scalar
    if problem.fingerprint is not None:
        config_echo = config_echo | {"dataset_fingerprint": problem.fingerprint}
    eval_rounds: list[int] = []
    losses: list[float] = []
    grad_sq: list[float] = []
    batches: list[tuple[int, ...]] = []
    lambdas: list[np.ndarray] | None = [] if lam_snapshot is not None else None
    diverged = False
    grads = problem.grad_fns
    step_range = range(k_steps)
    for t in range(rounds):
        batch = next_batch(t)
        nus = nus_for(t, batch)
        if t % ev == 0:
            try:
                f, g2 = global_metrics(problem, x)
            except OverflowError:
                f, g2 = math.inf, math.inf
            eval_rounds.append(t)
            losses.append(f)
            grad_sq.append(g2)
            batches.append(batch)
            if lambdas is not None:
                lambdas.append(lam_snapshot(t))
            if not math.isfinite(f) or f > DIVERGENCE_CAP:
                diverged = True
                break
        finals = []
        for i, nu in zip(batch, nus):
            xi = x
            c = alpha * nu
            g = grads[i]
            for _ in step_range:
                xi = xi - c * g(xi)
            finals.append(xi)
        acc = finals[0]
        for f_i in finals[1:]:
            acc = acc + f_i
        x = acc / len(finals)
        if scalar:
            if not math.isfinite(x) or abs(x) > _ITERATE_CAP:
                diverged = True
                break
        elif not np.all(np.isfinite(x)) or np.abs(x).max() > _ITERATE_CAP:
            diverged = True
            break
    if diverged:
        final_loss, final_g2 = math.inf, math.inf
    else:
        try:
            final_loss, final_g2 = global_metrics(problem, x)
        except OverflowError:
            final_loss, final_g2 = math.inf, math.inf
        if not math.isfinite(final_loss) or final_loss > DIVERGENCE_CAP:
            diverged = True
    return RunTrace(
        algorithm=algorithm,
        seed=None if seed is None or not isinstance(seed, (int, np.integer)) else int(seed),
        eval_rounds=np.asarray(eval_rounds, dtype=np.int64),
        losses=np.asarray(losses),
        grad_norms_sq=np.asarray(grad_sq),
        batches=batches,
        lambdas=lambdas,
        final_x=x,
        final_loss=final_loss,
        final_grad_norm_sq=final_g2,
        diverged=diverged,
        config=config_echo,
    )


def _check_problem(problem: Problem, config: ChainConfig) -> None:
    if problem.n_clients != config.n_clients:
        raise ValidationError(
            f"problem has {problem.n_clients} clients, chain config {config.n_clients}"
        )


def _echo(algorithm, hyper, config=None, extra=None) -> dict:
    echo = {
        "algorithm": algorithm,
        "local_steps": hyper.local_steps,
        "stepsize": hyper.stepsize,
        "rounds": hyper.rounds,
        "eval_every": hyper.eval_every,
    }
    if config is not None:
        echo |= {
            "n_clients": config.n_clients,
            "batch_size": config.batch_size,
            "min_separation": config.min_separation,
        }
    if extra:
        echo |= extra
    return echo


def run_fedavg(
    problem: Problem,
    profile: AvailabilityProfile,
    config: ChainConfig,
    hyper: HyperParams,
    seed=None,
) -> RunTrace:
    """Vanilla FedAvg under the minimum-separation participation chain."""
    _check_problem(problem, config)
    state = ChainState(config, profile, seed=seed)
    ones = [1.0] * config.batch_size
    return _run_loop(
        problem,
        hyper,
        lambda t: state.advance(),
        lambda t, batch: ones,
        "fedavg",
        seed,
        _echo("fedavg", hyper, config),
    )


def run_debiased_fedavg(
    problem: Problem,
    profile: AvailabilityProfile,
    config: ChainConfig,
    hyper: HyperParams,
    seed=None,
    frozen_lambda: float | None = None,
    record_lambda: bool = True,
) -> RunTrace:
    """Debiasing FedAvg: sampled clients scale their local steps by
    nu = (1/N)/lambda_t^i from the running participation frequency.

    frozen_lambda pins the estimator (frozen_lambda = 1/N reproduces
    vanilla FedAvg bitwise on the same seed).
    """
    _check_problem(problem, config)
    state = ChainState(config, profile, seed=seed)
    policy = _DebiasPolicy(config.n_clients, config.batch_size, frozen_lambda)
    return _run_loop(
        problem,
        hyper,
        lambda t: state.advance(),
        policy.nus,
        "debiased",
        seed,
        _echo("debiased", hyper, config, {"frozen_lambda": frozen_lambda}),
        lam_snapshot=policy.lam_snapshot if record_lambda else None,
    )


def run_known_pi(
    problem: Problem,
    profile: AvailabilityProfile,
    config: ChainConfig,
    hyper: HyperParams,
    pi,
    seed=None,
) -> RunTrace:
    """Debiasing with the marginal known in advance: nu_i = (1/N)/pi_i."""
    _check_problem(problem, config)
    pi = np.asarray(pi, dtype=float)
    if pi.size != config.n_clients or not np.all(pi > 0):
        raise ValidationError("pi must be strictly positive with one entry per client")
    if abs(float(pi.sum()) - 1.0) > 1e-9:
        raise ValidationError("pi must sum to 1")
    state = ChainState(config, profile, seed=seed)
    inv_n = 1.0 / config.n_clients
    nus_all = [inv_n / float(v) for v in pi]
    return _run_loop(
        problem,
        hyper,
        lambda t: state.advance(),
        lambda t, batch: [nus_all[i] for i in batch],
        "known_pi",
        seed,
        _echo("known_pi", hyper, config, {"pi": [float(v) for v in pi]}),
    )


def run_oracle_uniform(
    problem: Problem, hyper: HyperParams, batch_size: int, seed=None
) -> RunTrace:
    """FedAvg with iid uniform batches and no separation constraint: the
    unbiased reference curve."""
    n = problem.n_clients
    if not 1 <= batch_size <= n:
        raise ValidationError("batch_size must be in [1, n_clients]")
    rng = as_generator(seed)
    ones = [1.0] * batch_size

    if batch_size == n:
        def next_batch(t):
            return tuple(range(n))
    elif batch_size == 1:
        def next_batch(t):
            return (int(rng.integers(n)),)
    else:
        def next_batch(t):
            return tuple(int(v) for v in rng.choice(n, size=batch_size, replace=False))

    return _run_loop(
        problem,
        hyper,
        next_batch,
        lambda t, batch: ones,
        "oracle_uniform",
        seed,
        _echo("oracle_uniform", hyper, extra={"batch_size": batch_size, "n_clients": n}),
    )


# ---------------------------------------------------------------------------
# Trace export

def export_trace(trace: RunTrace, directory, stem: str = "trace") -> None:
    """CSV of the eval records plus a JSON manifest with the config echo,
    seed and (when present) the dataset fingerprint."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / f"{stem}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "loss", "grad_norm_sq", "batch_members", "lambda_json"])
        for k in range(len(trace.eval_rounds)):
            lam = (
                json.dumps([float(v) for v in trace.lambdas[k]])
                if trace.lambdas is not None
                else ""
            )
            writer.writerow(
                [
                    int(trace.eval_rounds[k]),
                    repr(float(trace.losses[k])),
                    repr(float(trace.grad_norms_sq[k])),
                    "|".join(str(i) for i in trace.batches[k]),
                    lam,
                ]
            )
    manifest = {
        "algorithm": trace.algorithm,
        "seed": trace.seed,
        "config": trace.config,
        "diverged": trace.diverged,
        "final_loss": trace.final_loss,
        "final_grad_norm_sq": trace.final_grad_norm_sq,
    }
    with open(directory / f"{stem}.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
