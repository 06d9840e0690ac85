"""Monte Carlo estimation of the participation marginal and its transient.

Covers instances whose augmented state space is too large to enumerate:
replica-averaged estimates of the stationary marginal, the round-by-round
sampling distribution, and the error trace of the online frequency
estimator used by the debiasing algorithm. Replica streams are spawned
from the master seed with SeedSequence, so results do not depend on any
execution ordering.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .chain import AvailabilityProfile, ChainConfig, ChainState, as_generator, seed_sequence
from .errors import FeasibilityError, ValidationError
from .exact import enumerate_exact_chain, mixing_time

_AUTO_EXACT_CAP = 200_000


@dataclass
class FrequencyEstimator:
    """Online participation-frequency estimator: lambda_i = t_i / ((t+1) B).

    counts holds per-client participation totals t_i; rounds_seen is t+1
    after round t has been observed.
    """

    n_clients: int
    batch_size: int
    counts: np.ndarray = field(init=False)
    rounds_seen: int = field(init=False, default=0)

    def __post_init__(self):
        self.counts = np.zeros(self.n_clients, dtype=np.int64)

    def observe(self, batch) -> None:
        for i in batch:
            self.counts[i] += 1
        self.rounds_seen += 1

    def lam(self) -> np.ndarray:
        """Current frequency vector; zero for never-sampled clients."""
        if self.rounds_seen == 0:
            return np.zeros(self.n_clients)
        return self.counts / (self.rounds_seen * self.batch_size)


@dataclass(frozen=True)
class MarginalEstimate:
    """Replica-averaged estimate of the stationary marginal."""

    pi_hat: np.ndarray
    stderr: np.ndarray
    replicas: int
    horizon: int
    burn_in: int


def _replica_rngs(seed, replicas: int) -> list[np.random.Generator]:
    return [as_generator(s) for s in seed_sequence(seed).spawn(replicas)]


def default_burn_in(
    profile: AvailabilityProfile, config: ChainConfig, fallback: int = 1000
) -> int:
    """20x the exact mixing time when the chain is small enough to
    enumerate, else the configured fallback."""
    try:
        chain = enumerate_exact_chain(profile, config, max_states=5000)
        return 20 * mixing_time(chain)
    except (FeasibilityError, ValidationError):
        return fallback


def estimate_pi(
    profile: AvailabilityProfile,
    config: ChainConfig,
    horizon: int,
    replicas: int,
    burn_in: int | None = None,
    seed=None,
) -> MarginalEstimate:
    """Estimate the stationary marginal from participation frequencies.

    Each replica runs an independent chain for `horizon` rounds; client i's
    any-position participation count over the rounds after `burn_in`,
    divided by B times the rounds counted, estimates pi_i. The estimate is
    the across-replica mean and stderr the across-replica standard error.
    """
    if burn_in is None:
        burn_in = default_burn_in(profile, config)
    if replicas < 1:
        raise ValidationError("replicas must be >= 1")
    if horizon <= burn_in:
        raise ValidationError(f"horizon={horizon} must exceed burn_in={burn_in}")
    n, b = config.n_clients, config.batch_size
    counted = horizon - burn_in
    per_replica = np.empty((replicas, n))
    for k, rng in enumerate(_replica_rngs(seed, replicas)):
        state = ChainState(config, profile, seed=rng)
        counts = np.zeros(n, dtype=np.int64)
        for t in range(horizon):
            batch = state.advance()
            if t >= burn_in:
                for i in batch:
                    counts[i] += 1
        per_replica[k] = counts / (b * counted)
    pi_hat = per_replica.mean(axis=0)
    if replicas > 1:
        stderr = per_replica.std(axis=0, ddof=1) / np.sqrt(replicas)
    else:
        stderr = np.zeros(n)
    return MarginalEstimate(pi_hat, stderr, replicas, horizon, burn_in)


@dataclass(frozen=True)
class EvolutionEstimate:
    """Round-by-round sampling distribution across replicas.

    first_slot[t, i] is the fraction of replicas in which client i held the
    first batch slot at round t; any_position is the B-scaled participation
    frequency. tv_to_reference tracks the total-variation distance from
    first_slot[t] to the reference marginal.
    """

    first_slot: np.ndarray
    any_position: np.ndarray
    tv_to_reference: np.ndarray
    reference_pi: np.ndarray


def marginal_evolution(
    profile: AvailabilityProfile,
    config: ChainConfig,
    horizon: int,
    replicas: int,
    seed=None,
    reference_pi=None,
) -> EvolutionEstimate:
    """Estimate the transient sampling distribution for t = 0..horizon.

    When reference_pi is omitted, the exact marginal is used if the chain
    is enumerable under a small cap; otherwise the tail mean of the
    first-slot series stands in (documented fallback for large instances).
    """
    if replicas < 1:
        raise ValidationError("replicas must be >= 1")
    n, b = config.n_clients, config.batch_size
    first = np.zeros((horizon + 1, n))
    anyp = np.zeros((horizon + 1, n))
    for rng in _replica_rngs(seed, replicas):
        state = ChainState(config, profile, seed=rng)
        for t in range(horizon + 1):
            batch = state.advance()
            first[t, batch[0]] += 1.0
            for i in batch:
                anyp[t, i] += 1.0
    first /= replicas
    anyp /= replicas * b
    if reference_pi is None:
        try:
            chain = enumerate_exact_chain(profile, config, max_states=_AUTO_EXACT_CAP)
            reference_pi = chain.marginal
        except FeasibilityError:
            tail = max(1, (horizon + 1) // 10)
            reference_pi = first[-tail:].mean(axis=0)
    reference_pi = np.asarray(reference_pi, dtype=float)
    tv = 0.5 * np.abs(first - reference_pi).sum(axis=1)
    return EvolutionEstimate(first, anyp, tv, reference_pi)


def _reference_marginal(profile, config, reference_pi):
    if reference_pi is not None:
        return np.asarray(reference_pi, dtype=float)
    try:
        return enumerate_exact_chain(profile, config, max_states=_AUTO_EXACT_CAP).marginal
    except FeasibilityError:
        return estimate_pi(
            profile, config, horizon=200_000, replicas=8, seed=np.random.SeedSequence(0)
        ).pi_hat


def estimator_error_trace(
    profile: AvailabilityProfile,
    config: ChainConfig,
    horizon: int,
    seed=None,
    reference_pi=None,
) -> np.ndarray:
    """Per-round squared sup-norm error of the frequency estimator.

    Entry t is ||lambda_t - pi||_inf^2 after round t. The reference is the
    exact marginal when enumerable, else a high-precision Monte Carlo
    estimate (or pass reference_pi explicitly).
    """
    pi = _reference_marginal(profile, config, reference_pi)
    state = ChainState(config, profile, seed=as_generator(seed))
    est = FrequencyEstimator(config.n_clients, config.batch_size)
    err = np.empty(horizon)
    for t in range(horizon):
        est.observe(state.advance())
        err[t] = float(np.max(np.abs(est.lam() - pi))) ** 2
    return err


def mean_estimator_error_trace(
    profile: AvailabilityProfile,
    config: ChainConfig,
    horizon: int,
    n_seeds: int,
    seed=None,
    reference_pi=None,
) -> np.ndarray:
    """Across-seed average of estimator_error_trace, for rate fitting."""
    pi = _reference_marginal(profile, config, reference_pi)
    acc = np.zeros(horizon)
    for child in seed_sequence(seed).spawn(n_seeds):
        acc += estimator_error_trace(profile, config, horizon, seed=child, reference_pi=pi)
    return acc / n_seeds


def export_estimate(estimate: MarginalEstimate, path) -> None:
    """CSV of the replica-averaged marginal: client, pi_hat, stderr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client", "pi_hat", "stderr"])
        for i in range(estimate.pi_hat.size):
            writer.writerow([i, repr(float(estimate.pi_hat[i])), repr(float(estimate.stderr[i]))])
