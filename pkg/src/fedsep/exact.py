"""Exact augmented-chain analysis for the participation process.

The R-round memory makes participation an R-order Markov chain over ordered
batches; augmenting the state to the full length-R disjoint history window
yields a first-order chain whose transition matrix is sparse (each window
can only be followed by batches drawn from the currently available clients).
This module enumerates that chain exactly, computes its stationary
distribution and the per-client marginal, and provides the total-variation
decay, mixing-time, period and column-sum diagnostics.

States are enumerated in lexicographic order of the flattened index tuple
(most recent batch first), so matrices and CSV dumps are reproducible.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import csr_array

from .chain import AvailabilityProfile, ChainConfig, OrderedBatch
from .errors import FeasibilityError, NumericalError, ValidationError

DEFAULT_STATE_CAP = 2_000_000
DEFAULT_WORK_CAP = 2e9
_DENSE_ENTRY_CAP = 2e8

State = tuple[OrderedBatch, ...]


def permutation_count(n: int, b: int) -> int:
    """Number of ordered b-subsets of an n-set (0 when b > n)."""
    if b > n:
        return 0
    return math.perm(n, b)


def state_count(config: ChainConfig) -> int:
    """Closed-form size of the augmented state space: the product of
    permutation counts over the R window slots."""
    n, b, r = config.n_clients, config.batch_size, config.min_separation
    d = 1
    for k in range(r):
        d *= permutation_count(n - k * b, b)
    return d


@dataclass
class ExactChain:
    """Enumerated augmented chain with its matrices and distributions.

    transition is row-stochastic, shape (d, d); observation maps window
    states to the distribution of the next first-slot client, shape (d, N);
    stationary/marginal are filled by enumerate_exact_chain.
    """

    config: ChainConfig
    profile: AvailabilityProfile
    states: list[State]
    transition: csr_array
    observation: csr_array
    stationary: np.ndarray | None = None
    marginal: np.ndarray | None = None

    @property
    def n_states(self) -> int:
        return len(self.states)


def _ordered_batches(avail: tuple[int, ...], b: int):
    return itertools.permutations(avail, b)


def _enumerate_states(n: int, b: int, r: int) -> list[State]:
    states: list[State] = []

    def extend(prefix: tuple[OrderedBatch, ...], remaining: tuple[int, ...]):
        if len(prefix) == r:
            states.append(prefix)
            return
        for batch in _ordered_batches(remaining, b):
            taken = set(batch)
            extend(prefix + (batch,), tuple(i for i in remaining if i not in taken))

    extend((), tuple(range(n)))
    return states


def enumerate_exact_chain(
    profile: AvailabilityProfile,
    config: ChainConfig,
    max_states: int = DEFAULT_STATE_CAP,
    tol: float = 1e-12,
    max_iters: int = 1_000_000,
) -> ExactChain:
    """Build the exact augmented chain and populate its distributions.

    Raises FeasibilityError when the closed-form state count d(M, R)
    exceeds max_states. For R = 0 the chain is memoryless: a single empty
    window whose observation row is the exact one-round marginal.
    """
    if profile.n_clients != config.n_clients:
        raise ValidationError("profile/config client counts disagree")
    d = state_count(config)
    if d > max_states:
        raise FeasibilityError(
            f"exact chain needs d(M,R)={d} states, cap is {max_states}"
        )
    n, b, r = config.n_clients, config.batch_size, config.min_separation
    p = profile.p

    if r == 0:
        states: list[State] = [()]
        transition = csr_array(np.ones((1, 1)))
        weights = {}
        for batch in _ordered_batches(tuple(range(n)), b):
            w = float(sum(p[i] for i in batch))
            weights[batch[0]] = weights.get(batch[0], 0.0) + w
        total = sum(weights.values())
        row = np.zeros(n)
        for j, w in weights.items():
            row[j] = w / total
        observation = csr_array(row.reshape(1, n))
    else:
        states = _enumerate_states(n, b, r)
        index = {s: k for k, s in enumerate(states)}
        rows: list[int] = []
        cols: list[int] = []
        vals: list[float] = []
        obs_rows: list[int] = []
        obs_cols: list[int] = []
        obs_vals: list[float] = []
        all_clients = range(n)
        for k, window in enumerate(states):
            blocked = {i for batch in window for i in batch}
            avail = tuple(i for i in all_clients if i not in blocked)
            batches = list(_ordered_batches(avail, b))
            weights = [float(sum(p[i] for i in batch)) for batch in batches]
            denom = sum(weights)
            first_mass: dict[int, float] = {}
            for batch, w in zip(batches, weights):
                prob = w / denom
                rows.append(k)
                cols.append(index[(batch,) + window[:-1]])
                vals.append(prob)
                first_mass[batch[0]] = first_mass.get(batch[0], 0.0) + prob
            for j, mass in first_mass.items():
                obs_rows.append(k)
                obs_cols.append(j)
                obs_vals.append(mass)
        transition = csr_array((vals, (rows, cols)), shape=(d, d))
        observation = csr_array((obs_vals, (obs_rows, obs_cols)), shape=(d, n))

    chain = ExactChain(config, profile, states, transition, observation)
    chain.stationary = stationary_distribution(chain, tol=tol, max_iters=max_iters)
    chain.marginal = marginal_participation(chain)
    return chain


def _l1(v: np.ndarray) -> float:
    return float(np.abs(v).sum())


def stationary_distribution(
    chain: ExactChain, tol: float = 1e-12, max_iters: int = 1_000_000
) -> np.ndarray:
    """Stationary (or Perron, in the cyclic case) distribution of the chain.

    Plain power iteration for the aperiodic regime R <= M-2; for R = M-1
    the chain is periodic with period M, so the returned vector is the
    Cesaro average of power-iteration iterates over full period windows.
    The result satisfies ||zeta^T P - zeta^T||_1 <= tol, is strictly
    positive, and sums to one; NumericalError (with the final residual)
    otherwise.
    """
    P = chain.transition
    d = P.shape[0]
    v = np.full(d, 1.0 / d)
    residual = math.inf
    if chain.config.is_cyclic and chain.config.n_batches > 1:
        m = chain.config.n_batches
        block_sum = np.zeros(d)
        block_len = 0
        for _ in range(max_iters):
            block_sum += v
            block_len += 1
            v = v @ P
            if block_len == m:
                w = block_sum / m
                residual = _l1(w @ P - w)
                if residual <= tol:
                    return _finalize_stationary(w, residual)
                block_sum = np.zeros(d)
                block_len = 0
    else:
        for _ in range(max_iters):
            v_next = v @ P
            residual = _l1(v_next - v)
            if residual <= tol:
                return _finalize_stationary(v, residual)
            v = v_next
    raise NumericalError(
        f"power iteration did not reach tol={tol} in {max_iters} iterations "
        f"(residual {residual:.3e})",
        residual=residual,
    )


def _finalize_stationary(v: np.ndarray, residual: float) -> np.ndarray:
    v = v / v.sum()
    if not np.all(v > 0.0):
        raise NumericalError(
            "stationary vector has nonpositive entries", residual=residual
        )
    return v


def marginal_participation(chain: ExactChain) -> np.ndarray:
    """Per-client stationary probability of holding the first batch slot.

    Scaled by B this is the long-run per-round participation frequency;
    the first-slot convention keeps the vector a probability distribution.
    """
    if chain.stationary is None:
        raise ValidationError("chain.stationary must be populated first")
    pi = chain.stationary @ chain.observation
    pi = np.asarray(pi).ravel()
    return pi / pi.sum()


def distance_to_uniform(pi: np.ndarray) -> float:
    """L1 distance from a probability vector to the uniform one."""
    pi = np.asarray(pi, dtype=float)
    if abs(float(pi.sum()) - 1.0) > 1e-6:
        raise ValidationError("pi must sum to 1")
    return _l1(pi - 1.0 / pi.size)


def _check_dense_budget(d: int, steps: int, max_work: float) -> None:
    if d * d > _DENSE_ENTRY_CAP:
        raise FeasibilityError(
            f"dense propagation of a {d}x{d} matrix exceeds the memory guard"
        )
    if steps * max(d * d, 8) > max_work:
        raise FeasibilityError(
            f"{steps} steps on a {d}-state chain exceed the work budget {max_work:.0e}"
        )


def tv_decay(
    chain: ExactChain, k_max: int, max_work: float = DEFAULT_WORK_CAP
) -> np.ndarray:
    """Worst-case total variation to stationarity after k steps, k = 0..k_max.

    d_TV(P^k, 1 zeta^T) = (1/2) max over start states of the L1 distance
    between the k-step row and zeta. Nonincreasing in k for any chain with
    invariant zeta, including the cyclic one.
    """
    if chain.stationary is None:
        raise ValidationError("chain.stationary must be populated first")
    d = chain.n_states
    _check_dense_budget(d, max(k_max, 1), max_work)
    zeta = chain.stationary
    rows = np.eye(d)
    out = np.empty(k_max + 1)
    for k in range(k_max + 1):
        out[k] = 0.5 * float(np.abs(rows - zeta).sum(axis=1).max())
        if k < k_max:
            rows = rows @ chain.transition
    return out


def mixing_time(
    chain: ExactChain,
    eps: float = 0.25,
    max_steps: int = 10_000,
    max_work: float = DEFAULT_WORK_CAP,
) -> int:
    """Smallest k >= 1 with d_TV(P^k, 1 zeta^T) <= eps.

    Only defined for the aperiodic regime R <= M-2; the cyclic chain never
    mixes and raises ValidationError.
    """
    if chain.config.is_cyclic and chain.config.n_batches > 1:
        raise ValidationError("mixing time is undefined for the cyclic chain R = M-1")
    if chain.stationary is None:
        raise ValidationError("chain.stationary must be populated first")
    d = chain.n_states
    _check_dense_budget(d, 1, max_work)
    zeta = chain.stationary
    rows = np.eye(d)
    work = 0.0
    for k in range(1, max_steps + 1):
        rows = rows @ chain.transition
        work += d * d
        if work > max_work:
            raise FeasibilityError(
                f"mixing-time scan exceeded the work budget {max_work:.0e} at step {k}"
            )
        if 0.5 * float(np.abs(rows - zeta).sum(axis=1).max()) <= eps:
            return k
    raise FeasibilityError(f"d_TV did not drop below {eps} within {max_steps} steps")


def chain_period(chain: ExactChain) -> int:
    """Period of the (irreducible) chain: gcd of cycle lengths.

    Computed from a BFS of the transition digraph; the gcd of
    depth(u) + 1 - depth(v) over all edges u -> v equals the common period
    of every state in an irreducible chain.
    """
    P = chain.transition
    d = chain.n_states
    indptr, indices = P.indptr, P.indices
    depth = np.full(d, -1, dtype=np.int64)
    depth[0] = 0
    frontier = [0]
    order = [0]
    while frontier:
        nxt = []
        for u in frontier:
            for v in indices[indptr[u] : indptr[u + 1]]:
                if depth[v] < 0:
                    depth[v] = depth[u] + 1
                    nxt.append(int(v))
                    order.append(int(v))
        frontier = nxt
    g = 0
    for u in order:
        du = depth[u] + 1
        for v in indices[indptr[u] : indptr[u + 1]]:
            g = math.gcd(g, int(du - depth[v]))
    return g if g > 0 else 1


def column_sums(chain: ExactChain) -> np.ndarray:
    """Per-column sums of the transition matrix (uniformity diagnostic:
    all ones exactly when the marginal is uniform)."""
    return np.asarray(chain.transition.sum(axis=0)).ravel()


# ---------------------------------------------------------------------------
# Exports

def format_state(state: State) -> str:
    return ";".join(",".join(str(i) for i in batch) for batch in state)


def export_exact_chain(chain: ExactChain, directory) -> None:
    """Dump the transition triples to CSV plus a JSON sidecar with the
    canonical state list, distributions, size and period."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    labels = [format_state(s) for s in chain.states]
    coo = chain.transition.tocoo()
    with open(directory / "transition.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row_state", "col_state", "probability"])
        for r, c, v in zip(coo.row, coo.col, coo.data):
            writer.writerow([labels[r], labels[c], repr(float(v))])
    sidecar = {
        "n_clients": chain.config.n_clients,
        "batch_size": chain.config.batch_size,
        "min_separation": chain.config.min_separation,
        "d": chain.n_states,
        "period": chain_period(chain),
        "states": labels,
        "zeta": [float(z) for z in chain.stationary],
        "pi": [float(x) for x in chain.marginal],
        "p": [float(x) for x in chain.profile.p],
    }
    with open(directory / "chain.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)


def export_marginal(pi: np.ndarray, profile: AvailabilityProfile, path) -> None:
    """CSV of per-client marginal vs profile: client_id, pi, p, abs deviation
    from uniform."""
    pi = np.asarray(pi, dtype=float)
    n = pi.size
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "pi", "p", "abs_dev_from_uniform"])
        for i in range(n):
            writer.writerow(
                [i, repr(float(pi[i])), repr(float(profile.p[i])), repr(abs(float(pi[i]) - 1.0 / n))]
            )
