"""Client participation process with a minimum-separation constraint.

Every round the server samples an ordered batch of B clients out of N.
A client that participated within the last R rounds is blocked; among the
available ones, the unordered batch S is drawn with probability
proportional to sum(p_i for i in S), and the ordering is uniform over the
B! permutations. ChainState is the live, seeded sampler for that process.

All randomness flows through an explicit numpy Generator (PCG64). Streams
for replicas are derived with SeedSequence.spawn, never by reusing a seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

OrderedBatch = tuple[int, ...]

_PROB_TOL = 1e-12
_UNIFORM_BUFFER = 4096


def as_generator(seed) -> np.random.Generator:
    """Coerce an int / SeedSequence / Generator / None into a Generator."""
    return np.random.default_rng(seed)


def seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


@dataclass(frozen=True)
class AvailabilityProfile:
    """Per-client availability probabilities: strictly positive, sum to 1."""

    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValidationError("profile must be a non-empty 1-d vector")
        if not np.all(p > 0.0):
            raise ValidationError("availability probabilities must be strictly positive")
        if abs(float(p.sum()) - 1.0) > _PROB_TOL:
            raise ValidationError(f"probabilities must sum to 1, got {p.sum()!r}")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    @property
    def n_clients(self) -> int:
        return int(self.p.size)


def make_profile(weights) -> AvailabilityProfile:
    """Normalize positive weights into an AvailabilityProfile.

    Raises ValidationError on an empty vector or any nonpositive weight.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValidationError("weights must be a non-empty 1-d vector")
    if not np.all(np.isfinite(w)) or not np.all(w > 0.0):
        raise ValidationError("all weights must be finite and strictly positive")
    return AvailabilityProfile(w / w.sum())


def power_law_profile(n: int, exponent: float = 1.5) -> AvailabilityProfile:
    """Long-tailed profile with p_i proportional to i**(-exponent), i = 1..n."""
    idx = np.arange(1, n + 1, dtype=float)
    return make_profile(idx ** (-exponent))


@dataclass(frozen=True)
class ChainConfig:
    """Population/batch/separation parameters of the participation process.

    n_clients = n_batches * batch_size exactly, and the minimum separation
    satisfies 0 <= min_separation <= n_batches - 1 (any larger value would
    leave rounds with fewer than batch_size available clients).
    """

    n_clients: int
    batch_size: int
    min_separation: int

    def __post_init__(self):
        n, b, r = self.n_clients, self.batch_size, self.min_separation
        if n < 1 or b < 1:
            raise ValidationError("n_clients and batch_size must be >= 1")
        if b > n:
            raise ValidationError(f"batch_size={b} exceeds n_clients={n}")
        if r == 0:
            return  # memoryless sampling is well defined for any B <= N
        if n % b != 0:
            raise ValidationError(f"n_clients={n} must be divisible by batch_size={b}")
        m = n // b
        if not 0 <= r <= m - 1:
            raise ValidationError(
                f"min_separation={r} out of range [0, {m - 1}] for M={m} batches"
            )

    @property
    def n_batches(self) -> int:
        return self.n_clients // self.batch_size

    @property
    def is_cyclic(self) -> bool:
        """True at the separation extreme R = M - 1 (forced rotation)."""
        return self.min_separation == self.n_batches - 1


@dataclass(frozen=True)
class HistoryWindow:
    """The last up-to-R sampled ordered batches, most recent first.

    Batches are pairwise disjoint as sets; the window is shorter than R only
    during the bootstrap rounds t < R.
    """

    recent: tuple[OrderedBatch, ...]

    def __post_init__(self):
        seen: set[int] = set()
        for batch in self.recent:
            members = set(batch)
            if len(members) != len(batch):
                raise ValidationError(f"batch {batch} has repeated members")
            if members & seen:
                raise ValidationError("history batches must be pairwise disjoint")
            seen |= members

    def push(self, batch: OrderedBatch, max_len: int) -> HistoryWindow:
        if max_len == 0:
            return HistoryWindow(())
        return HistoryWindow((batch,) + self.recent[: max_len - 1])

    def blocked(self) -> frozenset[int]:
        return frozenset(i for batch in self.recent for i in batch)


class ChainState:
    """Single-owner mutable sampler for the participation chain.

    Holds the config, the profile, the rolling history window and a seeded
    PCG64 generator. Rounds t < min_separation bootstrap from an empty
    window: the cooldown applies only to batches already sampled.
    """

    def __init__(
        self,
        config: ChainConfig,
        profile: AvailabilityProfile,
        seed=None,
        history: tuple[OrderedBatch, ...] = (),
    ):
        if profile.n_clients != config.n_clients:
            raise ValidationError(
                f"profile has {profile.n_clients} clients, config expects {config.n_clients}"
            )
        self.config = config
        self.profile = profile
        self.rng = as_generator(seed)
        self.round = 0
        self._p = [float(v) for v in profile.p]
        self._recent: list[OrderedBatch] = []
        self._blocked = [False] * config.n_clients
        self._avail_weight = 1.0
        self._pushes = 0
        self._ubuf = np.empty(0)
        self._upos = 0
        for batch in reversed(history):
            self._push(tuple(int(i) for i in batch))

    @property
    def history(self) -> HistoryWindow:
        return HistoryWindow(tuple(self._recent))

    def unavailable(self) -> frozenset[int]:
        return frozenset(i for b in self._recent for i in b)

    def _next_uniform(self) -> float:
        # Buffered scalar draws, far cheaper per call than rng.random().
        # The buffer grows geometrically so short-lived states stay cheap.
        if self._upos >= self._ubuf.size:
            size = min(_UNIFORM_BUFFER, max(8, 2 * self._ubuf.size))
            self._ubuf = self.rng.random(size)
            self._upos = 0
        u = self._ubuf[self._upos]
        self._upos += 1
        return u

    def _push(self, batch: OrderedBatch) -> None:
        r = self.config.min_separation
        for i in batch:
            if self._blocked[i]:
                raise ValidationError(f"client {i} is still blocked")
            self._blocked[i] = True
            self._avail_weight -= self._p[i]
        self._recent.insert(0, batch)
        if len(self._recent) > r:
            for i in self._recent.pop():
                self._blocked[i] = False
                self._avail_weight += self._p[i]
        if r == 0:
            self._recent.clear()
            self._blocked = [False] * self.config.n_clients
            self._avail_weight = 1.0
        else:
            # Incremental weight updates drift over millions of rounds;
            # resync exactly on a cheap amortized schedule.
            self._pushes += 1
            if self._pushes % 8192 == 0:
                self._avail_weight = sum(
                    w for i, w in enumerate(self._p) if not self._blocked[i]
                )

    def advance(self) -> OrderedBatch:
        """Sample the next ordered batch and move the window forward."""
        cfg = self.config
        b = cfg.batch_size
        blocked = self._blocked
        p = self._p
        # Leader drawn with probability p_i / (available mass); companions
        # uniform without replacement; then a uniform permutation. This is
        # exactly the sum-proportional set distribution (verified against
        # brute-force enumeration in the tests).
        target = self._next_uniform() * self._avail_weight
        acc = 0.0
        leader = -1
        for i in range(cfg.n_clients):
            if blocked[i]:
                continue
            acc += p[i]
            leader = i
            if acc > target:
                break
        if leader < 0:
            raise ValidationError("no available client to sample")
        if b == 1:
            batch = (leader,)
        else:
            others = [i for i in range(cfg.n_clients) if not blocked[i] and i != leader]
            if len(others) < b - 1:
                raise ValidationError(
                    f"only {len(others) + 1} clients available, need {b}"
                )
            members = [leader]
            for _ in range(b - 1):
                j = int(self._next_uniform() * len(others))
                members.append(others.pop(j))
            # Fisher-Yates for the uniform ordering.
            for k in range(b - 1, 0, -1):
                j = int(self._next_uniform() * (k + 1))
                members[k], members[j] = members[j], members[k]
            batch = tuple(members)
        self._push(batch)
        self.round += 1
        return batch


def sample_next_batch(state: ChainState) -> OrderedBatch:
    """Draw the next ordered batch, advancing the state (history, round, rng)."""
    return state.advance()
