"""Local objective functions and dataset generation for the experiments.

A Problem bundles per-client loss/gradient evaluators with exact
full-population metrics. Two families are provided: the one-dimensional
quadratic toy (three clients with minimizers at 1, 2, 3, whose biased and
unbiased fixed points are known in closed form) and the synthetic
least-squares-style problem with per-client feature scales and the
log-quadratic loss. Problems are immutable after construction and their
evaluators are pure.

Synthetic sampling uses numpy's PCG64 generator (ziggurat normals) with a
fixed draw order, so a seed pins the dataset across platforms.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError


class Problem:
    """Collection of per-client objectives over a shared parameter space.

    scalar=True marks one-dimensional problems whose evaluators accept
    plain floats (the training loops then avoid array overhead).
    """

    def __init__(
        self,
        losses,
        grads,
        dim: int,
        optimum_hint=None,
        scalar: bool = False,
        fingerprint: str | None = None,
    ):
        if len(losses) != len(grads) or not losses:
            raise ValidationError("losses and grads must be non-empty, equal-length")
        self._losses = list(losses)
        self._grads = list(grads)
        self.dim = int(dim)
        self.optimum_hint = optimum_hint
        self.scalar = bool(scalar)
        self.fingerprint = fingerprint

    @property
    def n_clients(self) -> int:
        return len(self._losses)

    @property
    def grad_fns(self) -> list:
        """Per-client gradient callables (hot loops index this directly)."""
        return self._grads

    def loss(self, i: int, x) -> float:
        return self._losses[i](x)

    def grad(self, i: int, x):
        return self._grads[i](x)

    def init_point(self):
        return 0.0 if self.scalar else np.zeros(self.dim)


def global_metrics(problem: Problem, x, weights=None):
    """Exact full-population objective and squared gradient norm at x.

    With weights w the metrics are those of the w-weighted objective
    sum_i w_i f_i; without, the uniform average over all clients.
    """
    n = problem.n_clients
    if weights is None:
        w = None
    else:
        w = np.asarray(weights, dtype=float)
        if w.size != n:
            raise ValidationError("weights length must match client count")
    total_loss = 0.0
    total_grad = None
    for i in range(n):
        wi = 1.0 / n if w is None else float(w[i])
        total_loss += wi * problem.loss(i, x)
        g = problem.grad(i, x)
        contrib = wi * g
        total_grad = contrib if total_grad is None else total_grad + contrib
    if problem.scalar:
        grad_sq = float(total_grad) ** 2
    else:
        grad_sq = float(np.dot(total_grad, total_grad))
    return float(total_loss), grad_sq


def quadratic_toy() -> Problem:
    """Three clients with f_i(x) = (x - i)^2 / 2 for i = 1, 2, 3.

    The population objective is minimized at x = 2; under a sampling
    marginal pi the biased fixed point is sum_i pi_i * i.
    """

    def make(v):
        return (lambda x: 0.5 * (x - v) ** 2), (lambda x: x - v)

    pairs = [make(float(v)) for v in (1, 2, 3)]
    return Problem(
        [p[0] for p in pairs],
        [p[1] for p in pairs],
        dim=1,
        optimum_hint=2.0,
        scalar=True,
    )


def weighted_toy_minimizer(weights) -> float:
    """Minimizer of the weighted toy objective: sum_i w_i * i (1-indexed)."""
    w = np.asarray(weights, dtype=float)
    return float(np.dot(w, np.arange(1, w.size + 1)))


@dataclass(frozen=True)
class SyntheticSpec:
    """Generation recipe for the synthetic regression-style dataset.

    Client i's feature entries are N(0, 1/(feature_scale * i)^2); labels are
    b = A theta + noise with theta ~ N(mu_i * 1, I), mu_i ~ N(alpha, 1) and
    alpha ~ N(0, alpha_std^2) drawn once per dataset.
    """

    n_clients: int = 100
    dim: int = 20
    samples_per_client: int = 100
    feature_scale: float = 0.5
    label_noise_std: float = 0.5
    alpha_std: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if min(self.n_clients, self.dim, self.samples_per_client) < 1:
            raise ValidationError("all counts must be positive")
        if min(self.feature_scale, self.label_noise_std, self.alpha_std) <= 0:
            raise ValidationError("all scales must be positive")

    def manifest(self) -> dict:
        return {
            "n_clients": self.n_clients,
            "dim": self.dim,
            "samples_per_client": self.samples_per_client,
            "feature_scale": self.feature_scale,
            "label_noise_std": self.label_noise_std,
            "alpha_std": self.alpha_std,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class SyntheticDataset:
    """Materialized synthetic data: features (N, n_i, d), labels (N, n_i)."""

    spec: SyntheticSpec
    features: np.ndarray
    labels: np.ndarray

    @property
    def fingerprint(self) -> str:
        blob = json.dumps(self.spec.manifest(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def make_synthetic_dataset(spec: SyntheticSpec) -> SyntheticDataset:
    """Generate the dataset with a fixed draw order: alpha first, then per
    client (1-indexed) mu_i, theta_i, A_i, eps_i."""
    rng = np.random.default_rng(spec.seed)
    n, d, m = spec.n_clients, spec.dim, spec.samples_per_client
    alpha = rng.normal(0.0, spec.alpha_std)
    features = np.empty((n, m, d))
    labels = np.empty((n, m))
    for idx in range(n):
        i = idx + 1
        mu = rng.normal(alpha, 1.0)
        theta = rng.normal(mu, 1.0, size=d)
        a = rng.normal(0.0, 1.0 / (spec.feature_scale * i), size=(m, d))
        eps = rng.normal(0.0, spec.label_noise_std, size=m)
        features[idx] = a
        labels[idx] = a @ theta + eps
    return SyntheticDataset(spec, features, labels)


def _log_quadratic_evaluators(a: np.ndarray, b: np.ndarray):
    n_i = a.shape[0]

    def loss(x):
        u = a @ x + b
        return float(np.log(0.5 * u * u + 1.0).mean())

    def grad(x):
        u = a @ x + b
        return a.T @ (u / (0.5 * u * u + 1.0)) / n_i

    return loss, grad


def dataset_problem(dataset: SyntheticDataset) -> Problem:
    losses, grads = [], []
    for idx in range(dataset.spec.n_clients):
        lo, gr = _log_quadratic_evaluators(dataset.features[idx], dataset.labels[idx])
        losses.append(lo)
        grads.append(gr)
    return Problem(losses, grads, dim=dataset.spec.dim, fingerprint=dataset.fingerprint)


def generate_synthetic(spec: SyntheticSpec) -> Problem:
    """Generate the synthetic dataset and wrap it as a Problem."""
    return dataset_problem(make_synthetic_dataset(spec))


@dataclass(frozen=True)
class GroupMap:
    """Partition of N clients into M equal groups, with optional
    availability weights over the groups."""

    n_groups: int
    assignment: tuple[int, ...]
    group_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        n = len(self.assignment)
        m = self.n_groups
        if m < 1 or n % m != 0:
            raise ValidationError(f"{n} clients cannot split into {m} equal groups")
        size = n // m
        buckets = [0] * m
        for g in self.assignment:
            if not 0 <= g < m:
                raise ValidationError(f"group id {g} out of range")
            buckets[g] += 1
        if any(c != size for c in buckets):
            raise ValidationError("groups must partition clients into equal sizes")
        if self.group_weights is not None and len(self.group_weights) != m:
            raise ValidationError("group_weights length must equal n_groups")

    def members(self) -> list[tuple[int, ...]]:
        out: list[list[int]] = [[] for _ in range(self.n_groups)]
        for client, g in enumerate(self.assignment):
            out[g].append(client)
        return [tuple(v) for v in out]


def contiguous_groups(
    n_clients: int, n_groups: int, weight_exponent: float | None = 1.5
) -> GroupMap:
    """Consecutive-client grouping with long-tailed per-group weights
    proportional to (g+1)^(-weight_exponent)."""
    size = n_clients // n_groups
    assignment = tuple(min(i // size, n_groups - 1) for i in range(n_clients))
    weights = None
    if weight_exponent is not None:
        weights = tuple(
            float(g) ** (-weight_exponent) for g in range(1, n_groups + 1)
        )
    return GroupMap(n_groups, assignment, weights)


def group_problem(base: Problem, gmap: GroupMap) -> Problem:
    """Collapse clients into super-clients: each group's loss/gradient is
    the mean over its members. With singleton groups this is the base
    problem reindexed (identical evaluator outputs)."""
    if len(gmap.assignment) != base.n_clients:
        raise ValidationError("group map does not cover the base problem's clients")
    losses, grads = [], []
    for members in gmap.members():
        def loss(x, members=members):
            return sum(base.loss(i, x) for i in members) / len(members)

        def grad(x, members=members):
            acc = base.grad(members[0], x)
            for i in members[1:]:
                acc = acc + base.grad(i, x)
            return acc / len(members)

        losses.append(loss)
        grads.append(grad)
    return Problem(
        losses,
        grads,
        dim=base.dim,
        optimum_hint=base.optimum_hint,
        scalar=base.scalar,
        fingerprint=base.fingerprint,
    )


def stacked_group_problem(dataset: SyntheticDataset, gmap: GroupMap) -> Problem:
    """Grouped synthetic problem with each group's member rows stacked into
    one design matrix.

    With equal per-client sample counts, the mean loss over the stacked rows
    equals the mean of member losses, so this is group_problem specialized
    to the synthetic dataset (same values up to float summation order) at a
    fraction of the evaluation cost.
    """
    if len(gmap.assignment) != dataset.spec.n_clients:
        raise ValidationError("group map does not cover the dataset's clients")
    losses, grads = [], []
    for members in gmap.members():
        a = np.concatenate([dataset.features[i] for i in members], axis=0)
        b = np.concatenate([dataset.labels[i] for i in members], axis=0)
        lo, gr = _log_quadratic_evaluators(a, b)
        losses.append(lo)
        grads.append(gr)
    return Problem(losses, grads, dim=dataset.spec.dim, fingerprint=dataset.fingerprint)


# ---------------------------------------------------------------------------
# Dataset export / import

def save_dataset(dataset: SyntheticDataset, directory) -> None:
    """Write the per-client flat CSV layout plus a JSON manifest so runs can
    be replayed without regeneration."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    spec = dataset.spec
    with open(directory / "data.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["client_id", "row"] + [f"f{k}" for k in range(spec.dim)] + ["label"]
        )
        for c in range(spec.n_clients):
            for r in range(spec.samples_per_client):
                writer.writerow(
                    [c, r]
                    + [repr(float(v)) for v in dataset.features[c, r]]
                    + [repr(float(dataset.labels[c, r]))]
                )
    manifest = dataset.spec.manifest() | {"fingerprint": dataset.fingerprint}
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_dataset(directory) -> SyntheticDataset:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    manifest.pop("fingerprint", None)
    spec = SyntheticSpec(**manifest)
    features = np.empty((spec.n_clients, spec.samples_per_client, spec.dim))
    labels = np.empty((spec.n_clients, spec.samples_per_client))
    with open(directory / "data.csv", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            c, r = int(row[0]), int(row[1])
            features[c, r] = [float(v) for v in row[2 : 2 + spec.dim]]
            labels[c, r] = float(row[2 + spec.dim])
    return SyntheticDataset(spec, features, labels)
