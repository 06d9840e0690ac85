"""Experiment configuration: JSON file plus dotted --set overrides.

Every experiment has a full default block; loading resolves user values
against it, rejects unknown keys at any depth, and returns the fully
resolved dict. No experiment runs with undeclared defaults: the resolved
config is echoed into the output manifest verbatim.
"""

from __future__ import annotations

import copy
import json

import numpy as np

from .chain import AvailabilityProfile, make_profile, power_law_profile
from .errors import ValidationError

EXPERIMENTS = (
    "pi-vs-r",
    "toy-bias",
    "synth-debias",
    "mixing",
    "estimator-rate",
    "evolution",
)

_PROFILE_DEFAULTS = {
    "kind": "uniform",  # uniform | powerlaw | random | explicit
    "exponent": 1.5,
    "weights": None,
    "seed": 0,
}

_HYPER_DEFAULTS = {
    "local_steps": 5,
    "stepsize": 0.05,
    "rounds": 50_000,
    "eval_every": 50_000,
}

DEFAULTS: dict[str, dict] = {
    "pi-vs-r": {
        "seed": 0,
        "chain": {"n_clients": 12, "batch_size": 1},
        "profile": dict(_PROFILE_DEFAULTS, kind="random", seed=7),
        "r_grid": None,  # null means every R in 0..M-1
        "exact_cap": 2_000_000,
        "mc": {"rounds": 1_000_000, "replicas": 8, "burn_in": 1000},
    },
    "toy-bias": {
        "seed": 0,
        "profile": dict(_PROFILE_DEFAULTS, kind="explicit", weights=[0.25, 0.25, 0.5]),
        "min_separation": 1,
        "hyper": dict(_HYPER_DEFAULTS),
        "n_seeds": 200,
        "algorithms": ["fedavg", "debiased", "known_pi"],
    },
    "synth-debias": {
        "seed": 0,
        "problem": {
            "n_clients": 100,
            "n_groups": 20,
            "dim": 20,
            "samples_per_client": 100,
            "data_seed": 10,
        },
        "profile": dict(_PROFILE_DEFAULTS, kind="powerlaw"),
        "r_grid": [0, 5, 10, 18],
        "hyper": {
            "local_steps": 5,
            "stepsize": 0.1,
            "rounds": 10_000,
            "eval_every": 500,
        },
        "n_seeds": 20,
        "include_oracle": True,
        "terminal_window": 0.1,
    },
    "mixing": {
        "seed": 0,
        "chain": {"n_clients": 6, "batch_size": 1},
        "profile": dict(_PROFILE_DEFAULTS),
        "r_grid": None,
        "k_max": 80,
        "eps": 0.25,
        "exact_cap": 2_000_000,
    },
    "estimator-rate": {
        "seed": 0,
        "chain": {"n_clients": 3, "batch_size": 1, "min_separation": 1},
        "profile": dict(_PROFILE_DEFAULTS, kind="explicit", weights=[0.25, 0.25, 0.5]),
        "horizon": 4000,
        "n_seeds": 100,
    },
    "evolution": {
        "seed": 0,
        "chain": {"n_clients": 100, "batch_size": 1},
        "profile": dict(_PROFILE_DEFAULTS, kind="powerlaw"),
        "r_grid": [0, 25, 50, 99],
        "horizon": 600,
        "replicas": 10_000,
        "exact_cap": 200_000,
        # Reference marginal when exact is infeasible (cyclic R uses the
        # analytically uniform marginal instead).
        "reference_mc": {"rounds": 400_000, "replicas": 4, "burn_in": 2000},
    },
}


def _merge(user, defaults, path: str):
    if isinstance(defaults, dict):
        if not isinstance(user, dict):
            raise ValidationError(f"config key '{path}' must be an object")
        unknown = set(user) - set(defaults)
        if unknown:
            raise ValidationError(
                f"unknown config key(s) under '{path or 'top level'}': {sorted(unknown)}"
            )
        out = {}
        for key, dval in defaults.items():
            sub = f"{path}.{key}" if path else key
            out[key] = _merge(user[key], dval, sub) if key in user else copy.deepcopy(dval)
        return out
    return user


def resolve_config(experiment: str, user: dict) -> dict:
    """Fill defaults, reject unknown keys, and echo the experiment name."""
    if experiment not in EXPERIMENTS:
        raise ValidationError(f"unknown experiment '{experiment}'")
    user = dict(user)
    declared = user.pop("experiment", experiment)
    if declared != experiment:
        raise ValidationError(
            f"config declares experiment '{declared}' but '{experiment}' was requested"
        )
    resolved = _merge(user, DEFAULTS[experiment], "")
    resolved["experiment"] = experiment
    return resolved


def load_config_file(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file is not valid JSON: {exc}") from exc


def parse_override(item: str) -> tuple[list[str], object]:
    """Parse one --set KEY=VALUE override; VALUE is JSON, falling back to a
    bare string."""
    if "=" not in item:
        raise ValidationError(f"--set expects key=value, got '{item}'")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ValidationError(f"--set has an empty key in '{item}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(user: dict, overrides) -> dict:
    """Apply dotted-path overrides on top of the user config (flags win)."""
    out = copy.deepcopy(user)
    for item in overrides or ():
        keys, value = parse_override(item)
        node = out
        for k in keys[:-1]:
            nxt = node.get(k)
            if not isinstance(nxt, dict):
                nxt = {}
                node[k] = nxt
            node = nxt
        node[keys[-1]] = value
    return out


def build_profile(profile_cfg: dict, n_clients: int) -> AvailabilityProfile:
    """Materialize the profile block for a population of n_clients."""
    kind = profile_cfg["kind"]
    if kind == "uniform":
        return make_profile(np.ones(n_clients))
    if kind == "powerlaw":
        return power_law_profile(n_clients, float(profile_cfg["exponent"]))
    if kind == "random":
        rng = np.random.default_rng(int(profile_cfg["seed"]))
        return make_profile(rng.uniform(0.1, 1.0, size=n_clients))
    if kind == "explicit":
        weights = profile_cfg["weights"]
        if weights is None:
            raise ValidationError("profile.kind='explicit' requires profile.weights")
        if len(weights) != n_clients:
            raise ValidationError(
                f"profile.weights has {len(weights)} entries, expected {n_clients}"
            )
        return make_profile(np.asarray(weights, dtype=float))
    raise ValidationError(f"unknown profile kind '{kind}'")
