"""Toy task construction from plain dictionaries (the ``task:`` config block)."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .oracle import Task
from .policies import BigramPolicy, CategoricalPolicy, all_sequences
from .rewards import TableReward

FAMILIES = ("categorical", "bigram")

DEFAULT_TASK = {
    "family": "categorical",
    "V": 8,
    "L_max": 3,
    "num_prompts": 4,
    # SFT-like prior: high-reward outcomes are the unlikely ones
    "prior": {"kind": "reward_tilted", "tilt": -1.5, "scale": 0.5, "seed": 0},
    "reward": {"kind": "random", "low": 0.0, "high": 4.0, "seed": 1},
}


def _outcome_count(spec: dict) -> int:
    if spec["family"] == "categorical":
        return spec["V"]
    return len(all_sequences(spec["V"], spec["L_max"]))


def _prior(spec: dict, reward: TableReward):
    family, V, P = spec["family"], spec["V"], spec["num_prompts"]
    shape = (P, V) if family == "categorical" else (P, V + 1, V + 1)
    prior_spec = dict(spec.get("prior") or {"kind": "uniform"})
    kind = prior_spec.pop("kind", "uniform")
    if kind == "uniform":
        logits = np.zeros(shape)
    elif kind == "random":
        rng = np.random.default_rng(prior_spec.get("seed", 0))
        logits = rng.normal(0.0, float(prior_spec.get("scale", 1.0)), size=shape)
    elif kind == "reward_tilted":
        if family != "categorical":
            raise ConfigError("reward_tilted priors are only defined for the categorical family")
        rng = np.random.default_rng(prior_spec.get("seed", 0))
        noise = rng.normal(0.0, float(prior_spec.get("scale", 0.5)), size=shape)
        logits = float(prior_spec.get("tilt", -1.5)) * reward.table + noise
    elif kind == "logits":
        logits = np.asarray(prior_spec["values"], dtype=np.float64)
        if logits.shape != shape:
            raise ConfigError(f"prior logits must have shape {list(shape)}, got {list(logits.shape)}")
    else:
        raise ConfigError(f"unknown prior kind {kind!r}")
    if family == "categorical":
        return CategoricalPolicy(logits)
    return BigramPolicy(logits, spec["L_max"], spec.get("aggregation", "sum"))


def _reward(spec: dict) -> TableReward:
    P, K = spec["num_prompts"], _outcome_count(spec)
    outcomes = None if spec["family"] == "categorical" else all_sequences(spec["V"], spec["L_max"])
    reward_spec = dict(spec.get("reward") or {"kind": "random"})
    kind = reward_spec.pop("kind", "random")
    if kind == "random":
        rng = np.random.default_rng(reward_spec.get("seed", 1))
        table = rng.uniform(float(reward_spec.get("low", 0.0)), float(reward_spec.get("high", 1.0)), size=(P, K))
    elif kind == "table":
        table = np.asarray(reward_spec["values"], dtype=np.float64)
        if table.shape != (P, K):
            raise ConfigError(f"reward table must have shape {[P, K]}, got {list(table.shape)}")
    else:
        raise ConfigError(f"unknown reward kind {kind!r}")
    return TableReward(table, outcomes, float(spec.get("gamma", 1.0)))


def build_task(spec: dict | None = None) -> Task:
    """Prior, reward table and prompt list for a toy task description."""
    full = dict(DEFAULT_TASK)
    full.update(spec or {})
    if full["family"] not in FAMILIES:
        raise ConfigError(f"family must be one of {FAMILIES}")
    for key in ("V", "num_prompts", "L_max"):
        if int(full[key]) < 1:
            raise ConfigError(f"{key} must be >= 1")
        full[key] = int(full[key])
    reward = _reward(full)
    return Task(_prior(full, reward), reward, tuple(range(full["num_prompts"])))
