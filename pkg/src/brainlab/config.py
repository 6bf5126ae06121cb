"""YAML experiment configs with line-anchored validation errors."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields

import yaml

from .errors import ConfigError
from .estimators import ESTIMATORS
from .tasks import DEFAULT_TASK
from .trainer import OptimizerConfig, TrainerConfig

TASK_KEYS = {"family", "V", "L_max", "num_prompts", "aggregation", "prior", "reward"}
TRAINER_KEYS = {f.name for f in fields(TrainerConfig)}
OPTIMIZER_KEYS = {f.name for f in fields(OptimizerConfig)}
FRONTIER_KEYS = {"gammas", "samples_per_prompt", "estimators"}
ABLATE_KEYS = {"variants", "seeds"}
NSWEEP_KEYS = {"n_list", "estimators", "seeds"}
SECTIONS = {
    "task": TASK_KEYS,
    "trainer": TRAINER_KEYS,
    "frontier": FRONTIER_KEYS,
    "ablate": ABLATE_KEYS,
    "nsweep": NSWEEP_KEYS,
}

ABLATION_VARIANTS = ("brain", "brain_no_selfnorm", "brain_no_baseline", "dpo", "dpo_sft_iw", "dpo_sft_iw_n")


@dataclass
class ExperimentConfig:
    task: dict = field(default_factory=lambda: dict(DEFAULT_TASK))
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    frontier: dict = field(default_factory=lambda: {
        "gammas": [0.5, 1.0, 2.0], "samples_per_prompt": 8, "estimators": ["brain", "dpo"]})
    ablate: dict = field(default_factory=lambda: {"variants": list(ABLATION_VARIANTS), "seeds": None})
    nsweep: dict = field(default_factory=lambda: {
        "n_list": [2, 4, 8, 16, 32], "estimators": ["brain", "dpo_sft_iw"], "seeds": None})
    digest: str = ""


def _marks(node, path=(), out=None) -> dict:
    """Map key paths to 1-based source lines."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            sub = path + (key.value,)
            out[sub] = key.start_mark.line + 1
            _marks(value, sub, out)
    return out


class _Anchored:
    def __init__(self, source: str, marks: dict):
        self.source = source
        self.marks = marks

    def line(self, *path) -> int:
        while path and path not in self.marks:
            path = path[:-1]
        return self.marks.get(path, 1)

    def error(self, message: str, *path) -> ConfigError:
        return ConfigError(f"{self.source}:{self.line(*path)}: {message}")


def _check_keys(anchor, data, allowed, *path):
    if not isinstance(data, dict):
        raise anchor.error(f"section '{'.'.join(path)}' must be a mapping", *path)
    for key in data:
        if key not in allowed:
            raise anchor.error(f"unknown key '{key}' in section '{'.'.join(path)}'", *path, key)


def _estimators(anchor, values, *path) -> list[str]:
    if not isinstance(values, list) or not values:
        raise anchor.error("expected a non-empty list of estimators", *path)
    for v in values:
        if v not in ESTIMATORS:
            raise anchor.error(f"unknown estimator {v!r}", *path)
    return list(values)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise ConfigError(f"{source}:{line}: malformed YAML: {getattr(exc, 'problem', exc)}") from None
    anchor = _Anchored(source, _marks(node) if node is not None else {})
    data = data or {}
    _check_keys(anchor, data, SECTIONS)

    cfg = ExperimentConfig()
    cfg.digest = hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    task = data.get("task") or {}
    _check_keys(anchor, task, TASK_KEYS, "task")
    merged = dict(DEFAULT_TASK)
    merged.update(task)
    for key in ("V", "L_max", "num_prompts"):
        if not isinstance(merged[key], int) or merged[key] < 1:
            raise anchor.error(f"task.{key} must be a positive integer", "task", key)
    if merged["family"] not in ("categorical", "bigram"):
        raise anchor.error(f"unknown family {merged['family']!r}", "task", "family")
    if merged["family"] == "bigram" and "prior" not in task:
        merged["prior"] = {"kind": "random", "scale": 1.0, "seed": 0}
    cfg.task = merged

    trainer = data.get("trainer") or {}
    _check_keys(anchor, trainer, TRAINER_KEYS, "trainer")
    trainer = dict(trainer)
    if "optimizer" in trainer:
        opt = trainer["optimizer"]
        if isinstance(opt, str):
            opt = {"name": opt}
        _check_keys(anchor, opt, OPTIMIZER_KEYS, "trainer", "optimizer")
        try:
            trainer["optimizer"] = OptimizerConfig(**opt)
        except (ConfigError, TypeError) as exc:
            raise anchor.error(str(exc), "trainer", "optimizer") from None
    for key, value in trainer.items():
        if key in ("estimator", "optimizer"):
            continue
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise anchor.error(f"trainer.{key} must be a number", "trainer", key)
        if key in ("gamma", "lr") and not math.isfinite(value):
            raise anchor.error(f"trainer.{key} must be finite", "trainer", key)
    try:
        cfg.trainer = TrainerConfig(**trainer)
    except ConfigError as exc:
        bad = next((k for k in trainer if k in str(exc)), None)
        raise anchor.error(str(exc), "trainer", *([bad] if bad else [])) from None

    frontier = data.get("frontier") or {}
    _check_keys(anchor, frontier, FRONTIER_KEYS, "frontier")
    cfg.frontier.update(frontier)
    if "estimators" in frontier:
        _estimators(anchor, frontier["estimators"], "frontier", "estimators")

    ablate = data.get("ablate") or {}
    _check_keys(anchor, ablate, ABLATE_KEYS, "ablate")
    cfg.ablate.update(ablate)
    if "variants" in ablate:
        _estimators(anchor, ablate["variants"], "ablate", "variants")

    nsweep = data.get("nsweep") or {}
    _check_keys(anchor, nsweep, NSWEEP_KEYS, "nsweep")
    cfg.nsweep.update(nsweep)
    if "estimators" in nsweep:
        _estimators(anchor, nsweep["estimators"], "nsweep", "estimators")
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), str(path))
