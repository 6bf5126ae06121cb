"""Reward functions, goodness models and Bradley-Terry fitting.

A reward model either gives an absolute reward ``r(x, y)`` together with a
temperature ``gamma`` (in which case ``log p(G=1|x,y) = r/gamma`` up to a
per-prompt constant), or only a goodness log-likelihood known up to such a
constant. Everything downstream consumes the goodness model through
self-normalized ratios, so the constant never needs to be pinned down.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Hashable, Sequence
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .errors import DivergenceError, InvalidInputError, InvalidOutcomeError, UnsupportedError


def _check_gamma(gamma) -> float:
    gamma = float(gamma)
    if not gamma > 0:
        raise InvalidInputError(f"gamma must be positive, got {gamma}")
    return gamma


def _key(y) -> Hashable:
    return tuple(y) if isinstance(y, list) else y


class RewardModel:
    """Base class. Subclasses override :meth:`reward` or :meth:`goodness_log`."""

    has_reward = True

    def __init__(self, gamma: float = 1.0):
        self.gamma = _check_gamma(gamma)

    def reward(self, x: int, y) -> float:
        raise UnsupportedError(f"{type(self).__name__} provides no absolute reward")

    def rewards(self, x: int, ys: Sequence) -> np.ndarray:
        return np.array([self.reward(x, y) for y in ys], dtype=np.float64)

    def goodness_log(self, x: int, y) -> float:
        """``log p(G=1|x,y)`` up to an additive per-prompt constant."""
        return self.reward(x, y) / self.gamma

    def goodness_logs(self, x: int, ys: Sequence) -> np.ndarray:
        if self.has_reward:
            return self.rewards(x, ys) / self.gamma
        return np.array([self.goodness_log(x, y) for y in ys], dtype=np.float64)

    def with_gamma(self, gamma: float) -> "RewardModel":
        raise NotImplementedError


class TableReward(RewardModel):
    """Absolute rewards stored per prompt over an enumerable outcome space."""

    def __init__(self, table, outcomes: Sequence | None = None, gamma: float = 1.0):
        super().__init__(gamma)
        arr = np.array(table, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise InvalidInputError("reward table must be [num_prompts, num_outcomes]")
        if not np.isfinite(arr).all():
            raise InvalidInputError("reward table must be finite")
        outcomes = list(range(arr.shape[1])) if outcomes is None else [_key(o) for o in outcomes]
        if len(outcomes) != arr.shape[1]:
            raise InvalidInputError("reward table width does not match the outcome space")
        arr.setflags(write=False)
        self.table = arr
        self.outcomes = outcomes
        self.index = {o: i for i, o in enumerate(outcomes)}
        self.num_prompts = arr.shape[0]

    def _col(self, y) -> int:
        try:
            return self.index[_key(y)]
        except (KeyError, TypeError):
            raise InvalidOutcomeError(f"outcome {y!r} not in the reward table's space") from None

    def reward(self, x, y) -> float:
        if not 0 <= x < self.num_prompts:
            raise InvalidInputError(f"prompt id {x} outside [0, {self.num_prompts})")
        return float(self.table[x, self._col(y)])

    def rewards(self, x, ys) -> np.ndarray:
        if not 0 <= x < self.num_prompts:
            raise InvalidInputError(f"prompt id {x} outside [0, {self.num_prompts})")
        return self.table[x, [self._col(y) for y in ys]]

    def with_gamma(self, gamma) -> "TableReward":
        return TableReward(self.table, self.outcomes, gamma)

    def to_dict(self) -> dict:
        return {
            "kind": "absolute_table",
            "gamma": self.gamma,
            "num_prompts": self.num_prompts,
            "outcomes": [list(o) if isinstance(o, tuple) else o for o in self.outcomes],
            "table": [[float(v) for v in row] for row in self.table],
        }

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_dict(cls, d: dict) -> "TableReward":
        if d.get("kind") != "absolute_table":
            raise InvalidInputError(f"unsupported reward checkpoint kind {d.get('kind')!r}")
        return cls(d["table"], [_key(o) for o in d["outcomes"]], d["gamma"])

    @classmethod
    def load(cls, path) -> "TableReward":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


class AnalyticReward(RewardModel):
    """Reward given by a Python callable ``fn(x, y) -> float``."""

    def __init__(self, fn: Callable[[int, object], float], gamma: float = 1.0, name: str = "analytic"):
        super().__init__(gamma)
        self.fn = fn
        self.name = name

    def reward(self, x, y) -> float:
        value = float(self.fn(x, y))
        if not math.isfinite(value):
            raise InvalidInputError(f"{self.name} reward is not finite at y={y!r}")
        return value

    def with_gamma(self, gamma) -> "AnalyticReward":
        return AnalyticReward(self.fn, gamma, self.name)


def negative_squared_error(target: float, gamma: float = 1.0) -> AnalyticReward:
    return AnalyticReward(lambda x, y: -(float(y) - target) ** 2, gamma, f"neg_sq_err({target})")


class GoodnessModel(RewardModel):
    """Only ``log p(G=1|x,y)`` is known, up to a per-prompt constant."""

    has_reward = False

    def __init__(self, log_fn: Callable[[int, object], float], name: str = "goodness"):
        super().__init__(1.0)
        self.log_fn = log_fn
        self.name = name

    def goodness_log(self, x, y) -> float:
        return float(self.log_fn(x, y))

    def with_gamma(self, gamma) -> "GoodnessModel":
        return self


def gaussian_target_goodness(prior_mean: float, target_mean: float = 0.0) -> GoodnessModel:
    """Goodness making the posterior of a ``N(prior_mean, 1)`` prior equal ``N(target_mean, 1)``.

    ``log N(y; target, 1) - log N(y; prior, 1)`` is linear in ``y``.
    """
    a, b = float(target_mean), float(prior_mean)
    return GoodnessModel(
        lambda x, y: (a - b) * float(y) + 0.5 * (b * b - a * a),
        name=f"gaussian_target({a})",
    )


def preference_prob(model: RewardModel, x: int, y_i, y_j) -> float:
    """Bradley-Terry probability that ``y_i`` is preferred over ``y_j``."""
    return float(expit((model.reward(x, y_i) - model.reward(x, y_j)) / model.gamma))


def goodness_log_ratio(model: RewardModel, x: int, y_i, y_j) -> float:
    """``log p(G=1|x,y_i) - log p(G=1|x,y_j)``; the per-prompt constant cancels."""
    if model.has_reward:
        return (model.reward(x, y_i) - model.reward(x, y_j)) / model.gamma
    return model.goodness_log(x, y_i) - model.goodness_log(x, y_j)


# --------------------------------------------------------------------------
# Bradley-Terry fitting


@dataclass(frozen=True)
class PreferenceTriplet:
    x: int
    winner: Hashable
    loser: Hashable

    def __post_init__(self):
        object.__setattr__(self, "winner", _key(self.winner))
        object.__setattr__(self, "loser", _key(self.loser))
        if self.winner == self.loser:
            raise InvalidInputError(f"triplet for prompt {self.x} has winner == loser")


def _triplet_arrays(triplets, index):
    xs, ws, ls = [], [], []
    for t in triplets:
        try:
            ws.append(index[t.winner])
            ls.append(index[t.loser])
        except KeyError as exc:
            raise InvalidOutcomeError(f"outcome {exc.args[0]!r} not in the outcome space") from None
        xs.append(t.x)
    return np.array(xs, dtype=np.intp), np.array(ws, dtype=np.intp), np.array(ls, dtype=np.intp)


def bradley_terry_objective(table, triplets, space, gamma=1.0, l2=0.0) -> tuple[float, np.ndarray]:
    """Penalized log-likelihood and its gradient with respect to the table."""
    table = np.asarray(table, dtype=np.float64)
    index = {_key(o): i for i, o in enumerate(space)}
    xs, ws, ls = _triplet_arrays(triplets, index)
    z = (table[xs, ws] - table[xs, ls]) / gamma
    value = float(np.sum(log_expit(z)) - l2 * np.sum(table**2))
    coef = expit(-z) / gamma
    grad = -2.0 * l2 * table
    np.add.at(grad, (xs, ws), coef)
    np.add.at(grad, (xs, ls), -coef)
    return value, grad


def fit_bradley_terry(
    triplets: Sequence[PreferenceTriplet],
    space: Sequence,
    num_prompts: int | None = None,
    gamma: float = 1.0,
    l2: float = 0.0,
    steps: int = 20_000,
    lr: float | None = None,
    tol: float = 1e-10,
) -> TableReward:
    """Maximum (penalized) likelihood reward table from preference triplets.

    Full-batch gradient ascent on ``sum log sigmoid((r_w - r_l)/gamma) -
    l2*||r||^2``. The objective is concave; with ``lr=None`` a step size of
    ``1/L`` is used, ``L`` bounding the Hessian. Rewards are mean-centered per
    prompt afterwards, which leaves every preference probability unchanged.
    """
    triplets = list(triplets)
    if not triplets:
        raise InvalidInputError("no preference triplets given")
    gamma = _check_gamma(gamma)
    if l2 < 0:
        raise InvalidInputError("l2 must be non-negative")
    space = [_key(o) for o in space]
    index = {o: i for i, o in enumerate(space)}
    xs, ws, ls = _triplet_arrays(triplets, index)
    P = int(xs.max()) + 1 if num_prompts is None else int(num_prompts)
    if xs.min() < 0 or xs.max() >= P:
        raise InvalidInputError("triplet prompt id outside the prompt range")

    if l2 == 0:
        wins = np.zeros((P, len(space)), dtype=bool)
        losses = np.zeros_like(wins)
        wins[xs, ws] = True
        losses[xs, ls] = True
        if np.any(wins ^ losses):
            raise InvalidInputError(
                "l2 must be positive when an outcome appears only as winner or only as loser")

    if lr is None:
        degree = np.zeros((P, len(space)))
        np.add.at(degree, (xs, ws), 1.0)
        np.add.at(degree, (xs, ls), 1.0)
        # Hessian of the likelihood is bounded by the weighted Laplacian / (4 gamma^2)
        lipschitz = 2.0 * degree.max() / (4.0 * gamma**2) + 2.0 * l2
        lr = 1.0 / lipschitz
    if not lr > 0:
        raise InvalidInputError("lr must be positive")

    table = np.zeros((P, len(space)))
    for _ in range(steps):
        value, grad = bradley_terry_objective(table, triplets, space, gamma, l2)
        if not (math.isfinite(value) and np.isfinite(grad).all()):
            raise DivergenceError("non-finite Bradley-Terry objective")
        if np.linalg.norm(grad) < tol:
            break
        table = table + lr * grad
    table -= table.mean(axis=1, keepdims=True)
    return TableReward(table, space, gamma)


def parse_outcome_literal(text: str, family: str = "categorical"):
    parts = text.split()
    if not parts:
        raise InvalidInputError("empty outcome literal")
    ids = tuple(int(p) for p in parts)
    if family == "categorical":
        if len(ids) != 1:
            raise InvalidInputError(f"categorical outcome must be one integer, got {text!r}")
        return ids[0]
    return ids


def format_outcome_literal(y) -> str:
    if isinstance(y, (tuple, list)):
        return " ".join(str(int(t)) for t in y)
    return str(int(y))


def read_preference_file(path, family: str = "categorical") -> list[PreferenceTriplet]:
    """Parse ``prompt_id<TAB>winner<TAB>loser`` lines; blank lines are skipped."""
    triplets = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split("\t")
            try:
                if len(fields) != 3:
                    raise InvalidInputError(f"expected 3 tab-separated fields, got {len(fields)}")
                triplets.append(PreferenceTriplet(
                    int(fields[0]),
                    parse_outcome_literal(fields[1], family),
                    parse_outcome_literal(fields[2], family),
                ))
            except (ValueError, InvalidInputError) as exc:
                raise InvalidInputError(f"{path}:{lineno}: {exc}") from None
    return triplets


def write_preference_file(path, triplets: Sequence[PreferenceTriplet]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in triplets:
            fh.write(f"{t.x}\t{format_outcome_literal(t.winner)}\t{format_outcome_literal(t.loser)}\n")
