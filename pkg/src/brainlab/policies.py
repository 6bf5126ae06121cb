"""Exactly analyzable policy families.

Three families stand in for the prior ``p(y|x)``, the proposal ``q'(y|x)`` and
the trainable policy ``q_theta(y|x)``:

* :class:`CategoricalPolicy` -- one softmax row per prompt.
* :class:`GaussianPolicy` -- unit-variance normal with a single learnable mean.
* :class:`BigramPolicy` -- first-order token model over short terminated
  sequences.

Every policy exposes its parameters as one flat vector, and scores
(``grad log q``) are returned in that same flat layout. Policies are
immutable: :meth:`Policy.with_params` returns a new instance.
"""

from __future__ import annotations

import itertools
import json
import math
from abc import ABC, abstractmethod
from collections.abc import Sequence
from typing import Any

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import InvalidInputError, InvalidOutcomeError, NotEnumerableError

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
DEFAULT_ENUMERATION_CAP = 10_000
AGGREGATIONS = ("sum", "mean")


def _frozen(values, shape=None) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if np.isnan(arr).any() or np.isposinf(arr).any():
        raise InvalidInputError("parameters must not contain NaN or +inf")
    arr.setflags(write=False)
    return arr


class Policy(ABC):
    """Conditional distribution ``q(y|x)`` with a flat parameter vector."""

    family: str = ""
    num_prompts: int

    @property
    @abstractmethod
    def params(self) -> np.ndarray:
        """Read-only flat parameter vector."""

    @property
    def dim(self) -> int:
        return self.params.size

    @abstractmethod
    def with_params(self, values) -> "Policy":
        """Same family and shape, new parameter values."""

    @abstractmethod
    def log_prob(self, x: int, y) -> float: ...

    @abstractmethod
    def grad_log_prob(self, x: int, y) -> np.ndarray: ...

    @abstractmethod
    def sample(self, x: int, n: int, rng: np.random.Generator) -> list: ...

    def enumerate_support(self, x: int) -> list[tuple[Any, float]]:
        raise NotEnumerableError(f"{self.family} policy has no finite support")

    @property
    def enumerable(self) -> bool:
        return False

    def log_probs(self, x: int, ys: Sequence) -> np.ndarray:
        return np.array([self.log_prob(x, y) for y in ys], dtype=np.float64)

    def scores(self, x: int, ys: Sequence) -> np.ndarray:
        """Stack of ``grad_log_prob`` rows, shape ``(len(ys), dim)``."""
        out = np.zeros((len(ys), self.dim))
        for i, y in enumerate(ys):
            out[i] = self.grad_log_prob(x, y)
        return out

    def _check_prompt(self, x) -> int:
        if isinstance(x, bool) or not isinstance(x, (int, np.integer)):
            raise InvalidInputError(f"prompt id must be an integer, got {x!r}")
        if not 0 <= x < self.num_prompts:
            raise InvalidInputError(f"prompt id {x} outside [0, {self.num_prompts})")
        return int(x)

    # checkpoint format -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "num_prompts": self.num_prompts,
            "V": getattr(self, "V", None),
            "L_max": getattr(self, "max_len", None),
            "aggregation": getattr(self, "aggregation", None),
            "params": [float(v) for v in self.params],
        }

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    def __eq__(self, other) -> bool:
        return (
            type(self) is type(other)
            and self.to_dict() == other.to_dict()
        )

    def __hash__(self) -> int:
        return hash((self.family, self.params.tobytes()))


class CategoricalPolicy(Policy):
    """Softmax over ``V`` classes, one logit row per prompt."""

    family = "categorical"

    def __init__(self, logits):
        arr = np.asarray(logits, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] < 1:
            raise InvalidInputError("logits must be a [num_prompts, V] matrix")
        self._logits = _frozen(arr)
        self.num_prompts, self.V = arr.shape
        self._log_probs = log_softmax(arr, axis=1)
        self._log_probs.setflags(write=False)

    @classmethod
    def uniform(cls, num_prompts: int, V: int) -> "CategoricalPolicy":
        return cls(np.zeros((num_prompts, V)))

    @property
    def logits(self) -> np.ndarray:
        return self._logits

    @property
    def params(self) -> np.ndarray:
        return self._logits.reshape(-1)

    def with_params(self, values) -> "CategoricalPolicy":
        return CategoricalPolicy(np.asarray(values, dtype=np.float64).reshape(self.num_prompts, self.V))

    def probs(self, x: int) -> np.ndarray:
        return np.exp(self._log_probs[self._check_prompt(x)])

    def _check_outcome(self, y) -> int:
        if isinstance(y, bool) or not isinstance(y, (int, np.integer)):
            raise InvalidOutcomeError(f"categorical outcome must be an integer, got {y!r}")
        if not 0 <= y < self.V:
            raise InvalidOutcomeError(f"category {y} outside [0, {self.V})")
        return int(y)

    def _indices(self, ys) -> np.ndarray:
        idx = np.asarray(ys)
        if idx.ndim == 1 and idx.dtype.kind in "iu":
            if idx.size and (idx.min() < 0 or idx.max() >= self.V):
                raise InvalidOutcomeError(f"category outside [0, {self.V})")
            return idx.astype(np.intp, copy=False)
        return np.array([self._check_outcome(y) for y in ys], dtype=np.intp)

    def log_prob(self, x, y) -> float:
        return float(self._log_probs[self._check_prompt(x), self._check_outcome(y)])

    def log_probs(self, x, ys) -> np.ndarray:
        return self._log_probs[self._check_prompt(x), self._indices(ys)]

    def grad_log_prob(self, x, y) -> np.ndarray:
        return self.scores(x, [y])[0]

    def scores(self, x, ys) -> np.ndarray:
        x = self._check_prompt(x)
        idx = self._indices(ys)
        n = len(idx)
        out = np.zeros((n, self.num_prompts, self.V))
        block = np.tile(-np.exp(self._log_probs[x]), (n, 1))
        block[np.arange(n), idx] += 1.0
        out[:, x, :] = block
        return out.reshape(n, -1)

    def sample(self, x, n, rng) -> list[int]:
        if n < 1:
            raise InvalidInputError("n must be >= 1")
        p = self.probs(x)
        return [int(v) for v in rng.choice(self.V, size=n, p=p / p.sum())]

    @property
    def enumerable(self) -> bool:
        return True

    def enumerate_support(self, x) -> list[tuple[int, float]]:
        return [(c, float(p)) for c, p in enumerate(self.probs(x))]


class GaussianPolicy(Policy):
    """Unit-variance normal ``N(mean, 1)`` shared by all prompts."""

    family = "gaussian"

    def __init__(self, mean: float, num_prompts: int = 1):
        self._mean = _frozen([mean])
        if not np.isfinite(self._mean).all():
            raise InvalidInputError("mean must be finite")
        self.num_prompts = int(num_prompts)

    @property
    def mean(self) -> float:
        return float(self._mean[0])

    @property
    def params(self) -> np.ndarray:
        return self._mean

    def with_params(self, values) -> "GaussianPolicy":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size != 1:
            raise InvalidInputError("GaussianPolicy has exactly one parameter")
        return GaussianPolicy(float(values[0]), self.num_prompts)

    @staticmethod
    def _check_outcome(y) -> float:
        if isinstance(y, bool) or not isinstance(y, (int, float, np.integer, np.floating)):
            raise InvalidOutcomeError(f"gaussian outcome must be a real number, got {y!r}")
        if not math.isfinite(y):
            raise InvalidOutcomeError("gaussian outcome must be finite")
        return float(y)

    def log_prob(self, x, y) -> float:
        self._check_prompt(x)
        d = self._check_outcome(y) - self.mean
        return -LOG_SQRT_2PI - 0.5 * d * d

    def log_probs(self, x, ys) -> np.ndarray:
        self._check_prompt(x)
        d = np.array([self._check_outcome(y) for y in ys]) - self.mean
        return -LOG_SQRT_2PI - 0.5 * d * d

    def grad_log_prob(self, x, y) -> np.ndarray:
        self._check_prompt(x)
        return np.array([self._check_outcome(y) - self.mean])

    def scores(self, x, ys) -> np.ndarray:
        self._check_prompt(x)
        return (np.array([self._check_outcome(y) for y in ys]) - self.mean)[:, None]

    def sample(self, x, n, rng) -> list[float]:
        self._check_prompt(x)
        if n < 1:
            raise InvalidInputError("n must be >= 1")
        return [float(v) for v in rng.normal(self.mean, 1.0, size=n)]


class BigramPolicy(Policy):
    """First-order token model over sequences terminated by an end token.

    Tokens are ``0..V-1``; id ``V`` is reserved. As a row index it is the
    begin-of-sequence state, as a column index it is the end token. An outcome
    is a tuple of token ids whose last element is ``V`` and whose total length
    (end token included) is at most ``max_len``. The final position is forced
    to the end token, so every such sequence has positive probability.

    ``aggregation`` selects whether :meth:`log_prob` sums or averages the
    per-token log-probabilities. :meth:`enumerate_support` always reports the
    true sequence probabilities.
    """

    family = "bigram"

    def __init__(self, transition_logits, max_len: int, aggregation: str = "mean",
                 enumeration_cap: int = DEFAULT_ENUMERATION_CAP):
        arr = np.asarray(transition_logits, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[1] != arr.shape[2] or arr.shape[1] < 2:
            raise InvalidInputError("transition logits must be [num_prompts, V+1, V+1]")
        if max_len < 1:
            raise InvalidInputError("max_len must be >= 1")
        if aggregation not in AGGREGATIONS:
            raise InvalidInputError(f"aggregation must be one of {AGGREGATIONS}")
        self._logits = _frozen(arr)
        self.num_prompts = arr.shape[0]
        self.V = arr.shape[1] - 1
        self.end = self.V
        self.max_len = int(max_len)
        self.aggregation = aggregation
        self.enumeration_cap = int(enumeration_cap)
        self._log_probs = log_softmax(arr, axis=2)
        self._log_probs.setflags(write=False)

    @classmethod
    def uniform(cls, num_prompts: int, V: int, max_len: int, aggregation: str = "mean") -> "BigramPolicy":
        return cls(np.zeros((num_prompts, V + 1, V + 1)), max_len, aggregation)

    @property
    def params(self) -> np.ndarray:
        return self._logits.reshape(-1)

    def with_params(self, values) -> "BigramPolicy":
        return BigramPolicy(
            np.asarray(values, dtype=np.float64).reshape(self._logits.shape),
            self.max_len, self.aggregation, self.enumeration_cap,
        )

    def with_aggregation(self, aggregation: str) -> "BigramPolicy":
        return BigramPolicy(self._logits, self.max_len, aggregation, self.enumeration_cap)

    def _check_outcome(self, y) -> tuple[int, ...]:
        if not isinstance(y, (tuple, list)) or len(y) == 0:
            raise InvalidOutcomeError(f"bigram outcome must be a non-empty token tuple, got {y!r}")
        if len(y) > self.max_len:
            raise InvalidOutcomeError(f"sequence longer than max_len={self.max_len}")
        toks = tuple(int(t) for t in y)
        if toks[-1] != self.end or any(not 0 <= t < self.V for t in toks[:-1]):
            raise InvalidOutcomeError(
                f"sequence must be tokens in [0, {self.V}) followed by end token {self.end}")
        return toks

    def _steps(self, toks):
        """Yield (prev, next) for every non-forced transition."""
        prev = self.end  # begin state shares the reserved id
        for pos, tok in enumerate(toks):
            if pos == self.max_len - 1:
                return  # forced end token, log-prob 0
            yield prev, tok
            prev = tok

    def _log_prob_sum(self, x: int, toks) -> float:
        lp = self._log_probs[x]
        return float(sum(lp[a, b] for a, b in self._steps(toks)))

    def log_prob(self, x, y) -> float:
        x = self._check_prompt(x)
        toks = self._check_outcome(y)
        total = self._log_prob_sum(x, toks)
        return total / len(toks) if self.aggregation == "mean" else total

    def grad_log_prob(self, x, y) -> np.ndarray:
        x = self._check_prompt(x)
        toks = self._check_outcome(y)
        g = np.zeros(self._logits.shape)
        probs = np.exp(self._log_probs[x])
        for a, b in self._steps(toks):
            g[x, a] -= probs[a]
            g[x, a, b] += 1.0
        if self.aggregation == "mean":
            g /= len(toks)
        return g.reshape(-1)

    def sample(self, x, n, rng) -> list[tuple[int, ...]]:
        x = self._check_prompt(x)
        if n < 1:
            raise InvalidInputError("n must be >= 1")
        probs = np.exp(self._log_probs[x])
        cdf = np.cumsum(probs, axis=1)
        out = []
        for _ in range(n):
            seq = []
            prev = self.end
            while True:
                if len(seq) == self.max_len - 1:
                    tok = self.end
                else:
                    u = rng.random() * cdf[prev, -1]
                    tok = min(int(np.searchsorted(cdf[prev], u, side="right")), self.V)
                seq.append(tok)
                if tok == self.end:
                    break
                prev = tok
            out.append(tuple(seq))
        return out

    def support_size(self) -> int:
        return sum(self.V ** k for k in range(self.max_len))

    @property
    def enumerable(self) -> bool:
        return self.support_size() <= self.enumeration_cap

    def enumerate_support(self, x) -> list[tuple[tuple[int, ...], float]]:
        x = self._check_prompt(x)
        if not self.enumerable:
            raise NotEnumerableError(
                f"{self.support_size()} sequences exceed enumeration cap {self.enumeration_cap}")
        lp = self._log_probs[x]
        out = []

        def expand(prefix, prev, logp):
            if len(prefix) == self.max_len - 1:
                out.append((prefix + (self.end,), logp))
                return
            out.append((prefix + (self.end,), logp + lp[prev, self.end]))
            for tok in range(self.V):
                expand(prefix + (tok,), tok, logp + lp[prev, tok])

        expand((), self.end, 0.0)
        return [(seq, math.exp(logp)) for seq, logp in out]


def all_sequences(V: int, max_len: int) -> list[tuple[int, ...]]:
    """Every terminated sequence of a bigram space, in enumeration order."""
    seqs = []
    for k in range(max_len):
        seqs.extend(tuple(p) + (V,) for p in itertools.product(range(V), repeat=k))
    return seqs


def policy_from_dict(d: dict) -> Policy:
    family = d.get("family")
    params = np.array(d["params"], dtype=np.float64)
    P = int(d["num_prompts"])
    if family == "categorical":
        return CategoricalPolicy(params.reshape(P, int(d["V"])))
    if family == "gaussian":
        return GaussianPolicy(float(params[0]), P)
    if family == "bigram":
        V = int(d["V"])
        return BigramPolicy(params.reshape(P, V + 1, V + 1), int(d["L_max"]),
                            d.get("aggregation") or "mean")
    raise InvalidInputError(f"unknown policy family {family!r}")


def policy_from_text(text: str) -> Policy:
    return policy_from_dict(json.loads(text))


def load_policy(path) -> Policy:
    with open(path, encoding="utf-8") as fh:
        return policy_from_text(fh.read())
