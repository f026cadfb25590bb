"""Refresh scheduling and adaptive token selection. Everything here is pure."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from dcache import tensor
from dcache.exceptions import ConfigError, ContractViolation


class Metric(str, enum.Enum):
    COSINE = "cosine"
    L2 = "l2"


class Selection(str, enum.Enum):
    VALUE = "value"
    KEY = "key"
    RANDOM = "random"


@dataclass(frozen=True)
class CachePolicy:
    prompt_interval: int = 16
    response_interval: int = 8
    update_ratio: float = 0.25
    metric: Metric = Metric.COSINE
    enabled: bool = True
    selection: Selection = Selection.VALUE
    seed: int = 0

    def __post_init__(self):
        try:
            object.__setattr__(self, "metric", Metric(self.metric))
            object.__setattr__(self, "selection", Selection(self.selection))
        except ValueError as e:
            raise ConfigError(str(e)) from None
        for name in ("prompt_interval", "response_interval"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")
        ratio = self.update_ratio
        if isinstance(ratio, bool) or not isinstance(ratio, (int, float)) or not 0.0 <= ratio <= 1.0:
            raise ConfigError(f"update_ratio must be a number in [0, 1], got {ratio!r}")
        object.__setattr__(self, "update_ratio", float(ratio))
        if not isinstance(self.enabled, bool):
            raise ConfigError(f"enabled must be true or false, got {self.enabled!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")


def refresh_flags(k: int, policy: CachePolicy) -> Tuple[bool, bool]:
    return k % policy.prompt_interval == 0, k % policy.response_interval == 0


def update_count(ratio: float, length: int) -> int:
    """floor(ratio * length), tolerant of decimal ratios that are not exact in binary."""
    return min(length, max(0, math.floor(ratio * length + 1e-9)))


def score_tokens(v_new: np.ndarray, v_cached: np.ndarray, metric: Metric = Metric.COSINE) -> np.ndarray:
    if v_new.shape != v_cached.shape:
        raise ContractViolation(f"cannot score {v_new.shape} against {v_cached.shape}")
    if Metric(metric) is Metric.COSINE:
        return tensor.rowwise_cosine(v_new, v_cached)
    return tensor.rowwise_l2(v_new, v_cached)


def select_update_indices(scores: Sequence[float], ratio: float,
                          metric: Metric = Metric.COSINE) -> List[int]:
    """Indices of the floor(ratio * n) most-changed tokens, ascending.

    Cosine: lowest similarity first. L2: largest distance first. Equal scores
    resolve to the lower index.
    """
    s = np.asarray(scores, dtype=np.float64)
    n = update_count(ratio, s.size)
    if n == 0:
        return []
    key = s if Metric(metric) is Metric.COSINE else -s
    order = np.argsort(key, kind="stable")
    return sorted(int(i) for i in order[:n])


def select_random_indices(length: int, ratio: float, rng: np.random.Generator) -> List[int]:
    n = update_count(ratio, length)
    if n == 0:
        return []
    return sorted(int(i) for i in rng.choice(length, size=n, replace=False))


def selection_rng(policy: CachePolicy, k: int, layer: int) -> np.random.Generator:
    return np.random.default_rng([policy.seed, k, layer])
