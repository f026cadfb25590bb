from __future__ import annotations

import abc

import numpy as np


class TransitionStrategy(abc.ABC):
    name: str = ""

    @abc.abstractmethod
    def choose(self, candidates: np.ndarray, confidences: np.ndarray, count: int) -> np.ndarray:
        """Pick ``count`` of the masked ``candidates`` positions to commit, ascending."""


class LowConfidenceRemasking(TransitionStrategy):
    """
    Commits the most confident predictions and leaves the rest masked.

    Committed tokens are never remasked; equal confidences resolve to the lower
    position.
    """

    name = "low_confidence"

    def choose(self, candidates: np.ndarray, confidences: np.ndarray, count: int) -> np.ndarray:
        candidates = np.asarray(candidates, dtype=np.int64)
        conf = np.asarray(confidences, dtype=np.float64)[candidates]
        order = np.lexsort((candidates, -conf))
        return np.sort(candidates[order[:count]])
