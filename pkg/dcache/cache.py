"""
Dual feature cache: one prompt entry and one response entry per layer, each
holding K, V, AttnOut and FFNOut for the tokens of that segment.
"""

from __future__ import annotations

import enum
import logging
import os
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from dcache import tensor
from dcache.exceptions import ColdCacheError, ContractViolation
from dcache.tensor import Matrix

logger = logging.getLogger(__name__)

NEVER_WRITTEN = np.iinfo(np.int64).min


class Side(str, enum.Enum):
    PROMPT = "prompt"
    RESPONSE = "response"


class Feature(str, enum.Enum):
    K = "k"
    V = "v"
    ATTN_OUT = "attn_out"
    FFN_OUT = "ffn_out"


SCATTERABLE = frozenset({Feature.K, Feature.ATTN_OUT, Feature.FFN_OUT})


@dataclass(frozen=True)
class LayerFeatures:
    k: Matrix
    v: Matrix
    attn_out: Matrix
    ffn_out: Matrix

    def __post_init__(self):
        shape = self.k.shape
        for f in Feature:
            m = getattr(self, f.value)
            if m.ndim != 2 or m.shape != shape:
                raise ContractViolation(
                    f"feature {f.value} has shape {m.shape}, expected {shape}"
                )

    @property
    def rows(self) -> int:
        return self.k.shape[0]

    def get(self, feature: Feature) -> Matrix:
        return getattr(self, Feature(feature).value)

    def replace(self, **changes: Matrix) -> "LayerFeatures":
        fields = {f.value: getattr(self, f.value) for f in Feature}
        fields.update(changes)
        return LayerFeatures(**fields)

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "LayerFeatures":
        return cls(*(tensor.zeros(rows, cols) for _ in Feature))


@dataclass(frozen=True)
class WriteRecord:
    step: Optional[int]
    layer: int
    side: Side
    feature: Feature
    rows: Optional[Tuple[int, ...]]  # None means the whole matrix


class DualCache:
    def __init__(self, num_layers: int, prompt_len: int, response_len: int, hidden_dim: int,
                 track_writes: bool = False):
        if num_layers < 1 or response_len < 1 or hidden_dim < 1 or prompt_len < 0:
            raise ContractViolation(
                "cache needs num_layers, response_len, hidden_dim >= 1 and prompt_len >= 0"
            )
        self.num_layers = num_layers
        self.prompt_len = prompt_len
        self.response_len = response_len
        self.hidden_dim = hidden_dim
        self.track_writes = track_writes
        self.writes: List[WriteRecord] = []
        self.step: Optional[int] = None
        self._entries: Dict[Side, List[LayerFeatures]] = {
            side: [LayerFeatures.zeros(self.length(side), hidden_dim) for _ in range(num_layers)]
            for side in Side
        }
        self._cold: Dict[Side, List[bool]] = {side: [True] * num_layers for side in Side}
        self._last_write: Dict[Side, List[Dict[Feature, np.ndarray]]] = {
            side: [
                {f: np.full(self.length(side), NEVER_WRITTEN, dtype=np.int64) for f in Feature}
                for _ in range(num_layers)
            ]
            for side in Side
        }

    def length(self, side: Side) -> int:
        return self.prompt_len if Side(side) is Side.PROMPT else self.response_len

    def begin_step(self, k: int) -> None:
        self.step = k

    def is_cold(self, layer: int, side: Side) -> bool:
        return self._cold[Side(side)][layer]

    def invalidate(self) -> None:
        for side in Side:
            self._cold[side] = [True] * self.num_layers

    def read(self, layer: int, side: Side) -> LayerFeatures:
        side = Side(side)
        if self._cold[side][layer]:
            raise ColdCacheError(f"read of cold {side.value} entry at layer {layer}")
        return self._entries[side][layer]

    def peek(self, layer: int, side: Side) -> LayerFeatures:
        """Read without the cold check (inspection and tests)."""
        return self._entries[Side(side)][layer]

    def _record(self, layer: int, side: Side, feature: Feature, rows: Optional[np.ndarray]) -> None:
        stamp = self.step if self.step is not None else 0
        last = self._last_write[side][layer][feature]
        if rows is None:
            last[:] = stamp
        else:
            last[rows] = stamp
        if self.track_writes:
            self.writes.append(WriteRecord(
                self.step, layer, side, feature,
                None if rows is None else tuple(int(r) for r in rows),
            ))

    def replace_segment(self, layer: int, side: Side, feats: LayerFeatures) -> None:
        side = Side(side)
        if feats.rows != self.length(side) or feats.k.shape[1] != self.hidden_dim:
            raise ContractViolation(
                f"{side.value} segment needs {self.length(side)}x{self.hidden_dim}, "
                f"got {feats.k.shape}"
            )
        self._entries[side][layer] = feats
        self._cold[side][layer] = False
        for f in Feature:
            self._record(layer, side, f, None)

    def replace_matrix(self, layer: int, side: Side, feature: Feature, m: Matrix) -> None:
        """Wholesale replacement of a single feature matrix of a warm entry."""
        side, feature = Side(side), Feature(feature)
        entry = self.read(layer, side)
        if m.shape != entry.k.shape:
            raise ContractViolation(f"{feature.value} replacement has shape {m.shape}")
        self._entries[side][layer] = entry.replace(**{feature.value: m})
        self._record(layer, side, feature, None)

    def scatter_update_segment(self, layer: int, side: Side, idx: Iterable[int],
                               partial: Mapping[Feature, Matrix]) -> None:
        """Overwrite rows ``idx`` of the named features; V is never scattered."""
        side = Side(side)
        sel = tensor.validate_indices(idx, self.length(side))
        which = {Feature(f) for f in partial}
        if not which <= SCATTERABLE:
            raise ContractViolation("only K, attn_out and ffn_out may be scatter-updated")
        entry = self.read(layer, side)
        if sel.size == 0:
            return
        changes = {}
        for f in sorted(which, key=lambda f: f.value):
            changes[f.value] = tensor.scatter_rows(entry.get(f), sel, partial[f])
            self._record(layer, side, f, sel)
        self._entries[side][layer] = entry.replace(**changes)

    def row_age(self, layer: int, side: Side, feature: Feature, k: int) -> np.ndarray:
        """Steps since each row was last written, counting down from the write step."""
        last = self._last_write[Side(side)][layer][Feature(feature)]
        return last - k

    def memory_elements(self) -> int:
        return sum(
            entry.get(f).size
            for side in Side
            for entry in self._entries[side]
            for f in Feature
        )


def cache_init(num_layers: int, prompt_len: int, response_len: int, hidden_dim: int,
               track_writes: bool = False) -> DualCache:
    return DualCache(num_layers, prompt_len, response_len, hidden_dim, track_writes=track_writes)


def replace_segment(cache: DualCache, layer: int, side: Side, feats: LayerFeatures) -> None:
    cache.replace_segment(layer, side, feats)


def scatter_update_segment(cache: DualCache, layer: int, side: Side, idx: Iterable[int],
                           partial: Mapping[Feature, Matrix]) -> None:
    cache.scatter_update_segment(layer, side, idx, partial)


def memory_elements(cache: DualCache) -> int:
    return cache.memory_elements()


HEADER = np.dtype("<u8")


def dump_entry(cache: DualCache, layer: int, side: Side, feature: Feature, path) -> None:
    """Write one cached matrix as a 16-byte (rows, cols) header plus row-major float32."""
    m = cache.peek(layer, side).get(feature)
    with open(path, "wb") as f:
        f.write(np.array(m.shape, dtype=HEADER).tobytes())
        f.write(np.ascontiguousarray(m, dtype="<f4").tobytes())
    logger.debug("dumped %s/%s layer %d to %s", Side(side).value, Feature(feature).value,
                 layer, os.fspath(path))


def load_entry(path) -> Matrix:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16:
        raise ContractViolation(f"{os.fspath(path)} is too short for a cache dump")
    rows, cols = (int(x) for x in np.frombuffer(raw[:16], dtype=HEADER))
    data = np.frombuffer(raw[16:], dtype="<f4")
    if data.size != rows * cols:
        raise ContractViolation(f"{os.fspath(path)} holds {data.size} values, header says {rows}x{cols}")
    return data.astype(np.float32).reshape(rows, cols)
