"""
Toy bidirectional transformer used as the mask predictor.

Weights are seeded Gaussian draws; there are no biases, no learned norm
parameters and no dropout. Each public op charges its matmul FLOPs to an
optional ledger (anything with a ``charge(kind, flops)`` method).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import TYPE_CHECKING, Optional, Sequence, Tuple

import numpy as np

from dcache import tensor
from dcache.exceptions import ConfigError, ContractViolation
from dcache.tensor import Matrix

if TYPE_CHECKING:
    from dcache.engine import SequenceState
    from dcache.metrics import FlopLedger

logger = logging.getLogger(__name__)

WEIGHT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 258
    mask_token_id: int = 256
    seed: int = 0
    norm_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must leave at least one token besides the mask")
        if not 0 <= self.mask_token_id < self.vocab_size:
            raise ConfigError(f"mask_token_id {self.mask_token_id} outside vocabulary")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if not self.norm_eps > 0:
            raise ConfigError("norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


@dataclass(frozen=True)
class LayerParams:
    wq: Matrix
    wk: Matrix
    wv: Matrix
    wo: Matrix
    w_up: Matrix
    w_down: Matrix


@dataclass(frozen=True)
class ModelParams:
    config: ModelConfig
    embedding: Matrix
    layers: Tuple[LayerParams, ...]
    head: Matrix

    def weight_bytes(self) -> bytes:
        parts = [self.embedding.tobytes()]
        for lp in self.layers:
            parts.extend(m.tobytes() for m in (lp.wq, lp.wk, lp.wv, lp.wo, lp.w_up, lp.w_down))
        parts.append(self.head.tobytes())
        return b"".join(parts)


def _frozen(m: np.ndarray) -> np.ndarray:
    m.setflags(write=False)
    return m


def init_model(cfg: ModelConfig) -> ModelParams:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, f = cfg.hidden_dim, cfg.ffn_dim

    def draw(rows: int, cols: int) -> Matrix:
        return _frozen(rng.normal(0.0, WEIGHT_STD, size=(rows, cols)).astype(np.float32))

    embedding = draw(cfg.vocab_size, d)
    layers = tuple(
        LayerParams(
            wq=draw(d, d), wk=draw(d, d), wv=draw(d, d), wo=draw(d, d),
            w_up=draw(d, f), w_down=draw(f, d),
        )
        for _ in range(cfg.num_layers)
    )
    head = draw(d, cfg.vocab_size)
    logger.debug("initialised model: L=%d d=%d heads=%d seed=%d",
                 cfg.num_layers, d, cfg.num_heads, cfg.seed)
    return ModelParams(config=cfg, embedding=embedding, layers=layers, head=head)


@lru_cache(maxsize=32)
def positional_encoding(length: int, dim: int) -> Matrix:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim)
    rates = 1.0 / np.power(10000.0, (2 * (i // 2)) / dim)
    angles = pos * rates[None, :]
    pe = np.where(i % 2 == 0, np.sin(angles), np.cos(angles)).astype(np.float32)
    return _frozen(pe.reshape(length, dim))


def embed(params: ModelParams, tokens: Sequence[int]) -> Matrix:
    cfg = params.config
    ids = np.asarray(list(tokens), dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ContractViolation(f"token id outside vocabulary of {cfg.vocab_size}")
    rows = params.embedding[ids] + positional_encoding(ids.size, cfg.hidden_dim)
    return np.ascontiguousarray(rows.astype(np.float32))


def linear(x: Matrix, w: Matrix, ledger: Optional["FlopLedger"] = None, kind: str = "qkv") -> Matrix:
    out = tensor.matmul(x, w)
    if ledger is not None:
        ledger.charge(kind, 2 * x.shape[0] * x.shape[1] * w.shape[1])
    return out


def _check_width(x: Matrix, cfg: ModelConfig, name: str) -> None:
    if x.ndim != 2 or x.shape[1] != cfg.hidden_dim:
        raise ContractViolation(f"{name} must have {cfg.hidden_dim} columns, got shape {x.shape}")


def qkv_project(params: ModelParams, layer: int, x_norm: Matrix,
                ledger: Optional["FlopLedger"] = None) -> Tuple[Matrix, Matrix, Matrix]:
    _check_width(x_norm, params.config, "x_norm")
    lp = params.layers[layer]
    return (linear(x_norm, lp.wq, ledger), linear(x_norm, lp.wk, ledger),
            linear(x_norm, lp.wv, ledger))


def attention(params: ModelParams, layer: int, q: Matrix, k: Matrix, v: Matrix,
              ledger: Optional["FlopLedger"] = None) -> Matrix:
    """Bidirectional multi-head attention followed by the output projection.

    ``q`` may cover any subset of the sequence while ``k``/``v`` cover all of it.
    """
    cfg = params.config
    for name, m in (("Q", q), ("K", k), ("V", v)):
        _check_width(m, cfg, name)
    if k.shape[0] != v.shape[0]:
        raise ContractViolation(f"K has {k.shape[0]} rows but V has {v.shape[0]}")
    n, t = q.shape[0], k.shape[0]
    h, dh = cfg.num_heads, cfg.head_dim

    qh = q.reshape(n, h, dh).transpose(1, 0, 2)
    kt = k.reshape(t, h, dh).transpose(1, 2, 0)
    vh = v.reshape(t, h, dh).transpose(1, 0, 2)
    scores = tensor.batched_matmul(qh, kt) * np.float32(1.0 / math.sqrt(dh))
    weights = tensor.softmax_rows(scores)
    ctx = tensor.batched_matmul(weights, vh)
    merged = np.ascontiguousarray(ctx.transpose(1, 0, 2).reshape(n, cfg.hidden_dim))
    if ledger is not None:
        ledger.charge("attention", 4 * n * t * cfg.hidden_dim)
    return linear(merged, params.layers[layer].wo, ledger, "out_proj")


def ffn(params: ModelParams, layer: int, h_norm: Matrix,
        ledger: Optional["FlopLedger"] = None) -> Matrix:
    _check_width(h_norm, params.config, "h_norm")
    lp = params.layers[layer]
    up = linear(h_norm, lp.w_up, ledger, "ffn")
    return linear(tensor.gelu(up), lp.w_down, ledger, "ffn")


def greedy_from_logits(logits: np.ndarray, mask_token_id: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row argmax (lowest id wins ties) over all tokens but the mask, with its probability.

    The probability is taken from the softmax over the whole row, mask logit included.
    """
    x = np.array(logits, dtype=np.float64, ndmin=2)
    candidates = x.copy()
    candidates[:, mask_token_id] = -np.inf
    tokens = np.argmax(candidates, axis=1)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    confidences = e[np.arange(x.shape[0]), tokens] / tensor.row_sum(e)
    return tokens.astype(np.int64), confidences


def decode_greedy(params: ModelParams, hidden: Matrix, state: "SequenceState",
                  ledger: Optional["FlopLedger"] = None) -> Tuple[np.ndarray, np.ndarray]:
    cfg = params.config
    m = len(state.prompt)
    if hidden.shape[0] != m + state.response.size:
        raise ContractViolation(
            f"hidden has {hidden.shape[0]} rows for a sequence of {m + state.response.size}"
        )
    predictions = state.response.astype(np.int64).copy()
    confidences = np.ones(state.response.size, dtype=np.float64)
    masked = np.flatnonzero(state.masked)
    if masked.size:
        rows = tensor.gather_rows(hidden, masked + m)
        logits = linear(tensor.layer_norm(rows, cfg.norm_eps), params.head, ledger, "head")
        predictions[masked], confidences[masked] = greedy_from_logits(logits, cfg.mask_token_id)
    return predictions, confidences
