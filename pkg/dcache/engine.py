"""
Denoising loop over the cached layer cases, plus the uncached reference path.

Steps count down from ``K`` to ``1``. Step ``K`` is a full pass that fills the
cache; every later step picks one of four per-layer cases from the refresh
flags:

    1  refresh prompt and response      (both flags)
    2  refresh prompt, reuse response   (prompt flag only)
    3  refresh response, reuse prompt   (response flag only)
    4  adaptive partial update          (neither; ``0`` when the ratio is 0)

Each step ends with greedy decoding and the low-confidence transition.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np

from dcache import model as mdl
from dcache import tensor
from dcache.cache import DualCache, Feature, LayerFeatures, Side, cache_init
from dcache.exceptions import ConfigError, InvariantViolation, SchedulingError
from dcache.metrics import FlopLedger, GenerationResult, RunMetrics, SimilarityTracer, StepRecord
from dcache.model import ModelParams
from dcache.policy import (
    CachePolicy,
    Metric,
    Selection,
    refresh_flags,
    score_tokens,
    select_random_indices,
    select_update_indices,
    selection_rng,
)
from dcache.strategies import TransitionStrategy, get_strategy
from dcache.tensor import Matrix, concat_rows

logger = logging.getLogger(__name__)

INIT, UNCACHED = "I", "U"
FULL, PROMPT_ONLY, RESPONSE_ONLY, ADAPTIVE, PURE_REUSE = "1", "2", "3", "4", "0"


@dataclass(frozen=True)
class GenConfig:
    steps: int = 64
    gen_len: int = 64
    block_len: int = 8
    prompt: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        for name in ("steps", "gen_len", "block_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.block_len > self.gen_len:
            raise ConfigError(f"block_len {self.block_len} exceeds gen_len {self.gen_len}")
        if any(t < 0 for t in self.prompt):
            raise ConfigError("prompt token ids must be non-negative")
        if self.steps < self.num_blocks:
            raise ConfigError(
                f"{self.steps} steps cannot cover {self.num_blocks} blocks (need one step per block)"
            )

    @property
    def num_blocks(self) -> int:
        return math.ceil(self.gen_len / self.block_len)

    @property
    def prompt_len(self) -> int:
        return len(self.prompt)

    def block_bounds(self, block: int) -> Tuple[int, int]:
        start = block * self.block_len
        return start, min(start + self.block_len, self.gen_len)


def _spread(total: int, slots: int) -> List[int]:
    """``total`` split over ``slots`` as evenly as possible, earliest slots taking the remainder."""
    base, rem = divmod(total, slots)
    return [base + (1 if i < rem else 0) for i in range(slots)]


@lru_cache(maxsize=64)
def transfer_schedule(gen_cfg: GenConfig) -> Tuple[Tuple[int, int], ...]:
    """(block, tokens to commit) for each step, first entry at k = K."""
    schedule = []
    steps_per_block = _spread(gen_cfg.steps, gen_cfg.num_blocks)
    for block, block_steps in enumerate(steps_per_block):
        start, stop = gen_cfg.block_bounds(block)
        schedule.extend((block, n) for n in _spread(stop - start, block_steps))
    return tuple(schedule)


def masked_counts(gen_cfg: GenConfig) -> List[int]:
    """Number of masked response positions entering each step, first entry at k = K."""
    remaining = gen_cfg.gen_len
    counts = []
    for _, n in transfer_schedule(gen_cfg):
        counts.append(remaining)
        remaining -= n
    return counts


@dataclass
class SequenceState:
    prompt: Tuple[int, ...]
    response: np.ndarray
    masked: np.ndarray
    step: int
    block_cursor: int = 0

    @classmethod
    def initial(cls, gen_cfg: GenConfig, mask_token_id: int) -> "SequenceState":
        if mask_token_id in gen_cfg.prompt:
            raise ConfigError("prompt must not contain the mask token")
        return cls(
            prompt=gen_cfg.prompt,
            response=np.full(gen_cfg.gen_len, mask_token_id, dtype=np.int64),
            masked=np.ones(gen_cfg.gen_len, dtype=bool),
            step=gen_cfg.steps,
        )

    def tokens(self) -> np.ndarray:
        return np.concatenate((np.asarray(self.prompt, dtype=np.int64), self.response))

    def validate(self, mask_token_id: int) -> None:
        if not np.array_equal(self.masked, self.response == mask_token_id):
            raise InvariantViolation("mask flags disagree with response tokens")
        if mask_token_id in self.prompt:
            raise InvariantViolation("prompt contains the mask token")


def transition(state: SequenceState, predictions: np.ndarray, confidences: np.ndarray,
               k: int, gen_cfg: GenConfig, strategy: Optional[TransitionStrategy] = None) -> SequenceState:
    strategy = strategy or get_strategy()
    schedule = transfer_schedule(gen_cfg)
    s = gen_cfg.steps - k
    if not 0 <= s < len(schedule):
        raise SchedulingError(f"step {k} is outside the {gen_cfg.steps}-step schedule")
    if len(predictions) != state.response.size or len(confidences) != state.response.size:
        raise SchedulingError("predictions must cover every response position")
    block, count = schedule[s]
    start, stop = gen_cfg.block_bounds(block)
    candidates = start + np.flatnonzero(state.masked[start:stop])
    if count > candidates.size:
        raise SchedulingError(
            f"step {k} wants {count} commits in block {block} but only {candidates.size} are masked"
        )

    response = state.response.copy()
    masked = state.masked.copy()
    chosen = strategy.choose(candidates, confidences, count)
    response[chosen] = np.asarray(predictions, dtype=np.int64)[chosen]
    masked[chosen] = False
    if k == 1 and masked.any():
        raise SchedulingError(f"schedule exhausted with {int(masked.sum())} masked positions left")

    open_blocks = [b for b in range(gen_cfg.num_blocks)
                   if masked[slice(*gen_cfg.block_bounds(b))].any()]
    cursor = open_blocks[0] if open_blocks else gen_cfg.num_blocks
    return SequenceState(state.prompt, response, masked, step=k - 1, block_cursor=cursor)


# ---------------------------------------------------------------------------
# layer cases
# ---------------------------------------------------------------------------

def _split(m: Matrix, at: int) -> Tuple[Matrix, Matrix]:
    return np.ascontiguousarray(m[:at]), np.ascontiguousarray(m[at:])


def reference_layer(params: ModelParams, layer: int, x_in: Matrix,
                    ledger: Optional[FlopLedger] = None) -> Tuple[Matrix, LayerFeatures]:
    eps = params.config.norm_eps
    q, k, v = mdl.qkv_project(params, layer, tensor.layer_norm(x_in, eps), ledger)
    attn = mdl.attention(params, layer, q, k, v, ledger)
    h = x_in + attn
    ffn_out = mdl.ffn(params, layer, tensor.layer_norm(h, eps), ledger)
    return h + ffn_out, LayerFeatures(k, v, attn, ffn_out)


def layer_case1_full_refresh(params: ModelParams, x_in: Matrix, layer: int, cache: DualCache,
                             ledger: Optional[FlopLedger] = None) -> Matrix:
    m = cache.prompt_len
    x_out, feats = reference_layer(params, layer, x_in, ledger)
    parts = [_split(feats.get(f), m) for f in Feature]
    cache.replace_segment(layer, Side.PROMPT, LayerFeatures(*(p for p, _ in parts)))
    cache.replace_segment(layer, Side.RESPONSE, LayerFeatures(*(r for _, r in parts)))
    if ledger is not None:
        ledger.recomputed(x_in.shape[0])
    return x_out


def layer_case2_prompt_only(params: ModelParams, x_in: Matrix, layer: int, cache: DualCache,
                            ledger: Optional[FlopLedger] = None) -> Matrix:
    eps = params.config.norm_eps
    m = cache.prompt_len
    resp = cache.read(layer, Side.RESPONSE)

    q_p, k_p, v_p = mdl.qkv_project(params, layer, tensor.layer_norm(x_in[:m], eps), ledger)
    attn_p = mdl.attention(params, layer, q_p, concat_rows(k_p, resp.k),
                           concat_rows(v_p, resp.v), ledger)
    h = x_in + concat_rows(attn_p, resp.attn_out)
    ffn_p = mdl.ffn(params, layer, tensor.layer_norm(h[:m], eps), ledger)
    x_out = h + concat_rows(ffn_p, resp.ffn_out)

    cache.replace_segment(layer, Side.PROMPT, LayerFeatures(k_p, v_p, attn_p, ffn_p))
    if ledger is not None:
        ledger.recomputed(m)
    return x_out


def layer_case3_response_only(params: ModelParams, x_in: Matrix, layer: int, cache: DualCache,
                              ledger: Optional[FlopLedger] = None) -> Matrix:
    eps = params.config.norm_eps
    m = cache.prompt_len
    prm = cache.read(layer, Side.PROMPT)

    q_r, k_r, v_r = mdl.qkv_project(params, layer, tensor.layer_norm(x_in[m:], eps), ledger)
    attn_r = mdl.attention(params, layer, q_r, concat_rows(prm.k, k_r),
                           concat_rows(prm.v, v_r), ledger)
    h = x_in + concat_rows(prm.attn_out, attn_r)
    ffn_r = mdl.ffn(params, layer, tensor.layer_norm(h[m:], eps), ledger)
    x_out = h + concat_rows(prm.ffn_out, ffn_r)

    cache.replace_segment(layer, Side.RESPONSE, LayerFeatures(k_r, v_r, attn_r, ffn_r))
    if ledger is not None:
        ledger.recomputed(x_in.shape[0] - m)
    return x_out


def layer_case4_adaptive(params: ModelParams, x_in: Matrix, layer: int, cache: DualCache,
                         ratio: float, metric: Metric = Metric.COSINE,
                         ledger: Optional[FlopLedger] = None,
                         selection: Selection = Selection.VALUE,
                         rng: Optional[np.random.Generator] = None) -> Matrix:
    """Recompute only the most-changed response rows; ratio 0 is pure cache retrieval.

    The response V cache is always replaced by the fresh projection. Unselected
    rows keep their cached AttnOut/FFNOut even though V moved underneath them.
    """
    m = cache.prompt_len
    prm = cache.read(layer, Side.PROMPT)
    resp = cache.read(layer, Side.RESPONSE)

    if ratio <= 0:
        h = x_in + concat_rows(prm.attn_out, resp.attn_out)
        return h + concat_rows(prm.ffn_out, resp.ffn_out)

    eps = params.config.norm_eps
    lp = params.layers[layer]
    selection = Selection(selection)
    x_r_norm = tensor.layer_norm(x_in[m:], eps)

    v_new = mdl.linear(x_r_norm, lp.wv, ledger,
                       "qkv" if selection is Selection.RANDOM else "verify")
    if selection is Selection.VALUE:
        idx = select_update_indices(score_tokens(v_new, resp.v, metric), ratio, metric)
    elif selection is Selection.KEY:
        k_full = mdl.linear(x_r_norm, lp.wk, ledger, "verify")
        idx = select_update_indices(score_tokens(k_full, resp.k, metric), ratio, metric)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = select_random_indices(x_r_norm.shape[0], ratio, rng)

    x_sel = tensor.gather_rows(x_r_norm, idx)
    q_sel = mdl.linear(x_sel, lp.wq, ledger)
    if selection is Selection.KEY:
        k_updated = k_full
        cache.replace_matrix(layer, Side.RESPONSE, Feature.K, k_full)
    else:
        k_sel = mdl.linear(x_sel, lp.wk, ledger)
        k_updated = tensor.scatter_rows(resp.k, idx, k_sel)
        cache.scatter_update_segment(layer, Side.RESPONSE, idx, {Feature.K: k_sel})
    cache.replace_matrix(layer, Side.RESPONSE, Feature.V, v_new)

    attn_sel = mdl.attention(params, layer, q_sel, concat_rows(prm.k, k_updated),
                             concat_rows(prm.v, v_new), ledger)
    attn_r = tensor.scatter_rows(resp.attn_out, idx, attn_sel)
    cache.scatter_update_segment(layer, Side.RESPONSE, idx, {Feature.ATTN_OUT: attn_sel})
    h = x_in + concat_rows(prm.attn_out, attn_r)

    h_sel = tensor.gather_rows(h[m:], idx)
    ffn_sel = mdl.ffn(params, layer, tensor.layer_norm(h_sel, eps), ledger)
    ffn_r = tensor.scatter_rows(resp.ffn_out, idx, ffn_sel)
    cache.scatter_update_segment(layer, Side.RESPONSE, idx, {Feature.FFN_OUT: ffn_sel})

    if ledger is not None:
        ledger.recomputed(len(idx))
    return h + concat_rows(prm.ffn_out, ffn_r)


# ---------------------------------------------------------------------------
# driver
# ---------------------------------------------------------------------------

_REUSED_SIDES = {
    PROMPT_ONLY: (Side.RESPONSE,),
    RESPONSE_ONLY: (Side.PROMPT,),
    ADAPTIVE: (Side.PROMPT, Side.RESPONSE),
    PURE_REUSE: (Side.PROMPT, Side.RESPONSE),
}


class DenoisingEngine:
    """
    Runs one generation. With ``policy=None`` every layer takes the uncached
    reference path and no cache exists.

    ``step()`` advances a single denoising step and accepts a per-step policy
    override; a step taken with a disabled policy runs uncached and leaves the
    cache cold, so the next cached step falls back to a full refresh.
    """

    def __init__(self, params: ModelParams, gen_cfg: GenConfig,
                 policy: Optional[CachePolicy] = None, *, track_writes: bool = False,
                 tracer: Optional[SimilarityTracer] = None,
                 strategy: Optional[TransitionStrategy] = None):
        cfg = params.config
        self.params = params
        self.gen_cfg = gen_cfg
        self.policy = policy
        self.tracer = tracer
        self.strategy = strategy or get_strategy()
        self.state = SequenceState.initial(gen_cfg, cfg.mask_token_id)
        self.ledger = FlopLedger()
        self.cache: Optional[DualCache] = None
        if policy is not None:
            self.cache = cache_init(cfg.num_layers, gen_cfg.prompt_len, gen_cfg.gen_len,
                                    cfg.hidden_dim, track_writes=track_writes)
        self._footprint = self.cache.memory_elements() if self.cache is not None else 0
        self.metrics = RunMetrics(gen_len=gen_cfg.gen_len, cache_elements=self._footprint)
        self.final_hidden: Optional[Matrix] = None
        self.k = gen_cfg.steps

    @property
    def done(self) -> bool:
        return self.k < 1

    def _case(self, k: int, layer: int, policy: Optional[CachePolicy]) -> str:
        if self.cache is None or policy is None or not policy.enabled:
            return UNCACHED
        if k == self.gen_cfg.steps:
            return INIT
        if self.cache.is_cold(layer, Side.PROMPT) or self.cache.is_cold(layer, Side.RESPONSE):
            logger.debug("step %d layer %d: cold cache, forcing full refresh", k, layer)
            return FULL
        refresh_prompt, refresh_response = refresh_flags(k, policy)
        if refresh_prompt and refresh_response:
            return FULL
        if refresh_prompt:
            return PROMPT_ONLY
        if refresh_response:
            return RESPONSE_ONLY
        return ADAPTIVE if policy.update_ratio > 0 else PURE_REUSE

    def _staleness(self, k: int, layer: int, code: str, ages: dict) -> None:
        for side in _REUSED_SIDES.get(code, ()):
            if self.cache.length(side) == 0:
                continue
            oldest = max(int(self.cache.row_age(layer, side, f, k).max()) for f in Feature)
            ages[side] = max(ages.get(side, 0), oldest)

    def _run_layer(self, code: str, x: Matrix, layer: int, k: int,
                   policy: Optional[CachePolicy]) -> Matrix:
        if code == UNCACHED:
            x_out, feats = reference_layer(self.params, layer, x, self.ledger)
            self.ledger.recomputed(x.shape[0])
            if self.tracer is not None:
                self.tracer.record(k, layer, feats)
            return x_out
        if code in (INIT, FULL):
            return layer_case1_full_refresh(self.params, x, layer, self.cache, self.ledger)
        if code == PROMPT_ONLY:
            return layer_case2_prompt_only(self.params, x, layer, self.cache, self.ledger)
        if code == RESPONSE_ONLY:
            return layer_case3_response_only(self.params, x, layer, self.cache, self.ledger)
        return layer_case4_adaptive(
            self.params, x, layer, self.cache, policy.update_ratio, policy.metric,
            self.ledger, policy.selection, selection_rng(policy, k, layer),
        )

    def step(self, policy: Optional[CachePolicy] = None) -> StepRecord:
        if self.done:
            raise SchedulingError("generation already finished")
        policy = policy if policy is not None else self.policy
        k = self.k
        cfg = self.params.config
        flops_before, rows_before = self.ledger.total, self.ledger.rows

        x = mdl.embed(self.params, self.state.tokens())
        if self.cache is not None:
            self.cache.begin_step(k)
        codes, ages = [], {}
        for layer in range(cfg.num_layers):
            code = self._case(k, layer, policy)
            if self.cache is not None:
                self._staleness(k, layer, code, ages)
            x = self._run_layer(code, x, layer, k, policy)
            codes.append(code)
        if self.cache is not None and UNCACHED in codes:
            self.cache.invalidate()

        self.final_hidden = x
        predictions, confidences = mdl.decode_greedy(self.params, x, self.state, self.ledger)
        self.state = transition(self.state, predictions, confidences, k, self.gen_cfg, self.strategy)
        self.state.validate(cfg.mask_token_id)

        if self.cache is not None and self.cache.memory_elements() != self._footprint:
            raise InvariantViolation("cache footprint changed between steps")

        record = StepRecord(
            step=k,
            cases="".join(codes),
            flops=self.ledger.total - flops_before,
            tokens_recomputed=self.ledger.rows - rows_before,
            prompt_staleness=ages.get(Side.PROMPT, 0),
            response_staleness=ages.get(Side.RESPONSE, 0),
        )
        self.metrics.add_step(record)
        logger.debug("step %d cases=%s flops=%d recomputed=%d",
                     k, record.cases, record.flops, record.tokens_recomputed)
        self.k -= 1
        return record

    def run(self) -> GenerationResult:
        while not self.done:
            self.step()
        return self.result()

    def result(self) -> GenerationResult:
        if not self.done:
            raise SchedulingError(f"generation stopped at step {self.k}")
        if self.state.masked.any():
            raise SchedulingError("generation finished with masked positions")
        self.metrics.flops_by_kind = dict(self.ledger.by_kind)
        return GenerationResult(
            tokens=self.state.response.copy(),
            metrics=self.metrics,
            final_hidden=self.final_hidden,
            prompt=self.state.prompt,
            tracer=self.tracer,
        )


def generate(params: ModelParams, gen_cfg: GenConfig, policy: CachePolicy, *,
             track_writes: bool = False) -> GenerationResult:
    engine = DenoisingEngine(params, gen_cfg, policy, track_writes=track_writes)
    result = engine.run()
    logger.info("cached generation: %d steps, %d FLOPs, cases %s",
                gen_cfg.steps, result.metrics.total_flops, result.metrics.refresh_counts)
    return result


def reference_generate(params: ModelParams, gen_cfg: GenConfig, *,
                       trace: bool = False) -> GenerationResult:
    tracer = SimilarityTracer(gen_cfg.prompt_len) if trace else None
    result = DenoisingEngine(params, gen_cfg, None, tracer=tracer).run()
    logger.info("reference generation: %d steps, %d FLOPs", gen_cfg.steps,
                result.metrics.total_flops)
    return result
