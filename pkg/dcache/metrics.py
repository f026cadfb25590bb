"""
FLOP accounting, per-step records, output comparison and feature-similarity traces.

``analytic_flops`` prices a run from the schedule alone; the engine's ledger
must land on exactly the same number.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple

import numpy as np

from dcache import tensor
from dcache.exceptions import ContractViolation

if TYPE_CHECKING:
    from dcache.cache import LayerFeatures
    from dcache.engine import GenConfig
    from dcache.model import ModelConfig
    from dcache.policy import CachePolicy

logger = logging.getLogger(__name__)

FLOP_KINDS = ("qkv", "verify", "attention", "out_proj", "ffn", "head")
CSV_FIELDS = ("step", "case_codes", "flops", "tokens_recomputed")
TRACE_FIELDS = ("step", "layer", "token", "sim_K", "sim_V", "sim_attn", "sim_ffn")
CORRELATION_FIELDS = ("step", "layer", "selector", "attn_corr", "ffn_corr")

_CASE_COUNTERS = {"1": "full", "2": "prompt_only", "3": "response_only",
                  "4": "adaptive", "0": "pure_reuse"}


class FlopLedger:
    def __init__(self):
        self.by_kind: Dict[str, int] = dict.fromkeys(FLOP_KINDS, 0)
        self.rows = 0

    def charge(self, kind: str, flops: int) -> None:
        if kind not in self.by_kind:
            raise ContractViolation(f"unknown FLOP kind {kind!r}")
        self.by_kind[kind] += int(flops)

    def recomputed(self, rows: int) -> None:
        self.rows += int(rows)

    @property
    def total(self) -> int:
        return sum(self.by_kind.values())


@dataclass(frozen=True)
class StepRecord:
    step: int
    cases: str
    flops: int
    tokens_recomputed: int
    prompt_staleness: int = 0
    response_staleness: int = 0

    def csv_row(self) -> dict:
        return {"step": self.step, "case_codes": self.cases, "flops": self.flops,
                "tokens_recomputed": self.tokens_recomputed}


@dataclass
class RefreshCounts:
    full: int = 0
    prompt_only: int = 0
    response_only: int = 0
    adaptive: int = 0
    pure_reuse: int = 0

    def note(self, code: str) -> None:
        name = _CASE_COUNTERS.get(code)
        if name is not None:
            setattr(self, name, getattr(self, name) + 1)

    @property
    def total(self) -> int:
        return sum(asdict(self).values())

    def __add__(self, other: "RefreshCounts") -> "RefreshCounts":
        return RefreshCounts(**{k: v + getattr(other, k) for k, v in asdict(self).items()})

    def __str__(self):
        return " ".join(f"{k}={v}" for k, v in asdict(self).items())


@dataclass(frozen=True)
class Divergence:
    match_rate: float
    max_abs_diff: float


@dataclass
class RunMetrics:
    gen_len: int
    cache_elements: int = 0
    per_step: List[StepRecord] = field(default_factory=list)
    refresh_counts: RefreshCounts = field(default_factory=RefreshCounts)
    flops_by_kind: Dict[str, int] = field(default_factory=lambda: dict.fromkeys(FLOP_KINDS, 0))
    divergence: Optional[Divergence] = None

    def add_step(self, record: StepRecord) -> None:
        self.per_step.append(record)
        for code in record.cases:
            self.refresh_counts.note(code)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.per_step)

    @property
    def tokens_recomputed(self) -> int:
        return sum(r.tokens_recomputed for r in self.per_step)

    @property
    def flops_per_token(self) -> float:
        return self.total_flops / self.gen_len if self.gen_len else 0.0

    def merge(self, other: "RunMetrics") -> "RunMetrics":
        """Aggregate two runs; per-step records are concatenated, counters summed."""
        kinds = {k: self.flops_by_kind.get(k, 0) + other.flops_by_kind.get(k, 0) for k in FLOP_KINDS}
        return RunMetrics(
            gen_len=self.gen_len + other.gen_len,
            cache_elements=max(self.cache_elements, other.cache_elements),
            per_step=self.per_step + other.per_step,
            refresh_counts=self.refresh_counts + other.refresh_counts,
            flops_by_kind=kinds,
            divergence=self.divergence or other.divergence,
        )

    def csv_rows(self) -> List[dict]:
        return [r.csv_row() for r in self.per_step]

    def summary(self) -> dict:
        out = {
            "total_flops": self.total_flops,
            "flops_per_token": self.flops_per_token,
            "flops_by_kind": dict(self.flops_by_kind),
            "tokens_recomputed": self.tokens_recomputed,
            "cache_elements": self.cache_elements,
            "refresh_counts": asdict(self.refresh_counts),
            "max_prompt_staleness": max((r.prompt_staleness for r in self.per_step), default=0),
            "max_response_staleness": max((r.response_staleness for r in self.per_step), default=0),
        }
        if self.divergence is not None:
            out["divergence"] = asdict(self.divergence)
        return out


@dataclass
class GenerationResult:
    tokens: np.ndarray
    metrics: RunMetrics
    final_hidden: Optional[np.ndarray]
    prompt: Tuple[int, ...] = ()
    tracer: Optional["SimilarityTracer"] = None


def speedup(reference: RunMetrics, cached: RunMetrics) -> float:
    if cached.total_flops <= 0:
        raise ContractViolation("cached run reports no FLOPs")
    return reference.total_flops / cached.total_flops


def compare_outputs(a: GenerationResult, b: GenerationResult) -> Divergence:
    ta, tb = np.asarray(a.tokens), np.asarray(b.tokens)
    if ta.shape != tb.shape:
        raise ContractViolation(f"cannot compare outputs of length {ta.size} and {tb.size}")
    match_rate = float(np.mean(ta == tb)) if ta.size else 1.0
    max_abs_diff = 0.0
    if a.final_hidden is not None and b.final_hidden is not None:
        if a.final_hidden.shape != b.final_hidden.shape:
            raise ContractViolation("final hidden states differ in shape")
        diff = np.abs(a.final_hidden.astype(np.float64) - b.final_hidden.astype(np.float64))
        max_abs_diff = float(diff.max()) if diff.size else 0.0
    return Divergence(match_rate=match_rate, max_abs_diff=max_abs_diff)


# ---------------------------------------------------------------------------
# analytic cost
# ---------------------------------------------------------------------------

def _layer_cost(rows: int, kv: int, d: int, f: int) -> int:
    """Q/K/V for ``rows`` query rows, attention over ``kv`` keys, output projection, FFN."""
    return 6 * rows * d * d + 4 * rows * kv * d + 2 * rows * d * d + 4 * rows * d * f


def adaptive_layer_cost(response_len: int, total_len: int, ratio: float, d: int, f: int,
                        selection: str = "value") -> int:
    from dcache.policy import Selection, update_count

    n = update_count(ratio, response_len)
    if ratio <= 0:
        return 0
    selection = Selection(selection)
    projection = 2 * response_len * d * d
    if selection is Selection.KEY:
        projection += 2 * response_len * d * d
        qk = 2 * n * d * d
    else:
        qk = 4 * n * d * d
    return projection + qk + 4 * n * total_len * d + 2 * n * d * d + 4 * n * d * f


def analytic_flops(model_cfg: "ModelConfig", gen_cfg: "GenConfig",
                   policy: Optional["CachePolicy"] = None) -> int:
    """FLOPs a run must spend, derived from the schedule without running it."""
    from dcache.engine import masked_counts
    from dcache.policy import refresh_flags

    d, f, L, V = model_cfg.hidden_dim, model_cfg.ffn_dim, model_cfg.num_layers, model_cfg.vocab_size
    m, r = gen_cfg.prompt_len, gen_cfg.gen_len
    t = m + r
    full = _layer_cost(t, t, d, f)
    total = 0
    for s, masked in enumerate(masked_counts(gen_cfg)):
        k = gen_cfg.steps - s
        if policy is None or not policy.enabled or k == gen_cfg.steps:
            per_layer = full
        else:
            rp, rr = refresh_flags(k, policy)
            if rp and rr:
                per_layer = full
            elif rp:
                per_layer = _layer_cost(m, t, d, f)
            elif rr:
                per_layer = _layer_cost(r, t, d, f)
            else:
                per_layer = adaptive_layer_cost(r, t, policy.update_ratio, d, f, policy.selection)
        total += L * per_layer + 2 * masked * d * V
    return total


# ---------------------------------------------------------------------------
# similarity traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceRecord:
    step: int
    layer: int
    token: int
    sim_k: float
    sim_v: float
    sim_attn: float
    sim_ffn: float


@dataclass(frozen=True)
class CorrelationRecord:
    step: int
    layer: int
    selector: str
    attn_corr: float
    ffn_corr: float


class SimilarityTracer:
    """Collects each layer's features per step on the reference path."""

    def __init__(self, prompt_len: int):
        self.prompt_len = prompt_len
        self.snapshots: List[Tuple[int, Dict[int, "LayerFeatures"]]] = []

    def record(self, k: int, layer: int, feats: "LayerFeatures") -> None:
        if not self.snapshots or self.snapshots[-1][0] != k:
            self.snapshots.append((k, {}))
        self.snapshots[-1][1][layer] = feats

    def records(self) -> List[TraceRecord]:
        return similarity_trace(self.snapshots)

    def correlations(self, fraction: float = 0.25) -> List[CorrelationRecord]:
        return correlation_trace(self.snapshots, self.prompt_len, fraction)


def _pairs(snapshots):
    for (_, before), (k, after) in zip(snapshots, snapshots[1:]):
        for layer in sorted(after):
            yield k, layer, before[layer], after[layer]


def similarity_trace(snapshots) -> List[TraceRecord]:
    """Cosine similarity of every token's features between consecutive steps."""
    out = []
    for k, layer, prev, cur in _pairs(snapshots):
        sims = [tensor.rowwise_cosine(cur.get(f), prev.get(f))
                for f in ("k", "v", "attn_out", "ffn_out")]
        for token in range(cur.rows):
            out.append(TraceRecord(k, layer, token, *(float(s[token]) for s in sims)))
    return out


def _ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    ranks[order] = np.arange(x.size, dtype=np.float64)
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=ranks)
    return (sums / counts)[inverse]


def rank_correlation(a, b) -> float:
    """Spearman correlation with averaged tie ranks; 0.0 when either side is constant."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractViolation("rank_correlation needs two flat sequences of equal length")
    if x.size < 2:
        return 0.0
    rx, ry = _ranks(x), _ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0:
        return 0.0
    return float(np.clip((rx * ry).sum() / denom, -1.0, 1.0))


def correlation_trace(snapshots, prompt_len: int, fraction: float = 0.25) -> List[CorrelationRecord]:
    """How well K or V drift ranks the drift of AttnOut and FFNOut on the most-changed response tokens."""
    from dcache.policy import select_update_indices

    out = []
    for k, layer, prev, cur in _pairs(snapshots):
        drift = {f: tensor.rowwise_cosine(cur.get(f)[prompt_len:], prev.get(f)[prompt_len:])
                 for f in ("k", "v", "attn_out", "ffn_out")}
        for selector in ("k", "v"):
            idx = select_update_indices(drift[selector], fraction)
            out.append(CorrelationRecord(
                k, layer, selector,
                rank_correlation(drift[selector][idx], drift["attn_out"][idx]),
                rank_correlation(drift[selector][idx], drift["ffn_out"][idx]),
            ))
    return out
