"""
Cached inference for masked-diffusion language models.

A toy bidirectional transformer denoises a fully masked response over ``K``
steps. Per-layer prompt and response feature caches are refreshed on fixed
intervals; between refreshes only the response tokens whose Value vectors
moved the most are recomputed.
"""

__version__ = "0.1.0"

from dcache.cache import DualCache, Feature, LayerFeatures, Side, cache_init, dump_entry, load_entry
from dcache.engine import DenoisingEngine, GenConfig, SequenceState, generate, reference_generate
from dcache.exceptions import (
    ColdCacheError,
    ConfigError,
    ContractViolation,
    DCacheError,
    InvariantViolation,
    SchedulingError,
)
from dcache.metrics import GenerationResult, RunMetrics, analytic_flops, compare_outputs, speedup
from dcache.model import ModelConfig, ModelParams, init_model
from dcache.policy import CachePolicy, Metric, Selection
