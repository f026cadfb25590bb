"""
Experiment files.

A config is one JSON object::

    {
      "model":      {"num_layers": 4, "hidden_dim": 64, ...},
      "generation": {"steps": 64, "gen_len": 64, "block_len": 8},
      "prompt":     {"tokens": [...]} | {"text": "..."} | {"file": "prompt.txt"},
      "policy":     {"prompt_interval": 16, "response_interval": 8, "update_ratio": 0.25,
                     "metric": "cosine", "selection": "value"},
      "sweep":      {"prompt_interval": [...], "response_interval": [...],
                     "update_ratio": [...], "selection": [...]},
      "output_dir": "results",
      "trace":      false
    }

Every section is optional and falls back to the desk profile. Unknown keys are
rejected. ``DCACHE_SEED`` in the environment overrides ``model.seed``.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Mapping, Optional, Tuple

from dcache.engine import GenConfig
from dcache.exceptions import ConfigError
from dcache.model import ModelConfig
from dcache.policy import CachePolicy
from dcache.tokenizer import MIN_VOCAB, tokenize_bytes

logger = logging.getLogger(__name__)

SEED_ENV = "DCACHE_SEED"
TOP_LEVEL_KEYS = {"model", "generation", "prompt", "policy", "sweep", "output_dir", "trace"}
GENERATION_KEYS = {"steps", "gen_len", "block_len"}
PROMPT_KEYS = {"tokens", "text", "file"}


@dataclass(frozen=True)
class SweepGrid:
    prompt_interval: Tuple[int, ...] = ()
    response_interval: Tuple[int, ...] = ()
    update_ratio: Tuple[float, ...] = ()
    selection: Tuple[str, ...] = ()

    def __post_init__(self):
        for f in dataclasses.fields(self):
            object.__setattr__(self, f.name, tuple(getattr(self, f.name)))
        if not any(getattr(self, f.name) for f in dataclasses.fields(self)):
            raise ConfigError("sweep grid has no values on any axis")

    def axes(self) -> List[str]:
        return [f.name for f in dataclasses.fields(self) if getattr(self, f.name)]

    def points(self, base: CachePolicy) -> List[CachePolicy]:
        """Cartesian product over the populated axes; empty axes keep ``base``'s value."""
        values = [getattr(self, f.name) or (getattr(base, f.name),) for f in dataclasses.fields(self)]
        names = [f.name for f in dataclasses.fields(self)]
        return [dataclasses.replace(base, **dict(zip(names, combo)))
                for combo in itertools.product(*values)]


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    policy: CachePolicy = field(default_factory=CachePolicy)
    sweep: Optional[SweepGrid] = None
    output_dir: str = "results"
    trace: bool = False

    def __post_init__(self):
        if self.model.mask_token_id in self.gen.prompt:
            raise ConfigError("prompt contains the mask token id")
        if any(t >= self.model.vocab_size for t in self.gen.prompt):
            raise ConfigError(f"prompt token outside vocabulary of {self.model.vocab_size}")


def _section(data: Mapping[str, Any], name: str, allowed) -> dict:
    section = data.get(name, {})
    if not isinstance(section, Mapping):
        raise ConfigError(f"section '{name}' must be an object")
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {', '.join(sorted(unknown))}")
    return dict(section)


def _build(cls, kwargs: dict, name: str):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{name}' section: {e}") from None


def _field_names(cls) -> List[str]:
    return [f.name for f in dataclasses.fields(cls)]


def _prompt_tokens(section: dict, base_dir: Path, vocab_size: int) -> Tuple[int, ...]:
    if len(section) > 1:
        raise ConfigError("prompt takes exactly one of tokens, text or file")
    if "tokens" in section:
        tokens = section["tokens"]
        if not isinstance(tokens, list) or not all(isinstance(t, int) for t in tokens):
            raise ConfigError("prompt.tokens must be a list of integers")
        return tuple(tokens)
    if "text" in section or "file" in section:
        source = "file" if "file" in section else "text"
        if not isinstance(section[source], str):
            raise ConfigError(f"prompt.{source} must be a string")
        if vocab_size < MIN_VOCAB:
            raise ConfigError(f"text prompts need vocab_size >= {MIN_VOCAB}")
        if source == "file":
            path = base_dir / section["file"]
            try:
                text = path.read_text(encoding="utf-8")
            except OSError as e:
                raise ConfigError(f"cannot read prompt file {path}: {e}") from None
        else:
            text = section["text"]
        return tuple(tokenize_bytes(text))
    return ()


def _seed_override(model_section: dict) -> dict:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return model_section
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
    logger.info("model seed overridden by %s=%d", SEED_ENV, seed)
    return {**model_section, "seed": seed}


def config_from_dict(data: Mapping[str, Any], base_dir: Path = Path(".")) -> ExperimentConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("config must be a JSON object")
    unknown = set(data) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")

    model = _build(ModelConfig, _seed_override(_section(data, "model", _field_names(ModelConfig))),
                   "model")
    prompt = _prompt_tokens(_section(data, "prompt", PROMPT_KEYS), Path(base_dir), model.vocab_size)
    gen = _build(GenConfig, {**_section(data, "generation", GENERATION_KEYS), "prompt": prompt},
                 "generation")
    policy = _build(CachePolicy, _section(data, "policy", _field_names(CachePolicy)), "policy")
    sweep = None
    if "sweep" in data:
        sweep = _build(SweepGrid, _section(data, "sweep", _field_names(SweepGrid)), "sweep")
        try:
            sweep.points(policy)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid 'sweep' point: {e}") from None

    output_dir = data.get("output_dir", "results")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("output_dir must be a non-empty string")
    trace = data.get("trace", False)
    if not isinstance(trace, bool):
        raise ConfigError("trace must be true or false")
    return ExperimentConfig(model=model, gen=gen, policy=policy, sweep=sweep,
                            output_dir=output_dir, trace=trace)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from None
    except OSError as e:
        raise ConfigError(f"cannot read {path}: {e}") from None
    cfg = config_from_dict(data, base_dir=path.parent)
    logger.debug("loaded %s: %s", path, cfg)
    return cfg
