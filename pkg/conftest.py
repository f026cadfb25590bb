import json

import numpy as np
import pytest

from dcache.cache import cache_init
from dcache.engine import GenConfig, layer_case1_full_refresh
from dcache.model import ModelConfig, init_model

TINY_MODEL = {"num_layers": 2, "hidden_dim": 16, "num_heads": 2, "ffn_dim": 32}
TINY_PROMPT = (72, 105, 33, 10)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale model runs; deselect with -m \"not slow\"")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY_MODEL)


@pytest.fixture
def tiny_params(tiny_cfg):
    return init_model(tiny_cfg)


@pytest.fixture
def small_gen():
    return GenConfig(steps=8, gen_len=8, block_len=4, prompt=TINY_PROMPT)


@pytest.fixture
def warm_cache(tiny_params):
    """Factory: a cache whose layer-0 entries hold the exact features of ``x`` at ``prompt_len``."""
    def build(x, prompt_len, step=2):
        cfg = tiny_params.config
        cache = cache_init(cfg.num_layers, prompt_len, x.shape[0] - prompt_len, cfg.hidden_dim,
                           track_writes=True)
        cache.begin_step(step)
        layer_case1_full_refresh(tiny_params, x, 0, cache)
        return cache
    return build


@pytest.fixture
def write_config(tmp_path):
    """Factory: dump a config dict to ``tmp_path`` and return its path."""
    def write(data, name="experiment.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data), encoding="utf-8")
        return path
    return write


@pytest.fixture
def tiny_experiment():
    """Config dict for a fast end-to-end run."""
    return {
        "model": dict(TINY_MODEL),
        "generation": {"steps": 8, "gen_len": 8, "block_len": 4},
        "prompt": {"tokens": list(TINY_PROMPT)},
        "policy": {"prompt_interval": 4, "response_interval": 2, "update_ratio": 0.25},
    }


@pytest.fixture(autouse=True)
def _no_seed_override(monkeypatch):
    monkeypatch.delenv("DCACHE_SEED", raising=False)
