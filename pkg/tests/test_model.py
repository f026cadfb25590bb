import math

import numpy as np
import pytest

from dcache import model as mdl
from dcache import tensor
from dcache.engine import GenConfig, SequenceState
from dcache.exceptions import ConfigError, ContractViolation
from dcache.metrics import FlopLedger
from dcache.model import ModelConfig, init_model


class TestInit:
    def test_same_config_same_weights(self, tiny_cfg):
        assert init_model(tiny_cfg).weight_bytes() == init_model(tiny_cfg).weight_bytes()

    def test_seed_changes_weights(self):
        a = init_model(ModelConfig(num_layers=1, hidden_dim=8, num_heads=2, ffn_dim=16, seed=1))
        b = init_model(ModelConfig(num_layers=1, hidden_dim=8, num_heads=2, ffn_dim=16, seed=2))
        assert a.weight_bytes() != b.weight_bytes()

    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig(hidden_dim=65, num_heads=4)

    @pytest.mark.parametrize("changes", [
        {"num_layers": 0}, {"mask_token_id": 258}, {"norm_eps": 0.0}, {"seed": -1},
    ])
    def test_invalid_config(self, changes):
        with pytest.raises(ConfigError):
            ModelConfig(**changes)

    def test_weights_are_read_only(self, tiny_params):
        with pytest.raises(ValueError):
            tiny_params.layers[0].wq[0, 0] = 1.0


class TestEmbed:
    def test_equal_tokens_differ_by_position_only(self, tiny_params):
        x = mdl.embed(tiny_params, [5, 5])
        pe = mdl.positional_encoding(2, tiny_params.config.hidden_dim)
        np.testing.assert_allclose(x[1] - x[0], pe[1] - pe[0], atol=1e-6)

    def test_empty_sequence(self, tiny_params):
        assert mdl.embed(tiny_params, []).shape == (0, tiny_params.config.hidden_dim)

    def test_token_zero_at_position_zero(self, tiny_params):
        d = tiny_params.config.hidden_dim
        expected = tiny_params.embedding[0] + np.tile([0.0, 1.0], d // 2).astype(np.float32)
        np.testing.assert_array_equal(mdl.embed(tiny_params, [0])[0], expected)

    def test_out_of_vocabulary(self, tiny_params):
        with pytest.raises(ContractViolation):
            mdl.embed(tiny_params, [300])


class TestProjections:
    def test_zero_input_gives_zero_qkv(self, tiny_params):
        for m in mdl.qkv_project(tiny_params, 0, tensor.zeros(3, 16)):
            np.testing.assert_array_equal(m, 0.0)

    def test_single_row_dims(self, tiny_params, rng):
        x = tensor.as_matrix(rng.normal(size=(1, 16)))
        assert all(m.shape == (1, 16) for m in mdl.qkv_project(tiny_params, 1, x))

    def test_row_subset(self, tiny_params, rng):
        x = tensor.as_matrix(rng.normal(size=(7, 16)))
        idx = [0, 3, 6]
        full = mdl.qkv_project(tiny_params, 0, x)
        part = mdl.qkv_project(tiny_params, 0, tensor.gather_rows(x, idx))
        for f, p in zip(full, part):
            np.testing.assert_array_equal(f[idx], p)

    def test_ledger_charges(self, tiny_params):
        ledger = FlopLedger()
        mdl.qkv_project(tiny_params, 0, tensor.zeros(5, 16), ledger)
        assert ledger.by_kind["qkv"] == 3 * 2 * 5 * 16 * 16


class TestAttention:
    def test_single_key_passes_value_through(self, tiny_params, rng):
        q = tensor.as_matrix(rng.normal(size=(1, 16)))
        k = tensor.as_matrix(rng.normal(size=(1, 16)))
        v = tensor.as_matrix(rng.normal(size=(1, 16)))
        out = mdl.attention(tiny_params, 0, q, k, v)
        np.testing.assert_allclose(out, tensor.matmul(v, tiny_params.layers[0].wo), atol=1e-6)

    def test_query_subset_matches_full(self, tiny_params, rng):
        q, k, v = (tensor.as_matrix(rng.normal(size=(6, 16))) for _ in range(3))
        full = mdl.attention(tiny_params, 0, q, k, v)
        part = mdl.attention(tiny_params, 0, tensor.gather_rows(q, [1, 4]), k, v)
        np.testing.assert_array_equal(part, full[[1, 4]])

    def test_uniform_keys_average_values(self, tiny_params, rng):
        q = tensor.as_matrix(rng.normal(size=(2, 16)))
        k = tensor.as_matrix(np.tile(rng.normal(size=(1, 16)), (4, 1)))
        v = tensor.as_matrix(rng.normal(size=(4, 16)))
        out = mdl.attention(tiny_params, 0, q, k, v)
        mean = tensor.as_matrix(v.astype(np.float64).mean(axis=0, keepdims=True))
        expected = tensor.matmul(mean, tiny_params.layers[0].wo)
        np.testing.assert_allclose(out, np.repeat(expected, 2, axis=0), atol=1e-6)

    def test_kv_row_mismatch(self, tiny_params):
        with pytest.raises(ContractViolation):
            mdl.attention(tiny_params, 0, tensor.zeros(1, 16), tensor.zeros(2, 16), tensor.zeros(3, 16))

    def test_ledger_charges(self, tiny_params):
        ledger = FlopLedger()
        mdl.attention(tiny_params, 0, tensor.zeros(2, 16), tensor.zeros(5, 16), tensor.zeros(5, 16), ledger)
        assert ledger.by_kind["attention"] == 4 * 2 * 5 * 16
        assert ledger.by_kind["out_proj"] == 2 * 2 * 16 * 16


class TestFfn:
    def test_zero_row(self, tiny_params):
        np.testing.assert_array_equal(mdl.ffn(tiny_params, 0, tensor.zeros(1, 16)), 0.0)

    def test_row_subset_and_dims(self, tiny_params, rng):
        h = tensor.as_matrix(rng.normal(size=(5, 16)))
        full = mdl.ffn(tiny_params, 1, h)
        assert full.shape == (5, 16)
        np.testing.assert_array_equal(mdl.ffn(tiny_params, 1, tensor.gather_rows(h, [2, 3])), full[[2, 3]])


class TestGreedy:
    def test_unique_max(self):
        logits = np.zeros((1, 12))
        logits[0, 7] = 4.0
        tokens, _ = mdl.greedy_from_logits(logits, mask_token_id=11)
        assert tokens.tolist() == [7]

    def test_tie_prefers_lower_id(self):
        logits = np.zeros((1, 12))
        logits[0, [3, 9]] = 2.0
        tokens, _ = mdl.greedy_from_logits(logits, mask_token_id=11)
        assert tokens.tolist() == [3]

    def test_confidence_is_probability(self):
        tokens, conf = mdl.greedy_from_logits(np.array([[0.0, math.log(3), -60.0]]), mask_token_id=2)
        assert tokens.tolist() == [1]
        assert conf[0] == pytest.approx(0.75)

    def test_confidence_denominator_includes_mask_logit(self):
        tokens, conf = mdl.greedy_from_logits(np.array([[0.0, math.log(3), 0.0]]), mask_token_id=2)
        assert tokens.tolist() == [1]
        assert conf[0] == pytest.approx(0.6)

    def test_never_predicts_mask(self):
        logits = np.zeros((1, 5))
        logits[0, 4] = 100.0
        tokens, _ = mdl.greedy_from_logits(logits, mask_token_id=4)
        assert tokens.tolist() == [0]

    def test_decode_only_masked_positions(self, tiny_params, rng):
        gen = GenConfig(steps=4, gen_len=4, block_len=4, prompt=(1, 2))
        state = SequenceState.initial(gen, tiny_params.config.mask_token_id)
        state.response[1] = 65
        state.masked[1] = False
        hidden = tensor.as_matrix(rng.normal(size=(6, 16)))
        ledger = FlopLedger()
        predictions, confidences = mdl.decode_greedy(tiny_params, hidden, state, ledger)
        assert predictions[1] == 65 and confidences[1] == 1.0
        assert tiny_params.config.mask_token_id not in predictions.tolist()
        assert ledger.by_kind["head"] == 2 * 3 * 16 * tiny_params.config.vocab_size
