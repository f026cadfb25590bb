import numpy as np
import pytest

from dcache import cache as dc
from dcache import tensor
from dcache.cache import Feature, LayerFeatures, Side
from dcache.exceptions import ColdCacheError, ContractViolation


def random_feats(rng, rows, cols=8):
    return LayerFeatures(*(tensor.as_matrix(rng.normal(size=(rows, cols))) for _ in Feature))


class TestInit:
    def test_desk_shapes(self):
        cache = dc.cache_init(4, 32, 64, 64)
        for layer in range(4):
            assert cache.peek(layer, Side.PROMPT).k.shape == (32, 64)
            assert cache.peek(layer, Side.RESPONSE).ffn_out.shape == (64, 64)

    @pytest.mark.parametrize("layers,prompt,response,dim,expected", [
        (4, 32, 64, 64, 98304),
        (32, 0, 1, 1, 128),
    ])
    def test_memory_formula(self, layers, prompt, response, dim, expected):
        assert dc.memory_elements(dc.cache_init(layers, prompt, response, dim)) == expected

    def test_memory_random_shapes(self, rng):
        for _ in range(50):
            layers, prompt, response, dim = (int(v) for v in rng.integers(1, 9, size=4))
            prompt -= 1
            cache = dc.cache_init(layers, prompt, response, dim)
            assert cache.memory_elements() == 4 * layers * (prompt + response) * dim

    def test_doubling_layers_doubles_memory(self):
        assert dc.cache_init(8, 3, 5, 4).memory_elements() == 2 * dc.cache_init(4, 3, 5, 4).memory_elements()

    def test_empty_prompt(self):
        cache = dc.cache_init(2, 0, 4, 8)
        assert cache.peek(0, Side.PROMPT).k.shape == (0, 8)

    def test_starts_cold(self):
        cache = dc.cache_init(1, 2, 2, 8)
        with pytest.raises(ColdCacheError):
            cache.read(0, Side.RESPONSE)

    def test_rejects_bad_shape(self):
        with pytest.raises(ContractViolation):
            dc.cache_init(0, 2, 2, 8)


class TestReplace:
    def test_round_trip(self, rng):
        cache = dc.cache_init(2, 3, 5, 8)
        feats = random_feats(rng, 3)
        dc.replace_segment(cache, 1, Side.PROMPT, feats)
        for f in Feature:
            np.testing.assert_array_equal(cache.read(1, Side.PROMPT).get(f), feats.get(f))

    def test_sides_are_isolated(self, rng):
        cache = dc.cache_init(1, 3, 5, 8)
        response = random_feats(rng, 5)
        cache.replace_segment(0, Side.RESPONSE, response)
        before = {f: cache.read(0, Side.RESPONSE).get(f).tobytes() for f in Feature}
        cache.replace_segment(0, Side.PROMPT, random_feats(rng, 3))
        assert {f: cache.read(0, Side.RESPONSE).get(f).tobytes() for f in Feature} == before

    def test_wrong_row_count(self, rng):
        cache = dc.cache_init(1, 3, 5, 8)
        with pytest.raises(ContractViolation):
            cache.replace_segment(0, Side.PROMPT, random_feats(rng, 4))

    def test_invalidate_makes_cold(self, rng):
        cache = dc.cache_init(1, 3, 5, 8)
        cache.replace_segment(0, Side.PROMPT, random_feats(rng, 3))
        cache.invalidate()
        assert cache.is_cold(0, Side.PROMPT)


class TestScatter:
    def test_single_row(self, rng):
        cache = dc.cache_init(1, 0, 3, 8)
        feats = random_feats(rng, 3)
        cache.replace_segment(0, Side.RESPONSE, feats)
        row = tensor.as_matrix(rng.normal(size=(1, 8)))
        dc.scatter_update_segment(cache, 0, Side.RESPONSE, [1], {Feature.K: row})
        k = cache.read(0, Side.RESPONSE).k
        np.testing.assert_array_equal(k[[0, 2]], feats.k[[0, 2]])
        np.testing.assert_array_equal(k[1], row[0])
        np.testing.assert_array_equal(cache.read(0, Side.RESPONSE).v, feats.v)

    def test_all_rows_equals_replace(self, rng):
        cache = dc.cache_init(1, 0, 4, 8)
        cache.replace_segment(0, Side.RESPONSE, random_feats(rng, 4))
        fresh = random_feats(rng, 4)
        partial = {f: fresh.get(f) for f in (Feature.K, Feature.ATTN_OUT, Feature.FFN_OUT)}
        cache.scatter_update_segment(0, Side.RESPONSE, range(4), partial)
        for f, m in partial.items():
            np.testing.assert_array_equal(cache.read(0, Side.RESPONSE).get(f), m)

    def test_empty_index_is_noop(self, rng):
        cache = dc.cache_init(1, 0, 4, 8)
        feats = random_feats(rng, 4)
        cache.replace_segment(0, Side.RESPONSE, feats)
        cache.scatter_update_segment(0, Side.RESPONSE, [], {Feature.K: tensor.zeros(0, 8)})
        np.testing.assert_array_equal(cache.read(0, Side.RESPONSE).k, feats.k)

    def test_value_cannot_be_scattered(self, rng):
        cache = dc.cache_init(1, 0, 4, 8)
        cache.replace_segment(0, Side.RESPONSE, random_feats(rng, 4))
        with pytest.raises(ContractViolation):
            cache.scatter_update_segment(0, Side.RESPONSE, [0], {Feature.V: tensor.zeros(1, 8)})

    def test_descending_index_rejected(self, rng):
        cache = dc.cache_init(1, 0, 4, 8)
        cache.replace_segment(0, Side.RESPONSE, random_feats(rng, 4))
        with pytest.raises(ContractViolation):
            cache.scatter_update_segment(0, Side.RESPONSE, [2, 1], {Feature.K: tensor.zeros(2, 8)})


class TestWriteTracking:
    def test_row_age_and_log(self, rng):
        cache = dc.cache_init(1, 2, 4, 8, track_writes=True)
        cache.begin_step(10)
        cache.replace_segment(0, Side.RESPONSE, random_feats(rng, 4))
        cache.begin_step(7)
        cache.scatter_update_segment(0, Side.RESPONSE, [2], {Feature.ATTN_OUT: tensor.zeros(1, 8)})
        ages = cache.row_age(0, Side.RESPONSE, Feature.ATTN_OUT, 6)
        assert ages.tolist() == [4, 4, 1, 4]
        last = cache.writes[-1]
        assert (last.step, last.feature, last.rows) == (7, Feature.ATTN_OUT, (2,))


class TestDump:
    def test_dump_and_load(self, rng, tmp_path):
        cache = dc.cache_init(1, 3, 5, 8)
        feats = random_feats(rng, 5)
        cache.replace_segment(0, Side.RESPONSE, feats)
        path = tmp_path / "v.bin"
        dc.dump_entry(cache, 0, Side.RESPONSE, Feature.V, path)
        assert path.stat().st_size == 16 + 5 * 8 * 4
        np.testing.assert_array_equal(dc.load_entry(path), feats.v)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * 8)
        with pytest.raises(ContractViolation):
            dc.load_entry(path)
