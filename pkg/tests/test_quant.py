"""Quantized interaction execution path."""

import numpy as np
import pytest

from siarank import interaction as inter
from siarank.errors import DataError
from siarank.quant import QuantizedFinal, quantize_matrix
from siarank.store import quantize_vector


@pytest.fixture(scope="module")
def final_weights():
    return inter.weights_as_arrays(
        inter.init_interaction(inter.Variant.FINAL, 32, seed=7))


class TestQuantizeMatrix:
    def test_codes_bounded_and_scale_positive(self):
        rng = np.random.default_rng(0)
        w = rng.normal(size=(16, 8)).astype(np.float32)
        codes, scale, row_sums = quantize_matrix(w)
        assert codes.dtype == np.int8
        assert scale > 0
        assert np.abs(codes).max() <= 127
        np.testing.assert_array_equal(row_sums,
                                      codes.astype(np.int32).sum(axis=1))

    def test_reconstruction_error_bounded(self):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(16, 8)).astype(np.float32)
        codes, scale, _ = quantize_matrix(w)
        assert np.abs(codes.astype(np.float32) * scale - w).max() <= scale / 2 + 1e-7


class TestQuantizedFinal:
    def test_scores_close_to_float_path(self, final_weights):
        rng = np.random.default_rng(2)
        scorer = QuantizedFinal(final_weights)
        worst = 0.0
        for _ in range(60):
            e_q = rng.normal(size=32).astype(np.float32)
            e_d = rng.normal(size=32).astype(np.float32)
            ref = inter.score_fast(inter.Variant.FINAL, e_q, e_d, final_weights)
            codes, params = quantize_vector(e_d)
            got = scorer.score(e_q, codes, params)
            worst = max(worst, abs(ref - got))
        assert worst < 0.05

    def test_deterministic(self, final_weights):
        rng = np.random.default_rng(3)
        scorer = QuantizedFinal(final_weights)
        e_q = rng.normal(size=32).astype(np.float32)
        codes, params = quantize_vector(rng.normal(size=32).astype(np.float32))
        assert scorer.score(e_q, codes, params) == scorer.score(e_q, codes, params)

    def test_output_in_tanh_range(self, final_weights):
        rng = np.random.default_rng(4)
        scorer = QuantizedFinal(final_weights)
        for _ in range(20):
            e_q = rng.normal(size=32).astype(np.float32) * 3
            codes, params = quantize_vector(rng.normal(size=32).astype(np.float32) * 3)
            assert -1.0 < scorer.score(e_q, codes, params) < 1.0

    def test_requires_final_module_weights(self):
        with pytest.raises(DataError, match="w2"):
            QuantizedFinal({"w1": np.zeros((4, 2), dtype=np.float32)})

    def test_preserves_ranking_order_mostly(self, final_weights):
        """Quantization noise must not scramble well-separated scores."""
        rng = np.random.default_rng(5)
        scorer = QuantizedFinal(final_weights)
        e_q = rng.normal(size=32).astype(np.float32)
        docs = [rng.normal(size=32).astype(np.float32) for _ in range(30)]
        ref = [inter.score_fast(inter.Variant.FINAL, e_q, d, final_weights)
               for d in docs]
        quant = []
        for d in docs:
            codes, params = quantize_vector(d)
            quant.append(scorer.score(e_q, codes, params))
        ref_order = np.argsort(ref)[::-1]
        quant_order = np.argsort(quant)[::-1]
        agree = len(set(ref_order[:10]) & set(quant_order[:10]))
        assert agree >= 8
