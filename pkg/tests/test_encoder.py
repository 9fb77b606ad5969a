"""Transformer encoder: pooling, masking, layer weighting, gradients."""

import numpy as np
import pytest

from conftest import TINY_ENCODER, fd_gradcheck, to_double
from siarank import autodiff as ad
from siarank.autodiff import Tensor
from siarank.encoder import (
    EncoderConfig,
    Pooling,
    encode_sequence,
    init_weights,
    truncated_normal,
)
from siarank.tokenizer import CLS, PAD, SEP

IDS = [CLS, 9, 23, 41, 7, SEP]


@pytest.fixture(scope="module")
def weights():
    return init_weights(TINY_ENCODER, seed=5)


class TestInit:
    def test_deterministic(self):
        a = init_weights(TINY_ENCODER, seed=9)
        b = init_weights(TINY_ENCODER, seed=9)
        assert list(a) == list(b)
        for k in a:
            np.testing.assert_array_equal(a[k].data, b[k].data)

    def test_sigma_zero_gives_zero_matrices(self):
        w = init_weights(TINY_ENCODER, seed=1, sigma=0.0)
        assert not w["tok_emb"].data.any()

    def test_truncation_bound(self):
        rng = np.random.default_rng(0)
        sample = truncated_normal(rng, (4000,), 0.02)
        assert np.abs(sample).max() <= 0.04 + 1e-9
        assert sample.std() == pytest.approx(0.02, rel=0.15)

    def test_biases_zero_gains_one(self):
        w = init_weights(TINY_ENCODER, seed=2)
        assert not w["layer0.attn.bq"].data.any()
        np.testing.assert_array_equal(w["final_ln.gain"].data, 1.0)

    def test_layer_weighting_logits_present(self):
        w = init_weights(TINY_ENCODER, seed=2, layer_weighting=True)
        assert w["layer_weights.logits"].shape == (TINY_ENCODER.layers + 1,)

    def test_invalid_config(self):
        with pytest.raises(ValueError, match="divisible"):
            EncoderConfig(hidden=10, heads=4).validate()


class TestForward:
    def test_output_dimension(self, weights):
        emb = encode_sequence(IDS, weights, TINY_ENCODER)
        assert emb.shape == (TINY_ENCODER.hidden,)
        assert emb.data.dtype == np.float32

    def test_too_long_sequence_rejected(self, weights):
        ids = [CLS, *([5] * TINY_ENCODER.max_pos), SEP]
        with pytest.raises(ValueError, match="max_pos"):
            encode_sequence(ids, weights, TINY_ENCODER)

    def test_padding_does_not_change_cls_output(self, weights):
        plain = encode_sequence(IDS, weights, TINY_ENCODER)
        padded = encode_sequence(IDS + [PAD] * 6, weights, TINY_ENCODER)
        np.testing.assert_allclose(plain.data, padded.data, atol=1e-5)

    @pytest.mark.parametrize("pooling", [Pooling.MEAN_TOKENS, Pooling.MAX_TOKENS])
    def test_padding_invariance_other_poolings(self, weights, pooling):
        plain = encode_sequence(IDS, weights, TINY_ENCODER, pooling=pooling)
        padded = encode_sequence(IDS + [PAD] * 4, weights, TINY_ENCODER, pooling=pooling)
        np.testing.assert_allclose(plain.data, padded.data, atol=1e-5)

    def test_poolings_differ(self, weights):
        outs = [encode_sequence(IDS, weights, TINY_ENCODER, pooling=p).data
                for p in Pooling]
        assert not np.allclose(outs[0], outs[1])
        assert not np.allclose(outs[1], outs[2])

    def test_repeated_encoding_identical(self, weights):
        a = encode_sequence(IDS, weights, TINY_ENCODER)
        b = encode_sequence(IDS, weights, TINY_ENCODER)
        np.testing.assert_array_equal(a.data, b.data)

    def test_attention_rows_are_distributions(self, weights):
        sink = []
        encode_sequence(IDS + [PAD, PAD], weights, TINY_ENCODER, attn_sink=sink)
        assert len(sink) == TINY_ENCODER.layers * TINY_ENCODER.heads
        for attn in sink:
            np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-5)
            assert (attn >= 0).all()
            # padded keys receive zero attention from every position
            np.testing.assert_allclose(attn[:, len(IDS):], 0.0, atol=1e-7)

    def test_train_mode_dropout_changes_output_deterministically(self, weights):
        a = encode_sequence(IDS, weights, TINY_ENCODER, train=True, dropout_seed=3)
        b = encode_sequence(IDS, weights, TINY_ENCODER, train=True, dropout_seed=3)
        c = encode_sequence(IDS, weights, TINY_ENCODER, train=True, dropout_seed=4)
        np.testing.assert_array_equal(a.data, b.data)
        assert not np.array_equal(a.data, c.data)


class TestLayerWeighting:
    def test_one_hot_on_last_layer_equals_plain_path(self):
        w = init_weights(TINY_ENCODER, seed=7, layer_weighting=True)
        logits = np.zeros(TINY_ENCODER.layers + 1, dtype=np.float32)
        logits[-1] = 1e9  # exact one-hot after softmax in float32
        w["layer_weights.logits"] = Tensor(logits, requires_grad=True)
        weighted = encode_sequence(IDS, w, TINY_ENCODER, layer_weighting=True)
        plain = encode_sequence(IDS, w, TINY_ENCODER, layer_weighting=False)
        np.testing.assert_array_equal(weighted.data, plain.data)

    def test_uniform_logits_average_layers(self):
        w = init_weights(TINY_ENCODER, seed=7, layer_weighting=True)
        weighted = encode_sequence(IDS, w, TINY_ENCODER, layer_weighting=True)
        plain = encode_sequence(IDS, w, TINY_ENCODER, layer_weighting=False)
        assert not np.allclose(weighted.data, plain.data)

    def test_weights_sum_to_one_during_training(self):
        w = init_weights(TINY_ENCODER, seed=7, layer_weighting=True)
        logits = w["layer_weights.logits"]
        logits.data = np.array([0.3, -1.2], dtype=np.float32)
        coeffs = ad.softmax(logits, axis=-1)
        assert float(coeffs.data.sum()) == pytest.approx(1.0, abs=1e-6)


class TestGradients:
    def test_encoder_gradient_matches_finite_differences(self):
        cfg = EncoderConfig(layers=1, hidden=8, heads=2, ff_dim=10, vocab_size=32,
                            max_pos=12, dropout_p=0.0)
        weights = to_double(init_weights(cfg, seed=3, layer_weighting=True))
        rng = np.random.default_rng(8)
        probe = Tensor(rng.normal(size=8), dtype=np.float64)
        ids = [CLS, 4, 9, SEP]

        def forward():
            emb = encode_sequence(ids, weights, cfg, layer_weighting=True)
            return ad.dot(emb, probe)

        checked = ["tok_emb", "pos_emb", "layer0.attn.wq", "layer0.attn.wo",
                   "layer0.ff.w1", "layer0.ln1.gain", "final_ln.bias",
                   "layer_weights.logits"]
        fd_gradcheck(forward, [weights[k] for k in checked], rng=rng, max_coords=4)
