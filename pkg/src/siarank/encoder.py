"""Transformer encoder producing one embedding per token sequence.

Pre-norm blocks (self-attention with a padding mask, then a GELU
feed-forward, residuals around both) over learned token + position
embeddings.  The sequence embedding is the chosen pooling of the final
layer-normed hidden states; with layer weighting enabled it is instead a
softmax-weighted sum of the pooled vectors from the embedding layer and
every block output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokenizer import PAD

_MASK_BIAS = -1e9


class Pooling(Enum):
    CLS = "cls"
    MEAN_TOKENS = "mean"
    MAX_TOKENS = "max"


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 2
    ff_dim: int = 128
    vocab_size: int = 2000
    max_pos: int = 128
    dropout_p: float = 0.1

    def validate(self) -> None:
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if min(self.layers, self.hidden, self.heads, self.ff_dim, self.vocab_size,
               self.max_pos) < 1:
            raise ValueError("all encoder dimensions must be positive")

    def to_kv(self) -> dict[str, object]:
        return {
            "layers": self.layers,
            "hidden": self.hidden,
            "heads": self.heads,
            "ff_dim": self.ff_dim,
            "vocab_size": self.vocab_size,
            "max_pos": self.max_pos,
            "dropout_p": self.dropout_p,
        }

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "EncoderConfig":
        return cls(
            layers=int(kv["layers"]),
            hidden=int(kv["hidden"]),
            heads=int(kv["heads"]),
            ff_dim=int(kv["ff_dim"]),
            vocab_size=int(kv["vocab_size"]),
            max_pos=int(kv["max_pos"]),
            dropout_p=float(kv["dropout_p"]),
        )


# Production-faithful size (Electra-small shape); the small default above is
# the desk-scale configuration used throughout the tests.
PRODUCTION_CONFIG = EncoderConfig(
    layers=12, hidden=256, heads=4, ff_dim=1024, vocab_size=30522, max_pos=128,
    dropout_p=0.1,
)


def truncated_normal(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Normal(0, sigma) with resampling outside +/- 2 sigma."""
    if sigma == 0.0:
        return np.zeros(shape, dtype=np.float32)
    out = rng.normal(0.0, sigma, size=shape)
    bad = np.abs(out) > 2.0 * sigma
    while bad.any():
        out[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * sigma
    return out.astype(np.float32)


def init_weights(
    cfg: EncoderConfig, seed: int, *, layer_weighting: bool = False, sigma: float = 0.02
) -> dict[str, Tensor]:
    """Deterministic encoder parameters: truncated-normal matrices, zero
    biases, unit layer-norm gains."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    n = cfg.hidden

    def matrix(*shape):
        return Tensor(truncated_normal(rng, shape, sigma), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)

    weights: dict[str, Tensor] = {
        "tok_emb": matrix(cfg.vocab_size, n),
        "pos_emb": matrix(cfg.max_pos, n),
    }
    for i in range(cfg.layers):
        p = f"layer{i}."
        weights[p + "ln1.gain"] = ones(n)
        weights[p + "ln1.bias"] = zeros(n)
        for proj in ("wq", "wk", "wv", "wo"):
            weights[p + "attn." + proj] = matrix(n, n)
        for proj in ("bq", "bk", "bv", "bo"):
            weights[p + "attn." + proj] = zeros(n)
        weights[p + "ln2.gain"] = ones(n)
        weights[p + "ln2.bias"] = zeros(n)
        weights[p + "ff.w1"] = matrix(n, cfg.ff_dim)
        weights[p + "ff.b1"] = zeros(cfg.ff_dim)
        weights[p + "ff.w2"] = matrix(cfg.ff_dim, n)
        weights[p + "ff.b2"] = zeros(n)
    weights["final_ln.gain"] = ones(n)
    weights["final_ln.bias"] = zeros(n)
    if layer_weighting:
        weights["layer_weights.logits"] = zeros(cfg.layers + 1)
    return weights


def _attention(
    x: Tensor,
    weights: dict[str, Tensor],
    prefix: str,
    cfg: EncoderConfig,
    mask_bias: Tensor,
    attn_sink: list | None,
) -> Tensor:
    head_dim = cfg.hidden // cfg.heads
    q = ad.add(ad.matmul(x, weights[prefix + "wq"]), weights[prefix + "bq"])
    k = ad.add(ad.matmul(x, weights[prefix + "wk"]), weights[prefix + "bk"])
    v = ad.add(ad.matmul(x, weights[prefix + "wv"]), weights[prefix + "bv"])
    contexts = []
    for h in range(cfg.heads):
        qh = ad.narrow(q, 1, h * head_dim, head_dim)
        kh = ad.narrow(k, 1, h * head_dim, head_dim)
        vh = ad.narrow(v, 1, h * head_dim, head_dim)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(head_dim))
        attn = ad.softmax(ad.add(scores, mask_bias), axis=-1)
        if attn_sink is not None:
            attn_sink.append(attn.data.copy())
        contexts.append(ad.matmul(attn, vh))
    ctx = ad.concat(contexts, axis=1)
    return ad.add(ad.matmul(ctx, weights[prefix + "wo"]), weights[prefix + "bo"])


def _pool(x: Tensor, mask: np.ndarray, pooling: Pooling) -> Tensor:
    if pooling is Pooling.CLS:
        return ad.reshape(ad.narrow(x, 0, 0, 1), (x.shape[1],))
    if pooling is Pooling.MEAN_TOKENS:
        return ad.masked_mean_rows(x, mask)
    return ad.masked_max_rows(x, mask)


def encode_sequence(
    ids: list[int],
    weights: dict[str, Tensor],
    cfg: EncoderConfig,
    *,
    pooling: Pooling = Pooling.CLS,
    layer_weighting: bool = False,
    train: bool = False,
    dropout_seed: int = 0,
    attn_sink: list | None = None,
) -> Tensor:
    """Encode one token sequence into an embedding of dimension ``hidden``."""
    seq_len = len(ids)
    if seq_len > cfg.max_pos:
        raise ValueError(f"sequence length {seq_len} exceeds max_pos {cfg.max_pos}")
    idx = np.asarray(ids, dtype=np.int64)
    mask = idx != PAD
    mask_bias = Tensor(np.where(mask, 0.0, _MASK_BIAS).astype(np.float32))

    site = [0]

    def drop(t: Tensor) -> Tensor:
        site[0] += 1
        return ad.dropout(t, cfg.dropout_p, train=train,
                          seed=(dropout_seed * 131 + site[0]))

    x = ad.add(ad.embed_rows(weights["tok_emb"], idx),
               ad.embed_rows(weights["pos_emb"], np.arange(seq_len)))
    x = drop(x)
    layer_outputs = [x]
    for i in range(cfg.layers):
        p = f"layer{i}."
        h = ad.layer_norm(x, weights[p + "ln1.gain"], weights[p + "ln1.bias"])
        x = ad.add(x, drop(_attention(h, weights, p + "attn.", cfg, mask_bias, attn_sink)))
        h = ad.layer_norm(x, weights[p + "ln2.gain"], weights[p + "ln2.bias"])
        ff = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(h, weights[p + "ff.w1"]),
                                             weights[p + "ff.b1"])),
                              weights[p + "ff.w2"]),
                    weights[p + "ff.b2"])
        x = ad.add(x, drop(ff))
        layer_outputs.append(x)

    gain = weights["final_ln.gain"]
    bias = weights["final_ln.bias"]
    if not layer_weighting:
        return _pool(ad.layer_norm(layer_outputs[-1], gain, bias), mask, pooling)

    pooled = [
        ad.reshape(_pool(ad.layer_norm(out, gain, bias), mask, pooling), (1, cfg.hidden))
        for out in layer_outputs
    ]
    stack = ad.concat(pooled, axis=0)  # (L+1, n)
    coeffs = ad.softmax(weights["layer_weights.logits"], axis=-1)
    return ad.matmul(ad.transpose(stack), coeffs)
