"""Embedding-comparison modules mapping (query, document) vectors to a score.

Five variants: plain cosine; a single-hidden-layer comparator; the
TwinBERT-style residual layer with logistic output; and the final
two-layer residual module with and without the cosine/Euclidean side
features.  The final module computes

    m  = max(e_q, e_d)                     elementwise
    h1 = Dropout_0.25(GELU(W1 m))          W1: (2n, n)
    h2 = GELU(W2 h1) + m                   W2: (n, 2n), residual
    h3 = [h2, cos(e_q, e_d), ||e_q - e_d||]
    r  = tanh(w_out . h3)                  w_out: (n + 2,)

Dropout is active only in training mode, so evaluation is deterministic.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import truncated_normal

FINAL_DROPOUT_P = 0.25
_INV_SQRT2 = 1.0 / math.sqrt(2.0)


class Variant(Enum):
    COSINE = "cosine"
    SINGLE_HIDDEN = "single-hidden"
    TWINBERT = "twinbert"
    FINAL_NO_COSEUC = "final-no-coseuc"
    FINAL = "final"


def output_range(variant: Variant) -> tuple[float, float]:
    """Score range of a variant: tanh-style (-1, 1) or sigmoid-style (0, 1)."""
    if variant in (Variant.COSINE, Variant.FINAL, Variant.FINAL_NO_COSEUC):
        return (-1.0, 1.0)
    return (0.0, 1.0)


def init_interaction(variant: Variant, n: int, seed: int, sigma: float = 0.02) -> dict[str, Tensor]:
    """Fresh comparator parameters for embedding dimension ``n``."""
    rng = np.random.default_rng(seed)

    def matrix(*shape):
        return Tensor(truncated_normal(rng, shape, sigma), requires_grad=True)

    def zeros(shape=()):
        return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)

    if variant is Variant.COSINE:
        return {}
    if variant is Variant.SINGLE_HIDDEN:
        return {"wh": matrix(3, 2 * n), "bh": zeros(3), "wo": matrix(5), "bo": zeros()}
    if variant is Variant.TWINBERT:
        return {"wr": matrix(n, n), "br": zeros(n), "wo": matrix(n), "bo": zeros()}
    if variant is Variant.FINAL_NO_COSEUC:
        return {"w1": matrix(2 * n, n), "w2": matrix(n, 2 * n), "w_out": matrix(n)}
    if variant is Variant.FINAL:
        return {"w1": matrix(2 * n, n), "w2": matrix(n, 2 * n), "w_out": matrix(n + 2)}
    raise ValueError(f"unknown variant {variant}")


def _check_dims(e_q: Tensor, e_d: Tensor) -> None:
    if e_q.shape != e_d.shape or e_q.ndim != 1:
        raise ValueError(
            f"interaction needs equal 1-d embeddings, got {e_q.shape} and {e_d.shape}"
        )


def score_cosine(e_q: Tensor, e_d: Tensor) -> Tensor:
    _check_dims(e_q, e_d)
    return ad.cosine_similarity(e_q, e_d)


def _final_trunk(
    e_q: Tensor, e_d: Tensor, w: dict[str, Tensor], train: bool, dropout_seed: int
) -> tuple[Tensor, Tensor]:
    m = ad.elementwise_max(e_q, e_d)
    h1 = ad.dropout(ad.gelu(ad.matmul(w["w1"], m)), FINAL_DROPOUT_P,
                    train=train, seed=dropout_seed)
    h2 = ad.add(ad.gelu(ad.matmul(w["w2"], h1)), m)
    return m, h2


def score_final(
    e_q: Tensor, e_d: Tensor, w: dict[str, Tensor], *, train: bool = False,
    dropout_seed: int = 0,
) -> Tensor:
    _check_dims(e_q, e_d)
    _, h2 = _final_trunk(e_q, e_d, w, train, dropout_seed)
    cos = ad.reshape(ad.cosine_similarity(e_q, e_d), (1,))
    euc = ad.reshape(ad.euclidean_distance(e_q, e_d), (1,))
    h3 = ad.concat([h2, cos, euc])
    return ad.tanh(ad.dot(w["w_out"], h3))


def score_final_no_coseuc(
    e_q: Tensor, e_d: Tensor, w: dict[str, Tensor], *, train: bool = False,
    dropout_seed: int = 0,
) -> Tensor:
    _check_dims(e_q, e_d)
    _, h2 = _final_trunk(e_q, e_d, w, train, dropout_seed)
    return ad.tanh(ad.dot(w["w_out"], h2))


def score_twinbert(e_q: Tensor, e_d: Tensor, w: dict[str, Tensor], **_unused) -> Tensor:
    _check_dims(e_q, e_d)
    m = ad.elementwise_max(e_q, e_d)
    h = ad.add(ad.gelu(ad.add(ad.matmul(w["wr"], m), w["br"])), m)
    return ad.sigmoid(ad.add(ad.dot(w["wo"], h), w["bo"]))


def score_single_hidden(e_q: Tensor, e_d: Tensor, w: dict[str, Tensor], **_unused) -> Tensor:
    _check_dims(e_q, e_d)
    v = ad.concat([e_q, e_d])
    z = ad.add(ad.matmul(w["wh"], v), w["bh"])
    euc = ad.reshape(ad.euclidean_distance(e_q, e_d), (1,))
    cos = ad.reshape(ad.cosine_similarity(e_q, e_d), (1,))
    feats = ad.concat([z, euc, cos])
    return ad.sigmoid(ad.add(ad.dot(w["wo"], feats), w["bo"]))


_SCORERS = {
    Variant.FINAL: score_final,
    Variant.FINAL_NO_COSEUC: score_final_no_coseuc,
    Variant.TWINBERT: score_twinbert,
    Variant.SINGLE_HIDDEN: score_single_hidden,
}


def score(
    variant: Variant, e_q: Tensor, e_d: Tensor, w: dict[str, Tensor], *,
    train: bool = False, dropout_seed: int = 0,
) -> Tensor:
    """Dispatch to one variant's scorer; returns a scalar tensor."""
    if variant is Variant.COSINE:
        return score_cosine(e_q, e_d)
    return _SCORERS[variant](e_q, e_d, w, train=train, dropout_seed=dropout_seed)


# ---------------------------------------------------------------------------
# Lean inference path (plain numpy, no tape) used by stores and benchmarks
# ---------------------------------------------------------------------------

def _gelu_np(x: np.ndarray) -> np.ndarray:
    # x * Phi(x) via the Gaussian CDF ufunc; one temporary per call.
    t = ndtr(x)
    t *= x
    return t


def _cos_np(a: np.ndarray, b: np.ndarray, eps: float = 1e-12) -> float:
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na < eps or nb < eps:
        return 0.0
    return float(a @ b) / (na * nb)


def _sigmoid_np(s: float) -> float:
    if s >= 0.0:
        return 1.0 / (1.0 + math.exp(-s))
    e = math.exp(s)
    return e / (1.0 + e)


def score_fast(variant: Variant, e_q: np.ndarray, e_d: np.ndarray,
               w: dict[str, np.ndarray]) -> float:
    """Evaluation-mode scoring on raw arrays; matches ``score`` in eval mode."""
    if variant is Variant.COSINE:
        return _cos_np(e_q, e_d)
    if variant is Variant.TWINBERT:
        m = np.maximum(e_q, e_d)
        h = _gelu_np(w["wr"] @ m + w["br"]) + m
        return _sigmoid_np(float(w["wo"] @ h + w["bo"]))
    if variant is Variant.SINGLE_HIDDEN:
        z = w["wh"] @ np.concatenate([e_q, e_d]) + w["bh"]
        diff = e_q - e_d
        euc = math.sqrt(float(diff @ diff))
        s = float(w["wo"][:3] @ z) + float(w["wo"][3]) * euc \
            + float(w["wo"][4]) * _cos_np(e_q, e_d) + float(w["bo"])
        return _sigmoid_np(s)
    m = np.maximum(e_q, e_d)
    h1 = _gelu_np(w["w1"] @ m)
    h2 = _gelu_np(w["w2"] @ h1)
    h2 += m
    if variant is Variant.FINAL_NO_COSEUC:
        return math.tanh(float(w["w_out"] @ h2))
    n = m.shape[0]
    diff = e_q - e_d
    euc = math.sqrt(float(diff @ diff))
    s = float(w["w_out"][:n] @ h2) + float(w["w_out"][n]) * _cos_np(e_q, e_d) \
        + float(w["w_out"][n + 1]) * euc
    return math.tanh(s)


def weights_as_arrays(w: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.data for k, t in w.items()}
