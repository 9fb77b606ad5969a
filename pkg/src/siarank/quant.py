"""Quantized execution path for the final interaction module.

Weights are quantized once per matrix (symmetric int8); activations are
quantized dynamically per call (affine uint8).  Matrix-vector products
accumulate in int32 inside a single fused kernel, with the nonlinearities
and the cosine/Euclidean features evaluated in float32.  The document
embedding arrives as stored uint8 codes; the fresh query embedding stays
float32.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .errors import DataError
from .store import QuantParams

_SQRT2 = math.sqrt(2.0)


def quantize_matrix(w: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    """Symmetric per-matrix int8 quantization; returns codes, scale, row sums."""
    limit = float(np.abs(w).max())
    scale = max(limit / 127.0, 1e-12)
    codes = np.clip(np.rint(w / scale), -127, 127).astype(np.int8)
    row_sums = codes.astype(np.int32).sum(axis=1).astype(np.int32)
    return codes, scale, row_sums


@njit(cache=True)
def _dyn_quant(x):
    lo = x[0]
    hi = x[0]
    for i in range(x.shape[0]):
        v = x[i]
        if v < lo:
            lo = v
        if v > hi:
            hi = v
    scale = (hi - lo) / 255.0
    if scale < 1e-8:
        scale = 1e-8
    zp = int(round(-lo / scale))
    if zp < 0:
        zp = 0
    elif zp > 255:
        zp = 255
    codes = np.empty(x.shape[0], dtype=np.uint8)
    for i in range(x.shape[0]):
        c = int(round(x[i] / scale)) + zp
        if c < 0:
            c = 0
        elif c > 255:
            c = 255
        codes[i] = c
    return codes, np.float32(scale), zp


@njit(cache=True)
def _int_matvec(wq, row_sums, w_scale, xq, x_scale, x_zp, out):
    rows, cols = wq.shape
    for i in range(rows):
        acc = 0
        for j in range(cols):
            acc += np.int32(wq[i, j]) * np.int32(xq[j])
        out[i] = w_scale * x_scale * np.float32(acc - x_zp * row_sums[i])


@njit(cache=True)
def _gelu_inplace(x):
    for i in range(x.shape[0]):
        v = x[i]
        x[i] = 0.5 * v * (1.0 + math.erf(v / 1.4142135623730951))


@njit(cache=True)
def _score_final_kernel(
    e_q, ed_codes, ed_scale, ed_zp,
    w1q, w1_scale, w1_rows,
    w2q, w2_scale, w2_rows,
    w_out,
):
    n = e_q.shape[0]
    e_d = np.empty(n, dtype=np.float32)
    for i in range(n):
        e_d[i] = (np.float32(ed_codes[i]) - np.float32(ed_zp)) * ed_scale
    m = np.empty(n, dtype=np.float32)
    for i in range(n):
        m[i] = e_q[i] if e_q[i] > e_d[i] else e_d[i]

    mq, m_scale, m_zp = _dyn_quant(m)
    h1 = np.empty(2 * n, dtype=np.float32)
    _int_matvec(w1q, w1_rows, w1_scale, mq, m_scale, m_zp, h1)
    _gelu_inplace(h1)

    h1q, h1_scale, h1_zp = _dyn_quant(h1)
    h2 = np.empty(n, dtype=np.float32)
    _int_matvec(w2q, w2_rows, w2_scale, h1q, h1_scale, h1_zp, h2)
    _gelu_inplace(h2)
    for i in range(n):
        h2[i] += m[i]

    qq = np.float32(0.0)
    dd = np.float32(0.0)
    qd = np.float32(0.0)
    ss = np.float32(0.0)
    for i in range(n):
        qq += e_q[i] * e_q[i]
        dd += e_d[i] * e_d[i]
        qd += e_q[i] * e_d[i]
        diff = e_q[i] - e_d[i]
        ss += diff * diff
    nq = math.sqrt(qq)
    nd = math.sqrt(dd)
    cos = qd / (nq * nd) if nq > 1e-12 and nd > 1e-12 else 0.0
    euc = math.sqrt(ss)

    s = 0.0
    for i in range(n):
        s += w_out[i] * h2[i]
    s += w_out[n] * cos + w_out[n + 1] * euc
    return math.tanh(s)


class QuantizedFinal:
    """Quantized scorer built from trained final-interaction weights."""

    def __init__(self, int_weights: dict[str, np.ndarray]):
        missing = {"w1", "w2", "w_out"} - set(int_weights)
        if missing:
            raise DataError(f"quantized path needs final-module weights, missing {missing}")
        self.n = int_weights["w2"].shape[0]
        self.w1q, self.w1_scale, self.w1_rows = quantize_matrix(int_weights["w1"])
        self.w2q, self.w2_scale, self.w2_rows = quantize_matrix(int_weights["w2"])
        self.w_out = np.asarray(int_weights["w_out"], dtype=np.float32)

    def score(self, e_q: np.ndarray, ed_codes: np.ndarray, params: QuantParams) -> float:
        return float(
            _score_final_kernel(
                np.asarray(e_q, dtype=np.float32), ed_codes,
                np.float32(params.scale), params.zero_point,
                self.w1q, np.float32(self.w1_scale), self.w1_rows,
                self.w2q, np.float32(self.w2_scale), self.w2_rows,
                self.w_out,
            )
        )

    def warm_up(self) -> None:
        """Trigger JIT compilation outside any timed region."""
        codes = np.zeros(self.n, dtype=np.uint8)
        self.score(np.zeros(self.n, dtype=np.float32), codes, QuantParams(1e-3, 0))
