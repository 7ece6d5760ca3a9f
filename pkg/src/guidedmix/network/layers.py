"""Building blocks shared by the segmentation model.

Pooling and resizing are expressed as fixed row/column matrices applied with
:func:`guidedmix.autodiff.linear2d`, which keeps their gradients trivial and
their semantics explicit.
"""

from __future__ import annotations

import math

import numpy as np

from .. import autodiff as ad


def he_normal(rng, shape, fan_in):
    """Fan-in scaled normal init for conv / linear weights."""
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def adaptive_avg_pool_matrix(in_size: int, out_size: int) -> np.ndarray:
    """Row-stochastic (out, in) matrix averaging windows
    [floor(i*in/out), ceil((i+1)*in/out)) like adaptive average pooling."""
    m = np.zeros((out_size, in_size))
    for i in range(out_size):
        start = (i * in_size) // out_size
        end = -(-((i + 1) * in_size) // out_size)  # ceil division
        m[i, start:end] = 1.0 / (end - start)
    return m


def bilinear_resize_matrix(in_size: int, out_size: int) -> np.ndarray:
    """(out, in) interpolation matrix, corners aligned to corners."""
    m = np.zeros((out_size, in_size))
    if out_size == 1:
        # degenerate row: sample the midpoint
        src = (in_size - 1) / 2.0
        lo = int(math.floor(src))
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        m[0, lo] += 1.0 - frac
        m[0, hi] += frac
        return m
    scale = (in_size - 1) / (out_size - 1)
    for i in range(out_size):
        src = i * scale
        lo = int(math.floor(src))
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def resize_bilinear(x, out_h: int, out_w: int):
    """Resize (N, C, H, W) tensor spatially with corner-aligned bilinear maps."""
    n, c, h, w = x.shape if isinstance(x, np.ndarray) else x.data.shape
    if (h, w) == (out_h, out_w):
        return x
    rm = bilinear_resize_matrix(h, out_h)
    cm = bilinear_resize_matrix(w, out_w)
    return ad.linear2d(x, rm, cm)


def adaptive_avg_pool(x, out_h: int, out_w: int):
    n, c, h, w = x.data.shape
    return ad.linear2d(x, adaptive_avg_pool_matrix(h, out_h),
                       adaptive_avg_pool_matrix(w, out_w))


def non_local_attention(feat, wq, wk, wv):
    """Self-attention over spatial positions with a residual connection.

    feat: (N, C, H, W); wq, wk: (C/2, C, 1, 1); wv: (C, C, 1, 1), all
    bias-free.  Correlation D[n, m] = Q_n . K_m over flattened positions,
    A = row-softmax(D), out_n = sum_m A[n, m] V_m + feat_n.

    Returns (out, attention) where attention is the (N, P, P) row-stochastic
    map (detached numpy array, for diagnostics/tests).
    """
    n, c, h, w = feat.data.shape if isinstance(feat, ad.Tensor) else feat.shape
    if c % 2 != 0:
        raise ValueError(f"non-local block needs an even channel count, got {c}")
    feat = ad.as_tensor(feat)
    p = h * w
    q = ad.conv2d(feat, wq).reshape((n, c // 2, p)).transpose((0, 2, 1))  # (N, P, C/2)
    k = ad.conv2d(feat, wk).reshape((n, c // 2, p))                       # (N, C/2, P)
    v = ad.conv2d(feat, wv).reshape((n, c, p)).transpose((0, 2, 1))       # (N, P, C)
    corr = ad.matmul(q, k)                                                # (N, P, P)
    attn = ad.softmax(corr, axis=2)
    agg = ad.matmul(attn, v)                                              # (N, P, C)
    agg = agg.transpose((0, 2, 1)).reshape((n, c, h, w))
    return ad.add(agg, feat), attn.data


def non_local_attention_naive(feat, wq, wk, wv):
    """O(P^2) two-loop reference for the attention block (numpy-only)."""
    x = feat.data if isinstance(feat, ad.Tensor) else np.asarray(feat, dtype=np.float64)
    n, c, h, w = x.shape
    p = h * w
    qw = (wq.data if isinstance(wq, ad.Tensor) else wq).reshape(c // 2, c)
    kw = (wk.data if isinstance(wk, ad.Tensor) else wk).reshape(c // 2, c)
    vw = (wv.data if isinstance(wv, ad.Tensor) else wv).reshape(c, c)
    out = np.empty_like(x)
    for b in range(n):
        flat = x[b].reshape(c, p)               # channel vectors per position
        q = qw @ flat
        k = kw @ flat
        v = vw @ flat
        for i in range(p):
            d = np.array([q[:, i] @ k[:, m] for m in range(p)])
            d -= d.max()
            a = np.exp(d)
            a /= a.sum()
            acc = np.zeros(c)
            for m in range(p):
                acc += a[m] * v[:, m]
            out[b].reshape(c, p)[:, i] = acc + flat[:, i]
    return out
