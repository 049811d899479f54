"""Reference causal attention, a tiled online-softmax variant, and probe-row attention.

All routines take per-head ``(l, d)`` matrices and compute in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import AttnMatrix


@dataclass(frozen=True)
class TiledAttnConfig:
    block_rows: int = 64
    block_cols: int = 64

    def __post_init__(self):
        if self.block_rows < 1 or self.block_cols < 1:
            raise ValueError("tile sizes must be >= 1")


def _check_qkv(Q, K, V=None):
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if Q.ndim != 2 or K.ndim != 2:
        raise ValueError("Q and K must be 2-D (l, d) matrices")
    if Q.shape[1] != K.shape[1]:
        raise ValueError(f"head dim mismatch: Q has {Q.shape[1]}, K has {K.shape[1]}")
    if V is not None:
        V = np.asarray(V, dtype=np.float64)
        if V.ndim != 2 or V.shape[0] != K.shape[0]:
            raise ValueError(f"V shape {V.shape} does not match K shape {K.shape}")
    return Q, K, V


def _prob_rows(Q_rows, row_index, K, causal: bool) -> np.ndarray:
    """Softmax rows for the given queries; masked logits are -inf so they become exact zeros."""
    logits = (Q_rows @ K.T) / math.sqrt(K.shape[1])
    if causal:
        cols = np.arange(K.shape[0])
        logits = np.where(cols[None, :] > row_index[:, None], -np.inf, logits)
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


def attention_full(Q, K, V, causal: bool = True) -> tuple[np.ndarray, AttnMatrix]:
    """Materialize the whole attention matrix; O = A V."""
    Q, K, V = _check_qkv(Q, K, V)
    if Q.shape[0] < 1:
        raise ValueError("need at least one query")
    if causal and Q.shape[0] != K.shape[0]:
        raise ValueError("causal prefill attention needs as many queries as keys")
    idx = np.arange(Q.shape[0])
    A = _prob_rows(Q, idx, K, causal)
    return A @ V, AttnMatrix(A, idx)


def attention_tiled(Q, K, V, cfg: TiledAttnConfig = TiledAttnConfig(), causal: bool = True) -> np.ndarray:
    """Blockwise attention with a running max and running denominator per query.

    Only one ``block_rows x block_cols`` score tile exists at a time; the
    full ``l x l`` score matrix is never formed.
    """
    Q, K, V = _check_qkv(Q, K, V)
    lq, d = Q.shape
    lk = K.shape[0]
    if lq < 1:
        raise ValueError("need at least one query")
    if causal and lq != lk:
        raise ValueError("causal prefill attention needs as many queries as keys")
    scale = 1.0 / math.sqrt(d)
    out = np.empty((lq, V.shape[1]))
    br, bc = cfg.block_rows, cfg.block_cols
    for r0 in range(0, lq, br):
        r1 = min(r0 + br, lq)
        q = Q[r0:r1] * scale
        m = np.full(r1 - r0, -np.inf)
        s = np.zeros(r1 - r0)
        acc = np.zeros((r1 - r0, V.shape[1]))
        c_end = r1 if causal else lk
        for c0 in range(0, c_end, bc):
            c1 = min(c0 + bc, c_end)
            t = q @ K[c0:c1].T
            if causal and c1 - 1 > r0:
                rows = np.arange(r0, r1)[:, None]
                cols = np.arange(c0, c1)[None, :]
                t = np.where(cols > rows, -np.inf, t)
            m_new = np.maximum(m, t.max(axis=1))
            # every query row sees column 0 in the first tile, so m_new is finite
            alpha = np.exp(m - m_new)
            p = np.exp(t - m_new[:, None])
            s = s * alpha + p.sum(axis=1)
            acc = acc * alpha[:, None] + p @ V[c0:c1]
            m = m_new
        out[r0:r1] = acc / s[:, None]
    return out


def attention_decode(q, K, V) -> tuple[np.ndarray, np.ndarray]:
    """One query against the whole cache (no mask: the cache only holds the past and the current token)."""
    q = np.asarray(q, dtype=np.float64).reshape(1, -1)
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] == 0:
        raise ValueError("decode attention needs a non-empty cache")
    q, K, V = _check_qkv(q, K, V)
    a = _prob_rows(q, np.array([K.shape[0] - 1]), K, causal=False)[0]
    return a @ V, a


def probe_attention(Q, probe_idx, K, causal: bool = True) -> AttnMatrix:
    """Attention rows for the probe queries only."""
    Q, K, _ = _check_qkv(Q, K)
    idx = np.asarray(probe_idx, dtype=np.int64).ravel()
    if idx.size:
        if idx.min() < 0 or idx.max() >= Q.shape[0]:
            raise ValueError(f"probe index out of range [0, {Q.shape[0]})")
        if np.any(np.diff(idx) <= 0):
            raise ValueError("probe indices must be sorted and unique")
    if idx.size == 0:
        return AttnMatrix(np.zeros((0, K.shape[0])), idx)
    return AttnMatrix(_prob_rows(Q[idx], idx, K, causal), idx)
