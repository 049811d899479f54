"""Mixed-precision KV cache with streaming recompression, plus compression-ratio accounting.

One ``MixedCache`` holds a single (sequence, head) stream of ``d``-dim keys
and values. Compressed tokens live in immutable segments (one per partition
per compression event); freshly decoded tokens sit in a full-precision buffer
until ``recompress_interval`` of them have accumulated.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import ORDINARY, AttnMatrix
from .quantizers import (CHANNELWISE, QuantizedBlock, cst_quantize, dequantize_block, param_budget,
                         quantize_matrix, SCHEME_ALIASES)
from .saliency import Partition, ProbeConfig, fraction_count, normalized_scores, salient_count, select_salient

log = logging.getLogger(__name__)

FP_BITS = 16
PARAM_BITS = 16
CACHE_BITS = (2, 4, 8, 16)


@dataclass(frozen=True)
class CacheConfig:
    k_h: int = 4
    k_l: int = 2
    saliency_ratio: float = 0.6
    recompress_interval: int = 100
    probe: ProbeConfig = ProbeConfig()
    seed: int = 0

    def __post_init__(self):
        for name in ("k_h", "k_l"):
            if getattr(self, name) not in CACHE_BITS:
                raise ValueError(f"{name} must be one of {CACHE_BITS}")
        if self.k_h < self.k_l:
            raise ValueError("k_h must be >= k_l")
        if self.recompress_interval < 1:
            raise ValueError("recompress_interval must be >= 1")
        if not 0.0 < self.saliency_ratio <= 1.0:
            raise ValueError("saliency_ratio must lie in (0, 1]")

    @property
    def mixed(self) -> bool:
        return self.saliency_ratio < 1.0


@dataclass
class CompressionReport:
    data_bits: int = 0
    param_bits: int = 0
    bitmap_bits: int = 0
    fp_buffer_bits: int = 0
    baseline_bits: int = 0

    @property
    def total_bits(self) -> int:
        return self.data_bits + self.param_bits + self.bitmap_bits + self.fp_buffer_bits

    @property
    def ratio(self) -> float:
        total = self.total_bits
        return self.baseline_bits / total if total else 1.0

    def __add__(self, other: "CompressionReport") -> "CompressionReport":
        return CompressionReport(*(getattr(self, f) + getattr(other, f) for f in
                                   ("data_bits", "param_bits", "bitmap_bits", "fp_buffer_bits", "baseline_bits")))

    def to_dict(self) -> dict:
        return {"data_bits": self.data_bits, "param_bits": self.param_bits, "bitmap_bits": self.bitmap_bits,
                "fp_buffer_bits": self.fp_buffer_bits, "ratio": self.ratio}


@dataclass
class Segment:
    """Keys (channelwise) and values (channel-separable tokenwise) of one partition at one bit width."""

    positions: np.ndarray
    bits: int
    salient: bool
    K: QuantizedBlock | np.ndarray
    V: QuantizedBlock | np.ndarray

    def __len__(self):
        return int(self.positions.size)

    def dequantize(self) -> tuple[np.ndarray, np.ndarray]:
        if self.bits == FP_BITS:
            return self.K, self.V
        return dequantize_block(self.K), dequantize_block(self.V)

    def accounting(self) -> tuple[int, int]:
        """(data bits, parameter bits) for the K and V blocks together."""
        if self.bits == FP_BITS:
            return 2 * self.K.size * FP_BITS, 0
        rows, d = self.K.shape
        data = 2 * rows * d * self.bits
        params = (self.K.n_params() + self.V.n_params()) * PARAM_BITS
        return data, params


def quantize_kv(K, V, positions, bits: int, salient: bool = False) -> Segment:
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.int64)
    if bits == FP_BITS:
        return Segment(positions, bits, salient, K.copy(), V.copy())
    return Segment(positions, bits, salient, quantize_matrix(K, CHANNELWISE, bits), cst_quantize(V, bits))


class MixedCache:
    def __init__(self, d: int, cfg: CacheConfig, seed=None):
        self.d = d
        self.cfg = cfg
        self.segments: list[Segment] = []
        self.fp_K: list[np.ndarray] = []
        self.fp_V: list[np.ndarray] = []
        self.probe_rows: list[np.ndarray] = []
        self.probe_pos: list[int] = []
        self.n_compressed = 0
        self.rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self._dense: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def window_count(self) -> int:
        return len(self.fp_K)

    @property
    def total_tokens(self) -> int:
        return self.n_compressed + len(self.fp_K)

    @property
    def n_salient(self) -> int:
        return sum(len(s) for s in self.segments if s.salient)

    @property
    def n_regular(self) -> int:
        return sum(len(s) for s in self.segments if not s.salient)

    @property
    def partition_bitmap(self) -> np.ndarray:
        """One flag per compressed token, in logical order: True = salient."""
        bm = np.zeros(self.n_compressed, dtype=bool)
        for s in self.segments:
            if s.salient:
                bm[s.positions] = True
        return bm

    def token_order(self) -> np.ndarray:
        """(segment, row) physical slot for each logical position; segment -1 is the fp buffer."""
        order = np.empty((self.total_tokens, 2), dtype=np.int64)
        for si, s in enumerate(self.segments):
            order[s.positions, 0] = si
            order[s.positions, 1] = np.arange(len(s))
        buf = np.arange(self.n_compressed, self.total_tokens)
        order[buf, 0] = -1
        order[buf, 1] = np.arange(buf.size)
        return order

    def _add_segments(self, K, V, positions, partition: Partition) -> None:
        for idx, bits, salient in ((partition.salient_idx, self.cfg.k_h, True),
                                   (partition.regular_idx, self.cfg.k_l, False)):
            if idx.size:
                self.segments.append(quantize_kv(K[idx], V[idx], positions[idx], bits, salient))
        self.n_compressed += positions.size
        self._dense = None

    def _compressed_dense(self) -> tuple[np.ndarray, np.ndarray]:
        if self._dense is None:
            Kd = np.empty((self.n_compressed, self.d))
            Vd = np.empty((self.n_compressed, self.d))
            for s in self.segments:
                k, v = s.dequantize()
                Kd[s.positions] = k
                Vd[s.positions] = v
            self._dense = (Kd, Vd)
        return self._dense

    def report(self) -> CompressionReport:
        rep = CompressionReport()
        for s in self.segments:
            data, params = s.accounting()
            rep.data_bits += data
            rep.param_bits += params
        if self.cfg.mixed:
            rep.bitmap_bits = self.n_compressed
        rep.fp_buffer_bits = 2 * self.window_count * self.d * FP_BITS
        rep.baseline_bits = 2 * self.total_tokens * self.d * FP_BITS
        return rep


def compress_prefill(K, V, partition: Partition, cfg: CacheConfig, seed=None) -> MixedCache:
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if K.shape != V.shape or K.ndim != 2:
        raise ValueError(f"K {K.shape} and V {V.shape} must be equal-shaped (l, d) matrices")
    l = K.shape[0]
    covered = np.union1d(partition.salient_idx, partition.regular_idx)
    if partition.l != l or not np.array_equal(covered, np.arange(l)):
        raise ValueError(f"partition does not cover the {l} prefill tokens exactly")
    cache = MixedCache(K.shape[1], cfg, seed)
    cache._add_segments(K, V, np.arange(l), partition)
    return cache


def append_decode(cache: MixedCache, k_vec, v_vec) -> MixedCache:
    k_vec = np.asarray(k_vec, dtype=np.float64).ravel()
    v_vec = np.asarray(v_vec, dtype=np.float64).ravel()
    if k_vec.size != cache.d or v_vec.size != cache.d:
        raise ValueError(f"expected {cache.d}-dim key/value, got {k_vec.size}/{v_vec.size}")
    if cache.window_count >= cache.cfg.recompress_interval:
        raise RuntimeError("fp buffer is full; call maybe_recompress before appending")
    cache.fp_K.append(k_vec.copy())
    cache.fp_V.append(v_vec.copy())
    return cache


def _probe_step_qualifies(cache: MixedCache, step: int, token_class: int) -> bool:
    cfg = cache.cfg
    strategy = cfg.probe.strategy
    if strategy == "all":
        return True
    if strategy == "special":
        return token_class != ORDINARY
    n_tail = fraction_count(cfg.probe.recent_fraction, cfg.recompress_interval) if strategy in ("recent", "hybrid") else 0
    if step > cfg.recompress_interval - n_tail:
        return True
    if strategy in ("random", "hybrid"):
        return bool(cache.rng.random() < cfg.probe.random_fraction)
    return False


def record_probe_row(cache: MixedCache, a, step_in_window: int, token_class: int = ORDINARY) -> MixedCache:
    """Keep the current token's attention row if it is a decode-phase probe.

    The last few steps of each window always qualify; earlier steps flip the
    cache's seeded coin.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    if a.size != cache.total_tokens:
        raise ValueError(f"probe row has {a.size} entries, cache holds {cache.total_tokens} tokens")
    if _probe_step_qualifies(cache, step_in_window, token_class):
        cache.probe_rows.append(a.copy())
        cache.probe_pos.append(cache.total_tokens - 1)
    return cache


def _window_partition(cache: MixedCache, lo: int, hi: int) -> Partition:
    n = hi - lo
    cfg = cache.cfg
    if not cfg.mixed:
        return Partition(np.arange(n), np.zeros(0, np.int64), cfg.saliency_ratio)
    if cache.probe_rows:
        total = cache.total_tokens
        rows = np.zeros((len(cache.probe_rows), total))
        for r, a in enumerate(cache.probe_rows):
            rows[r, :a.size] = a
        sv = normalized_scores(AttnMatrix(rows, np.asarray(cache.probe_pos, dtype=np.int64))).subset(lo, hi)
        if sv.valid_mask.any():
            return select_salient(sv, cfg.saliency_ratio)
    log.warning("recompressing %d tokens without probe coverage; all go to the low-bit partition", n)
    return Partition(np.zeros(0, np.int64), np.arange(n), cfg.saliency_ratio)


def maybe_recompress(cache: MixedCache, cfg: CacheConfig | None = None) -> MixedCache:
    """Quantize the buffered window once it reaches the recompression interval.

    Already-compressed tokens are never touched again.
    """
    if cfg is not None and cfg != cache.cfg:
        cache.cfg = cfg
    if cache.window_count < cache.cfg.recompress_interval:
        return cache
    lo, hi = cache.n_compressed, cache.total_tokens
    part = _window_partition(cache, lo, hi)
    K = np.stack(cache.fp_K)
    V = np.stack(cache.fp_V)
    cache.fp_K.clear()
    cache.fp_V.clear()
    cache.probe_rows.clear()
    cache.probe_pos.clear()
    cache._add_segments(K, V, np.arange(lo, hi), part)
    return cache


def materialize(cache: MixedCache) -> tuple[np.ndarray, np.ndarray]:
    """Dequantized keys and values in logical token order."""
    Kd, Vd = cache._compressed_dense()
    if not cache.fp_K:
        return Kd.copy(), Vd.copy()
    return np.vstack([Kd, np.stack(cache.fp_K)]), np.vstack([Vd, np.stack(cache.fp_V)])


# --------------------------------------------------------------------------
# closed-form accounting
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Scheme:
    """Names a quantization layout for ``compression_report``.

    ``mixed`` is the two-partition layout (channelwise keys, CST values,
    ``k_high`` for the salient share and ``k_low`` for the rest).
    """

    name: str
    k: int = 4
    n: int = 32
    k_high: int = 4
    k_low: int = 2
    saliency_ratio: float = 0.6
    fp_tokens: int = 0


UNIFORM_SCHEMES = ("groupwise", "tokenwise", "channel-tokenwise", "channel-cst")
SCHEMES = ("fp16", *UNIFORM_SCHEMES, "mixed")


def compression_report(dims, scheme: Scheme | str) -> CompressionReport:
    if isinstance(scheme, str):
        scheme = Scheme(scheme)
    name = SCHEME_ALIASES.get(scheme.name, scheme.name)
    if name == "zipcache":
        name = "mixed"
    b, h, l, d = (int(x) for x in dims)
    if min(b, h, l, d) < 1:
        raise ValueError(f"dims must be positive, got {dims}")
    hd = h * d
    if not 0 <= scheme.fp_tokens <= l:
        raise ValueError("fp_tokens must lie in [0, l]")
    lq = l - scheme.fp_tokens
    rep = CompressionReport(baseline_bits=2 * b * hd * l * FP_BITS,
                            fp_buffer_bits=2 * b * hd * scheme.fp_tokens * FP_BITS)
    if name == "fp16":
        rep.data_bits = 2 * b * hd * lq * FP_BITS
    elif name in UNIFORM_SCHEMES:
        rep.data_bits = 2 * b * hd * lq * scheme.k
        if lq:
            rep.param_bits = param_budget(name, (b, h, lq, d), scheme.n).count * PARAM_BITS
    elif name == "mixed":
        ls = salient_count(scheme.saliency_ratio, lq)
        lr = lq - ls
        rep.data_bits = 2 * b * hd * (ls * scheme.k_high + lr * scheme.k_low)
        n_parts = (ls > 0) + (lr > 0)
        # keys: (scale, zero) per channel per partition; values: channel scale per
        # channel per partition plus (scale, zero) per token
        rep.param_bits = (n_parts * 3 * hd + 2 * b * lq) * PARAM_BITS
        rep.bitmap_bits = b * lq
    else:
        raise ValueError(f"unknown scheme {scheme.name!r}; choose from {SCHEMES}")
    return rep
