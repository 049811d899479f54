"""Per-head cache policies replayed by the harness.

Each policy sees one (sequence, head) stream: a prefill block followed by
decode steps. ``prefill`` returns the prefill attention outputs, ``decode``
returns one output row per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import TiledAttnConfig, attention_decode, attention_full, attention_tiled, probe_attention
from .cache import (FP_BITS, CacheConfig, CompressionReport, MixedCache, Segment, append_decode,
                    compress_prefill, materialize, maybe_recompress, quantize_kv, record_probe_row)
from .saliency import (Partition, ProbeConfig, accumulated_scores, normalized_scores, salient_count, select_probes,
                       select_salient)

POLICIES = ("fp16", "uniform", "recent_window", "evict", "zipcache")


@dataclass(frozen=True)
class PolicyConfig:
    """Which cache policy to run and its knobs.

    ``uniform`` quantizes every token at ``k`` bits (16 = no quantization).
    ``recent_window`` keeps the newest ``window`` tokens in full precision and
    the rest at ``k_low`` (a KIVI-like baseline). ``evict`` keeps the top
    ``ratio`` tokens by accumulated attention plus a ``recent`` fraction and
    drops the rest (H2O-like). ``zipcache`` is the mixed-precision cache.
    """

    policy: str = "fp16"
    k: int = 4
    window: int = 32
    k_low: int = 2
    ratio: float = 0.4
    recent: float = 0.2
    cache: CacheConfig = field(default_factory=CacheConfig)
    seed: int = 0
    label: str | None = None

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; choose from {POLICIES}")
        if self.policy == "uniform" and self.k not in (2, 4, 8, 16):
            raise ValueError(f"uniform bit width must be 2, 4, 8 or 16, got {self.k}")
        if self.policy == "recent_window":
            if self.window < 0:
                raise ValueError("window must be >= 0")
            if self.k_low not in (2, 4, 8):
                raise ValueError("k_low must be 2, 4 or 8")
        if self.policy == "evict":
            if not (0 <= self.ratio <= 1 and 0 <= self.recent <= 1):
                raise ValueError("evict ratio and recent must lie in [0, 1]")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.policy == "uniform":
            return f"uniform({self.k})"
        if self.policy == "recent_window":
            return f"recent_window({self.window},{self.k_low}) [KIVI-like]"
        if self.policy == "evict":
            return f"evict({self.ratio:g},{self.recent:g}) [H2O-like]"
        if self.policy == "zipcache":
            c = self.cache
            return f"zipcache({c.k_h}/{c.k_l},{c.saliency_ratio:g},{c.probe.strategy})"
        return self.policy


class HeadPolicy:
    """Interface: one instance per (layer, batch row, head)."""

    tiled = TiledAttnConfig(64, 64)

    def prefill(self, Q, K, V, classes) -> np.ndarray:
        raise NotImplementedError

    def decode(self, q, k, v, token_class: int) -> np.ndarray:
        raise NotImplementedError

    def report(self) -> CompressionReport:
        raise NotImplementedError

    def selected(self) -> np.ndarray | None:
        """Prefill tokens the policy's saliency path favours, or None if it has none."""
        return None


class MixedHead(HeadPolicy):
    """fp16, uniform(k) and zipcache all run on a MixedCache."""

    def __init__(self, cfg: CacheConfig, probe_seed: int, cache_seed: int, probing: bool):
        self.cfg = cfg
        self.probe_seed = probe_seed
        self.cache_seed = cache_seed
        self.probing = probing
        self.cache: MixedCache | None = None
        self._selected = None

    def prefill(self, Q, K, V, classes):
        l = K.shape[0]
        if self.probing and self.cfg.mixed:
            pc = self.cfg.probe
            probes = select_probes(ProbeConfig(pc.strategy, pc.recent_fraction, pc.random_fraction, self.probe_seed),
                                   l, classes)
            sv = normalized_scores(probe_attention(Q, probes, K))
            if sv.valid_mask.any():
                part = select_salient(sv, self.cfg.saliency_ratio)
            else:
                part = Partition(np.zeros(0, np.int64), np.arange(l), self.cfg.saliency_ratio)
            self._selected = part.salient_idx
        else:
            part = Partition(np.arange(l), np.zeros(0, np.int64), 1.0)
        self.cache = compress_prefill(K, V, part, self.cfg, seed=self.cache_seed)
        Kh, Vh = materialize(self.cache)
        return attention_tiled(Q, Kh, Vh, self.tiled)

    def decode(self, q, k, v, token_class):
        c = self.cache
        append_decode(c, k, v)
        Kh, Vh = materialize(c)
        o, a = attention_decode(q, Kh, Vh)
        if self.probing and self.cfg.mixed:
            record_probe_row(c, a, c.window_count, token_class)
        maybe_recompress(c)
        return o

    def report(self):
        return self.cache.report()

    def selected(self):
        return self._selected


class RecentWindowHead(HeadPolicy):
    """Newest ``window`` tokens stay full precision; older ones are quantized at ``k_low``.

    The full-precision tail is flushed ``window`` tokens at a time once it
    reaches twice the window, so every quantized block spans many tokens.
    """

    def __init__(self, window: int, k_low: int):
        self.window = window
        self.k_low = k_low
        self.segments: list[Segment] = []
        self.n_q = 0
        self.fp_K: list[np.ndarray] = []
        self.fp_V: list[np.ndarray] = []
        self._dense = (None, None)
        self.prefill_len = 0

    def _quantize(self, K, V):
        pos = np.arange(self.n_q, self.n_q + K.shape[0])
        seg = quantize_kv(K, V, pos, self.k_low)
        self.segments.append(seg)
        self.n_q += K.shape[0]
        k, v = seg.dequantize()
        Kd, Vd = self._dense
        self._dense = (k, v) if Kd is None else (np.vstack([Kd, k]), np.vstack([Vd, v]))

    def _materialize(self):
        Kd, Vd = self._dense
        parts_k = [] if Kd is None else [Kd]
        parts_v = [] if Vd is None else [Vd]
        if self.fp_K:
            parts_k.append(np.stack(self.fp_K))
            parts_v.append(np.stack(self.fp_V))
        return np.vstack(parts_k), np.vstack(parts_v)

    def prefill(self, Q, K, V, classes):
        l = K.shape[0]
        self.prefill_len = l
        n_old = max(0, l - self.window)
        if n_old:
            self._quantize(K[:n_old], V[:n_old])
        self.fp_K = list(K[n_old:])
        self.fp_V = list(V[n_old:])
        return attention_tiled(Q, *self._materialize(), self.tiled)

    def decode(self, q, k, v, token_class):
        self.fp_K.append(np.asarray(k, dtype=np.float64))
        self.fp_V.append(np.asarray(v, dtype=np.float64))
        o, _ = attention_decode(q, *self._materialize())
        if len(self.fp_K) >= 2 * max(self.window, 1):
            n = len(self.fp_K) - self.window
            self._quantize(np.stack(self.fp_K[:n]), np.stack(self.fp_V[:n]))
            del self.fp_K[:n], self.fp_V[:n]
        return o

    def report(self):
        rep = CompressionReport()
        for s in self.segments:
            data, params = s.accounting()
            rep.data_bits += data
            rep.param_bits += params
        d = len(self.fp_K[0]) if self.fp_K else self.segments[0].K.shape[1]
        rep.fp_buffer_bits = 2 * len(self.fp_K) * d * FP_BITS
        rep.baseline_bits = 2 * (self.n_q + len(self.fp_K)) * d * FP_BITS
        return rep

    def selected(self):
        return np.arange(max(0, self.prefill_len - self.window), self.prefill_len)


class EvictHead(HeadPolicy):
    """Heavy hitters by accumulated attention plus a recent window; everything else is dropped.

    Prefill outputs are computed before eviction. During decode the budget
    ``round((ratio + recent) * tokens_seen)`` is enforced after every step,
    dropping the lowest-scoring non-recent token.
    """

    def __init__(self, ratio: float, recent: float):
        self.ratio = ratio
        self.recent = recent
        self.seen = 0

    def _budget(self, n):
        return salient_count(self.ratio, n) + salient_count(self.recent, n)

    def prefill(self, Q, K, V, classes):
        l = K.shape[0]
        O = attention_tiled(Q, K, V, self.tiled)
        acc = accumulated_scores(attention_full(Q, K, V)[1])
        n_recent = salient_count(self.recent, l)
        candidates = acc.subset(0, l - n_recent)
        heavy = np.zeros(0, np.int64)
        n_heavy = salient_count(self.ratio, l)
        if n_heavy and len(candidates):
            heavy = select_salient(candidates, min(1.0, n_heavy / len(candidates))).salient_idx
        keep = np.union1d(heavy, np.arange(l - n_recent, l))
        if keep.size == 0:
            raise ValueError("eviction settings remove every token")
        self.pos = keep.astype(np.int64)
        self.K = K[keep].copy()
        self.V = V[keep].copy()
        self.score = acc.scores[keep].copy()
        self.seen = l
        self._selected = keep
        return O

    def decode(self, q, k, v, token_class):
        self.K = np.vstack([self.K, k])
        self.V = np.vstack([self.V, v])
        self.pos = np.append(self.pos, self.seen)
        self.score = np.append(self.score, 0.0)
        self.seen += 1
        o, a = attention_decode(q, self.K, self.V)
        self.score += a
        budget = max(1, self._budget(self.seen))
        n_recent = salient_count(self.recent, self.seen)
        while self.pos.size > budget:
            old = self.pos < self.seen - n_recent
            if not old.any():
                break
            cand = np.flatnonzero(old)
            # lowest score, ties dropping the older token
            victim = cand[np.lexsort((self.pos[cand], self.score[cand]))[0]]
            keep = np.ones(self.pos.size, bool)
            keep[victim] = False
            self.K, self.V, self.pos, self.score = self.K[keep], self.V[keep], self.pos[keep], self.score[keep]
        return o

    @property
    def n_cached(self) -> int:
        return int(self.pos.size)

    def report(self):
        d = self.K.shape[1]
        return CompressionReport(data_bits=2 * self.n_cached * d * FP_BITS,
                                 baseline_bits=2 * self.seen * d * FP_BITS)

    def selected(self):
        return self._selected


def make_head(cfg: PolicyConfig, seed_seq: np.random.SeedSequence) -> HeadPolicy:
    probe_seed, cache_seed = (int(x) for x in seed_seq.generate_state(2))
    if cfg.policy == "fp16":
        return MixedHead(CacheConfig(16, 16, 1.0), probe_seed, cache_seed, probing=False)
    if cfg.policy == "uniform":
        return MixedHead(CacheConfig(cfg.k, cfg.k, 1.0, cfg.cache.recompress_interval), probe_seed, cache_seed,
                         probing=False)
    if cfg.policy == "zipcache":
        return MixedHead(cfg.cache, probe_seed, cache_seed, probing=True)
    if cfg.policy == "recent_window":
        return RecentWindowHead(cfg.window, cfg.k_low)
    if cfg.policy == "evict":
        return EvictHead(cfg.ratio, cfg.recent)
    raise ValueError(f"unknown policy {cfg.policy!r}")
