import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zipkv.attention import attention_decode
from zipkv.cache import (CacheConfig, MixedCache, Scheme, append_decode, compress_prefill, compression_report,
                         materialize, maybe_recompress, quantize_kv, record_probe_row)
from zipkv.core import AttnMatrix, synth_trace
from zipkv.quantizers import CHANNELWISE, cst_quantize, dequantize_block, quantize_matrix
from zipkv.saliency import Partition, ProbeConfig, normalized_scores, select_salient

D = 8


def kv(seed, l, d=D):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((l, d)), rng.standard_normal((l, d))


def split(l, ratio=0.5, seed=0):
    perm = np.random.default_rng(seed).permutation(l)
    n = int(round(ratio * l))
    return Partition(np.sort(perm[:n]), np.sort(perm[n:]), ratio)


def all_salient(l):
    return Partition(np.arange(l), np.zeros(0, np.int64), 1.0)


def counts(c):
    return c.n_salient + c.n_regular + c.window_count


# -- prefill ----------------------------------------------------------------

def test_prefill_layout():
    K, V = kv(0, 20)
    cfg = CacheConfig(4, 2, 0.5)
    c = compress_prefill(K, V, split(20), cfg)
    assert c.n_salient == 10 and c.n_regular == 10 and c.window_count == 0
    assert c.partition_bitmap.sum() == 10
    sal = [s for s in c.segments if s.salient][0]
    assert sal.bits == 4 and sal.K.granularity == CHANNELWISE and sal.V.channel_scales is not None


def test_prefill_full_ratio_is_k_h_round_trip():
    K, V = kv(1, 16)
    c = compress_prefill(K, V, all_salient(16), CacheConfig(4, 2, 1.0))
    Kh, Vh = materialize(c)
    assert c.n_regular == 0
    assert np.array_equal(Kh, dequantize_block(quantize_matrix(K, CHANNELWISE, 4)))
    assert np.array_equal(Vh, dequantize_block(cst_quantize(V, 4)))


def test_equal_bit_widths_match_per_partition_quantization():
    K, V = kv(2, 12)
    part = split(12, 0.5, 3)
    Kh, Vh = materialize(compress_prefill(K, V, part, CacheConfig(4, 4, 0.5)))
    for idx in (part.salient_idx, part.regular_idx):
        assert np.array_equal(Kh[idx], dequantize_block(quantize_matrix(K[idx], CHANNELWISE, 4)))
        assert np.array_equal(Vh[idx], dequantize_block(cst_quantize(V[idx], 4)))


def test_salient_rows_beat_low_bit_on_synth():
    t = synth_trace(4, (1, 1, 64, 16), "peaked", prefill_len=64)
    Q, K, V = (x.head(0, 0).astype(float) for x in t.layers[0])
    from zipkv.attention import attention_full
    part = select_salient(normalized_scores(attention_full(Q, K, V)[1]), 0.4)
    Kh, Vh = materialize(compress_prefill(K, V, part, CacheConfig(4, 2, 0.4)))
    s = part.salient_idx
    low = quantize_kv(K[s], V[s], s, 2)
    k2, v2 = low.dequantize()
    err_mixed = np.linalg.norm(Kh[s] - K[s], axis=1) + np.linalg.norm(Vh[s] - V[s], axis=1)
    err_low = np.linalg.norm(k2 - K[s], axis=1) + np.linalg.norm(v2 - V[s], axis=1)
    assert err_mixed.sum() <= err_low.sum()


def test_prefill_partition_mismatch():
    K, V = kv(3, 10)
    with pytest.raises(ValueError):
        compress_prefill(K, V, split(9), CacheConfig())
    bad = Partition(np.array([0, 1]), np.array([1, 2, 3, 4, 5, 6, 7, 8, 9]), 0.2)
    with pytest.raises(ValueError):
        compress_prefill(K, V, bad, CacheConfig())


# -- decode -----------------------------------------------------------------

def test_append_and_buffer_exact():
    K, V = kv(5, 10)
    c = compress_prefill(K, V, split(10), CacheConfig(4, 2, 0.5))
    k, v = kv(6, 1)
    append_decode(c, k[0], v[0])
    assert c.window_count == 1
    Kh, Vh = materialize(c)
    assert np.array_equal(Kh[-1], k[0]) and np.array_equal(Vh[-1], v[0])
    with pytest.raises(ValueError):
        append_decode(c, np.zeros(D + 1), np.zeros(D))


def test_99_appends_no_recompression():
    K, V = kv(7, 10)
    c = compress_prefill(K, V, split(10), CacheConfig(4, 2, 0.5))
    k, v = kv(8, 99)
    for i in range(99):
        append_decode(c, k[i], v[i])
        maybe_recompress(c)
    assert c.window_count == 99 and c.n_compressed == 10


def test_recompress_at_interval_and_idempotent():
    K, V = kv(9, 10)
    c = compress_prefill(K, V, split(10), CacheConfig(4, 2, 0.5))
    k, v = kv(10, 100)
    for i in range(100):
        append_decode(c, k[i], v[i])
        _, a = attention_decode(k[i], *materialize(c))
        record_probe_row(c, a, c.window_count)
    n_before = len(c.segments)
    maybe_recompress(c)
    assert c.window_count == 0 and c.n_compressed == 110 and not c.probe_rows
    snap = [(s.positions.tobytes(), s.K.to_bytes(), s.V.to_bytes()) for s in c.segments]
    assert len(snap) == n_before + 2
    maybe_recompress(c)
    assert snap == [(s.positions.tobytes(), s.K.to_bytes(), s.V.to_bytes()) for s in c.segments]


def test_probe_tail_always_recorded():
    c = MixedCache(D, CacheConfig(probe=ProbeConfig("hybrid", 0.05, 0.0)))
    k, v = kv(11, 100)
    for i in range(100):
        append_decode(c, k[i], v[i])
        record_probe_row(c, np.full(i + 1, 1 / (i + 1)), i + 1)
    assert c.probe_pos == [95, 96, 97, 98, 99]


def test_probe_coin_rate():
    c = MixedCache(D, CacheConfig(probe=ProbeConfig("hybrid", 0.05, 0.05)), seed=123)
    append_decode(c, np.zeros(D), np.zeros(D))
    row = np.ones(1)
    for _ in range(10_000):
        record_probe_row(c, row, 1)
    assert 0.04 <= len(c.probe_rows) / 10_000 <= 0.06


def test_probe_coin_miss_leaves_log():
    c = MixedCache(D, CacheConfig(probe=ProbeConfig("hybrid", 0.05, 0.0)))
    append_decode(c, np.zeros(D), np.zeros(D))
    record_probe_row(c, np.ones(1), 1)
    assert c.probe_rows == []
    with pytest.raises(ValueError):
        record_probe_row(c, np.ones(2), 1)


def test_empty_probe_log_falls_back_to_regular(caplog):
    cfg = CacheConfig(4, 2, 0.5, recompress_interval=5)
    c = MixedCache(D, cfg)
    k, v = kv(12, 5)
    for i in range(5):
        append_decode(c, k[i], v[i])
    with caplog.at_level(logging.WARNING, logger="zipkv.cache"):
        maybe_recompress(c)
    assert c.n_regular == 5 and c.n_salient == 0
    assert "without probe coverage" in caplog.text


def test_full_buffer_rejects_append():
    c = MixedCache(D, CacheConfig(recompress_interval=2))
    append_decode(c, np.zeros(D), np.zeros(D))
    append_decode(c, np.zeros(D), np.zeros(D))
    with pytest.raises(RuntimeError):
        append_decode(c, np.zeros(D), np.zeros(D))


def run_windows(cfg, K, V, rows):
    c = MixedCache(D, cfg)
    for i in range(len(K)):
        append_decode(c, K[i], V[i])
        if rows[i] is not None:
            record_probe_row(c, rows[i], c.window_count)
        maybe_recompress(c)
    return c


def test_windows_are_independent():
    W = 10
    cfg = CacheConfig(4, 2, 0.4, W, ProbeConfig("all"))
    K, V = kv(13, 2 * W)
    rng = np.random.default_rng(0)
    rows = []
    for i in range(2 * W):
        a = rng.random(i + 1)
        rows.append(a / a.sum())
    c = run_windows(cfg, K, V, rows)
    # oracle: each window partitioned from its own probe rows, quantized on its own
    expect = []
    for w in range(2):
        lo, hi = w * W, (w + 1) * W
        R = np.zeros((W, hi))
        for j, i in enumerate(range(lo, hi)):
            R[j, :i + 1] = rows[i]
        sv = normalized_scores(AttnMatrix(R, np.arange(lo, hi))).subset(lo, hi)
        part = select_salient(sv, 0.4)
        pos = np.arange(lo, hi)
        for idx, bits, sal in ((part.salient_idx, 4, True), (part.regular_idx, 2, False)):
            expect.append(quantize_kv(K[lo:hi][idx], V[lo:hi][idx], pos[idx], bits, sal))
    assert len(c.segments) == len(expect)
    for s, e in zip(c.segments, expect):
        assert np.array_equal(s.positions, e.positions) and s.bits == e.bits
        assert s.K.to_bytes() == e.K.to_bytes() and s.V.to_bytes() == e.V.to_bytes()


# -- materialize ------------------------------------------------------------

def test_materialize_empty():
    Kh, Vh = materialize(MixedCache(D, CacheConfig()))
    assert Kh.shape == (0, D) and Vh.shape == (0, D)


def test_lattice_exact_8bit():
    rng = np.random.default_rng(14)
    K = rng.integers(0, 2, (30, D)).astype(float)
    V = rng.integers(0, 2, (30, D)).astype(float)
    c = compress_prefill(K, V, split(30), CacheConfig(8, 8, 0.5))
    Kh, Vh = materialize(c)
    assert np.array_equal(Kh, K) and np.array_equal(Vh, V)


def test_materialize_follows_token_order():
    cfg = CacheConfig(4, 2, 0.5, recompress_interval=7, probe=ProbeConfig("all"))
    K, V = kv(15, 12)
    c = compress_prefill(K, V, split(12, 0.5, 1), cfg)
    k, v = kv(16, 10)
    for i in range(10):
        append_decode(c, k[i], v[i])
        a = np.full(c.total_tokens, 1 / c.total_tokens)
        record_probe_row(c, a, c.window_count)
        maybe_recompress(c)
    Kh, Vh = materialize(c)
    order = c.token_order()
    for pos, (si, row) in enumerate(order):
        if si < 0:
            assert np.array_equal(Kh[pos], c.fp_K[row])
        else:
            seg_k, seg_v = c.segments[si].dequantize()
            assert np.array_equal(Kh[pos], seg_k[row]) and np.array_equal(Vh[pos], seg_v[row])


# -- accounting -------------------------------------------------------------

APP_A = (8, 1, 4096, 4096)


@pytest.mark.parametrize("scheme,expected", [(Scheme("groupwise", 4, 32), 3.200),
                                             (Scheme("tokenwise", 4), 3.992),
                                             (Scheme("channel-cst", 4), 3.995)])
def test_golden_uniform_ratios(scheme, expected):
    assert round(compression_report(APP_A, scheme).ratio, 3) == expected


def test_fp16_and_unknown():
    assert compression_report((1, 1, 5, 4), "fp16").ratio == 1.0
    with pytest.raises(ValueError):
        compression_report((1, 1, 5, 4), "lz4")


def test_mixed_monotone_in_k_low():
    dims = (8, 1, 840, 4096)
    r4 = compression_report(dims, Scheme("mixed", k_high=4, k_low=4)).ratio
    r2 = compression_report(dims, Scheme("mixed", k_high=4, k_low=2)).ratio
    assert r2 > r4


def test_live_report_matches_closed_form():
    K, V = kv(17, 40, 16)
    part = select_salient(normalized_scores(AttnMatrix(np.tril(np.ones((40, 40))) / np.arange(1, 41)[:, None],
                                                       np.arange(40))), 0.6)
    rep = compress_prefill(K, V, part, CacheConfig(4, 2, 0.6)).report()
    closed = compression_report((1, 1, 40, 16), Scheme("mixed", k_high=4, k_low=2, saliency_ratio=0.6))
    assert rep.to_dict() == closed.to_dict()


def test_report_dict_fields():
    d = compression_report(APP_A, "tokenwise").to_dict()
    assert list(d) == ["data_bits", "param_bits", "bitmap_bits", "fp_buffer_bits", "ratio"]


# -- streaming property -----------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 30), st.floats(0.1, 1.0))
def test_conservation_under_interleaving(seed, l0, ratio):
    rng = np.random.default_rng(seed)
    cfg = CacheConfig(4, 2, ratio, recompress_interval=10, probe=ProbeConfig("hybrid", 0.2, 0.3))
    K, V = rng.standard_normal((2, l0, 4))
    c = compress_prefill(K, V, all_salient(l0), cfg, seed=seed)
    ingested = l0
    for step in range(60):
        append_decode(c, *rng.standard_normal((2, 4)))
        ingested += 1
        if rng.random() < 0.7:
            a = rng.random(c.total_tokens)
            record_probe_row(c, a / a.sum(), c.window_count)
        maybe_recompress(c)
        assert counts(c) == ingested
        assert c.window_count <= 10
        if (step + 1) % 10 == 0:
            assert c.window_count == 0
