import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zipkv.attention import attention_full, probe_attention
from zipkv.core import AttnMatrix
from zipkv.saliency import (NoProbeTokensWarning, ProbeConfig, SaliencyVector, accumulated_scores,
                            normalized_scores, select_probes, select_salient)

UNIFORM3 = AttnMatrix(np.array([[1, 0, 0], [0.5, 0.5, 0], [1 / 3, 1 / 3, 1 / 3]]), np.arange(3))
FLIP = AttnMatrix(np.array([[1.0, 0.0], [0.2, 0.8]]), np.arange(2))


def random_causal(rng, l):
    logits = rng.standard_normal((l, l)) * rng.uniform(0.1, 4)
    logits[np.triu_indices(l, 1)] = -np.inf
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    return AttnMatrix(p / p.sum(axis=1, keepdims=True), np.arange(l))


def test_accumulated_examples():
    np.testing.assert_allclose(accumulated_scores(UNIFORM3).scores, [11 / 6, 5 / 6, 1 / 3])
    assert accumulated_scores(AttnMatrix(np.ones((1, 1)), np.arange(1))).scores.tolist() == [1.0]
    np.testing.assert_allclose(accumulated_scores(FLIP).scores, [1.2, 0.8])


def test_normalized_examples():
    sv = normalized_scores(UNIFORM3)
    np.testing.assert_allclose(sv.scores, [11 / 18, 5 / 12, 1 / 3])
    np.testing.assert_allclose(normalized_scores(FLIP).scores, [0.6, 0.8])


def test_two_token_ranking_flip():
    acc = select_salient(accumulated_scores(FLIP), 0.5).salient_idx
    norm = select_salient(normalized_scores(FLIP), 0.5).salient_idx
    assert acc.tolist() == [0] and norm.tolist() == [1]


def test_probe_rows_denominator():
    # rows 1 and 3 of a 4-token matrix: column 2 is covered by row 3 only
    A = AttnMatrix(np.array([[0.5, 0.5, 0, 0], [0.1, 0.2, 0.3, 0.4]]), np.array([1, 3]))
    sv = normalized_scores(A)
    np.testing.assert_allclose(sv.scores, [0.3, 0.35, 0.3, 0.4])
    assert sv.valid_mask.all()


def test_uncovered_tokens_invalid():
    A = AttnMatrix(np.array([[0.6, 0.4, 0, 0]]), np.array([1]))
    sv = normalized_scores(A)
    assert sv.valid_mask.tolist() == [True, True, False, False]
    assert sv.scores[2:].tolist() == [0, 0]
    part = select_salient(sv, 1.0)
    assert part.salient_idx.tolist() == [0, 1] and part.regular_idx.tolist() == [2, 3]


def test_probe_all_rows_equals_full():
    rng = np.random.default_rng(0)
    Q, K, V = rng.standard_normal((3, 20, 8))
    _, A = attention_full(Q, K, V)
    full = normalized_scores(A)
    probed = normalized_scores(probe_attention(Q, select_probes(ProbeConfig("all"), 20), K))
    assert np.array_equal(full.scores, probed.scores)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31))
def test_accumulated_bias_and_normalized_range(l, seed):
    A = random_causal(np.random.default_rng(seed), l)
    p = accumulated_scores(A).scores
    assert p[0] >= 1 - 1e-12 and p[-1] <= 1 + 1e-12
    if A.rows[-1, -1] < 1 - 1e-9:
        assert p[0] > p[-1]
    q = normalized_scores(A)
    assert np.all(q.scores >= 0) and np.all(q.scores <= 1 + 1e-12)
    base = select_salient(q, 0.3).salient_idx
    scaled = SaliencyVector(q.scores * 7.5, q.metric, q.probe_rows, q.valid_mask)
    assert np.array_equal(select_salient(scaled, 0.3).salient_idx, base)


def test_hybrid_probes_l100():
    for seed in range(5):
        idx = select_probes(ProbeConfig("hybrid", 0.05, 0.05, seed), 100)
        assert idx.size == 10
        assert set(range(95, 100)) <= set(idx.tolist())
        rand = idx[idx < 95]
        assert rand.size == 5
        assert np.array_equal(idx, np.unique(idx))
    a = select_probes(ProbeConfig("hybrid", 0.05, 0.05, 3), 100)
    assert np.array_equal(a, select_probes(ProbeConfig("hybrid", 0.05, 0.05, 3), 100))


def test_probe_strategies():
    assert select_probes(ProbeConfig("all"), 7).tolist() == list(range(7))
    assert select_probes(ProbeConfig("recent", 0.1, 0.0), 50).tolist() == list(range(45, 50))
    r = select_probes(ProbeConfig("random", 0.0, 0.1, 1), 50)
    assert r.size == 5
    classes = np.array([1, 0, 0, 2, 0, 2])
    assert select_probes(ProbeConfig("special"), 6, classes).tolist() == [0, 3, 5]
    # a positive fraction always yields at least one token
    assert select_probes(ProbeConfig("recent", 0.01, 0.0), 10).tolist() == [9]


def test_special_without_special_tokens_warns():
    with pytest.warns(NoProbeTokensWarning):
        idx = select_probes(ProbeConfig("special"), 8, np.zeros(8, np.uint8))
    assert idx.size == 0


def test_probe_config_validation():
    with pytest.raises(ValueError):
        ProbeConfig("best")
    with pytest.raises(ValueError):
        ProbeConfig("hybrid", 0.7, 0.7)


def test_select_salient_examples():
    sv = SaliencyVector(np.array([0.6, 0.8, 0.1, 0.3]), "normalized")
    assert select_salient(sv, 0.5).salient_idx.tolist() == [0, 1]
    eq = SaliencyVector(np.ones(4), "normalized")
    part = select_salient(eq, 0.5)
    assert part.salient_idx.tolist() == [2, 3] and part.regular_idx.tolist() == [0, 1]
    full = select_salient(sv, 1.0)
    assert full.salient_idx.tolist() == [0, 1, 2, 3] and full.regular_idx.size == 0


def test_select_salient_errors_and_rounding():
    sv = SaliencyVector(np.arange(5.0), "normalized")
    # 0.5 * 5 = 2.5 rounds away from zero
    assert select_salient(sv, 0.5).salient_idx.size == 3
    with pytest.raises(ValueError):
        select_salient(sv, 0.0)
    with pytest.raises(ValueError):
        select_salient(SaliencyVector(np.zeros(3), "normalized", valid_mask=np.zeros(3, bool)), 0.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.floats(0.01, 1.0), st.integers(0, 2**31))
def test_partition_invariants(l, ratio, seed):
    sv = SaliencyVector(np.random.default_rng(seed).random(l), "normalized")
    part = select_salient(sv, ratio)
    assert np.intersect1d(part.salient_idx, part.regular_idx).size == 0
    assert np.array_equal(np.union1d(part.salient_idx, part.regular_idx), np.arange(l))
    assert part.salient_idx.size == int(np.floor(ratio * l + 0.5))
