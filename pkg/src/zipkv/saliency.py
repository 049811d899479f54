"""Token saliency metrics, probe-token selection and salient/regular partitioning."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import ORDINARY, AttnMatrix
from .quantizers import round_half_away

ACCUMULATED = "accumulated"
NORMALIZED = "normalized"

STRATEGIES = ("all", "random", "special", "recent", "hybrid")


class NoProbeTokensWarning(UserWarning):
    """The probe strategy selected no tokens at all."""


@dataclass
class SaliencyVector:
    scores: np.ndarray
    metric: str
    probe_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.valid_mask is None:
            self.valid_mask = np.ones(self.scores.size, dtype=bool)

    def __len__(self):
        return int(self.scores.size)

    def subset(self, lo: int, hi: int) -> "SaliencyVector":
        return SaliencyVector(self.scores[lo:hi], self.metric, self.probe_rows, self.valid_mask[lo:hi])


@dataclass(frozen=True)
class ProbeConfig:
    strategy: str = "hybrid"
    recent_fraction: float = 0.05
    random_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown probe strategy {self.strategy!r}; choose from {STRATEGIES}")
        for name in ("recent_fraction", "random_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.recent_fraction + self.random_fraction > 1.0 + 1e-12:
            raise ValueError("recent_fraction + random_fraction must not exceed 1")


@dataclass
class Partition:
    salient_idx: np.ndarray
    regular_idx: np.ndarray
    saliency_ratio: float

    @property
    def l(self) -> int:
        return int(self.salient_idx.size + self.regular_idx.size)

    def is_salient(self) -> np.ndarray:
        mask = np.zeros(self.l, dtype=bool)
        mask[self.salient_idx] = True
        return mask


def _coverage(A: AttnMatrix) -> np.ndarray:
    """Per column, how many available rows sit at or below the diagonal."""
    cols = np.arange(A.l)
    return (A.row_index[None, :] >= cols[:, None]).sum(axis=1)


def accumulated_scores(A: AttnMatrix) -> SaliencyVector:
    """Column sums over the available rows (the heavy-hitter metric)."""
    cover = _coverage(A)
    return SaliencyVector(A.rows.sum(axis=0), ACCUMULATED, A.row_index.copy(), cover > 0)


def normalized_scores(A: AttnMatrix) -> SaliencyVector:
    """Column sums divided by the number of rows that can attend to the column.

    Under causal masking column ``i`` is structurally non-zero only in rows
    ``>= i``; with probe rows only, the divisor counts the probe rows at or
    after ``i``. Columns no available row can see are marked invalid.
    """
    cover = _coverage(A)
    sums = A.rows.sum(axis=0)
    valid = cover > 0
    scores = np.zeros(A.l)
    scores[valid] = sums[valid] / cover[valid]
    return SaliencyVector(scores, NORMALIZED, A.row_index.copy(), valid)


def fraction_count(fraction: float, l: int) -> int:
    """ceil(fraction * l), guarded against float noise (0.05 * 100 is 5.000000000000001)."""
    if fraction <= 0:
        return 0
    return min(l, max(1, math.ceil(round(fraction * l, 9))))


def select_probes(cfg: ProbeConfig, l: int, token_classes=None) -> np.ndarray:
    if l < 1:
        raise ValueError("need at least one token")
    rng = np.random.default_rng(cfg.seed)
    if cfg.strategy == "all":
        return np.arange(l)
    if cfg.strategy == "special":
        classes = np.zeros(l, np.uint8) if token_classes is None else np.asarray(token_classes)[:l]
        idx = np.flatnonzero(classes != ORDINARY)
        if idx.size == 0:
            warnings.warn("no special or punctuation tokens to probe with", NoProbeTokensWarning, stacklevel=2)
        return idx.astype(np.int64)

    n_recent = fraction_count(cfg.recent_fraction, l) if cfg.strategy in ("recent", "hybrid") else 0
    n_random = fraction_count(cfg.random_fraction, l) if cfg.strategy in ("random", "hybrid") else 0
    recent = np.arange(l - n_recent, l)
    pool = np.arange(l - n_recent)
    n_random = min(n_random, pool.size)
    drawn = rng.choice(pool, size=n_random, replace=False) if n_random else np.zeros(0, np.int64)
    idx = np.union1d(recent, drawn).astype(np.int64)
    if idx.size == 0:
        warnings.warn("probe strategy selected no tokens", NoProbeTokensWarning, stacklevel=2)
    return idx


def salient_count(ratio: float, l: int) -> int:
    return int(round_half_away(ratio * l))


def select_salient(scores: SaliencyVector, ratio: float) -> Partition:
    """Top ``round(ratio * l)`` tokens by score.

    Ties go to the more recent token. Invalid (uncovered) tokens never enter
    the salient set, so it can come out smaller than requested.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"saliency ratio must lie in (0, 1], got {ratio}")
    if not scores.valid_mask.any():
        raise ValueError("no valid saliency scores to partition on")
    salient = top_tokens(scores, salient_count(ratio, len(scores)))
    regular = np.setdiff1d(np.arange(len(scores)), salient)
    return Partition(salient, regular, ratio)


def top_tokens(scores: SaliencyVector, n: int) -> np.ndarray:
    """Sorted indices of the ``n`` best valid tokens (ties toward higher index)."""
    valid = scores.valid_mask
    pos = np.arange(len(scores))
    # lexsort: last key is primary
    order = np.lexsort((-pos, -scores.scores, ~valid))
    n = min(n, int(valid.sum()))
    return np.sort(order[:n])


def topk_overlap(selected, reference) -> float:
    """Fraction of ``reference`` indices that also appear in ``selected``."""
    reference = np.asarray(reference)
    if reference.size == 0:
        return 1.0
    return float(np.isin(reference, selected).sum() / reference.size)
