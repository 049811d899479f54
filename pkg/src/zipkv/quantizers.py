"""Uniform asymmetric quantization and the KV-cache granularities built on it.

Every quantizer here works on 2-D ``(tokens, channels)`` matrices. Codes are
kept bit-packed; scales are float64 and zero points int32, one per
quantization group. The snapshot wire format narrows scales to float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

BIT_WIDTHS = (2, 4, 8)

TOKENWISE = "tokenwise"
CHANNELWISE = "channelwise"
GROUPWISE = "groupwise"
CST = "channel-separable-tokenwise"

_TAGS = {TOKENWISE: 0, CHANNELWISE: 1, GROUPWISE: 2, CST: 3}
_TAG_NAMES = {v: k for k, v in _TAGS.items()}


def round_half_away(x):
    """Round to nearest integer, ties away from zero (numpy rounds ties to even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_bits(k: int) -> None:
    if k not in BIT_WIDTHS:
        raise ValueError(f"bit width must be one of {BIT_WIDTHS}, got {k}")


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1


def _params_for(lo, hi, k):
    """Vectorised scale / zero-point computation over group minima and maxima."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    qmax = (1 << k) - 1
    const = hi <= lo
    scale = np.where(const, 1.0, (hi - lo) / qmax)
    zero = np.where(const, -round_half_away(lo), -round_half_away(lo / scale))
    return scale, zero.astype(np.int64)


def _codes(x, scale, zero, k):
    q = round_half_away(x / scale) + zero
    return np.clip(q, 0, (1 << k) - 1).astype(np.uint8)


def quantize_uniform(x, k: int) -> tuple[np.ndarray, QuantParams]:
    """Quantize one vector to ``k``-bit codes with a single scale / zero point.

    A constant vector has no range to divide; it gets ``scale = 1`` and
    ``zero_point = -round(value)`` so integral constants reconstruct exactly.
    """
    _check_bits(k)
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("cannot quantize an empty vector")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    scale, zero = _params_for(x.min(), x.max(), k)
    codes = _codes(x, scale, zero, k)
    return codes, QuantParams(float(scale), int(zero), k)


def dequantize(codes, params: QuantParams) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.size and (codes.min() < 0 or codes.max() > params.qmax):
        raise ValueError(f"codes outside [0, {params.qmax}]")
    return (codes.astype(np.float64) - params.zero_point) * params.scale


# --------------------------------------------------------------------------
# bit packing
# --------------------------------------------------------------------------

def pack_codes(codes, k: int) -> bytes:
    """Pack codes little-endian within each byte: code j sits at bit ``(j % (8/k)) * k``."""
    _check_bits(k)
    codes = np.asarray(codes, dtype=np.uint8).ravel()
    per = 8 // k
    pad = (-codes.size) % per
    if pad:
        codes = np.concatenate([codes, np.zeros(pad, dtype=np.uint8)])
    lanes = codes.reshape(-1, per).astype(np.uint16)
    shifts = np.arange(per, dtype=np.uint16) * k
    return (lanes << shifts).sum(axis=1).astype(np.uint8).tobytes()


def unpack_codes(packed: bytes, k: int, count: int) -> np.ndarray:
    _check_bits(k)
    raw = np.frombuffer(packed, dtype=np.uint8)
    per = 8 // k
    shifts = np.arange(per, dtype=np.uint8) * k
    mask = np.uint8((1 << k) - 1)
    out = ((raw[:, None] >> shifts) & mask).ravel()
    return out[:count].copy()


# --------------------------------------------------------------------------
# blocks
# --------------------------------------------------------------------------

@dataclass
class QuantizedBlock:
    """Quantized ``(tokens, channels)`` matrix.

    Group layout per granularity:
      tokenwise / CST  one group per row
      channelwise      one group per column
      groupwise(n)     row-major runs of ``n`` channels inside each row
    """

    packed: bytes
    granularity: str
    bits: int
    shape: tuple[int, int]
    scales: np.ndarray  # float64, one per group
    zero_points: np.ndarray  # int32, one per group
    group_size: int = 0
    channel_scales: np.ndarray | None = None  # float64, CST only

    @property
    def n_groups(self) -> int:
        return int(self.scales.size)

    @property
    def codes(self) -> np.ndarray:
        rows, cols = self.shape
        return unpack_codes(self.packed, self.bits, rows * cols).reshape(rows, cols)

    def params(self, g: int) -> QuantParams:
        return QuantParams(float(self.scales[g]), int(self.zero_points[g]), self.bits)

    def n_params(self) -> int:
        """Stored full-precision parameters: (scale, zero point) per group plus channel scales."""
        n = 2 * self.n_groups
        if self.channel_scales is not None:
            n += int(self.channel_scales.size)
        return n

    def to_bytes(self) -> bytes:
        rows, cols = self.shape
        c = self.channel_scales
        parts = [
            struct.pack("<BBIII", _TAGS[self.granularity], self.bits, self.group_size, rows, cols),
            struct.pack("<I", len(self.packed)),
            self.packed,
            struct.pack("<I", self.n_groups),
        ]
        params = np.empty(self.n_groups, dtype=[("s", "<f4"), ("z", "<i4")])
        params["s"] = self.scales
        params["z"] = self.zero_points
        parts.append(params.tobytes())
        parts.append(struct.pack("<I", 0 if c is None else c.size))
        if c is not None:
            parts.append(c.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "QuantizedBlock":
        tag, bits, n, rows, cols = struct.unpack_from("<BBIII", buf, 0)
        off = struct.calcsize("<BBIII")
        (n_packed,) = struct.unpack_from("<I", buf, off)
        off += 4
        packed = bytes(buf[off:off + n_packed])
        off += n_packed
        (n_groups,) = struct.unpack_from("<I", buf, off)
        off += 4
        params = np.frombuffer(buf, dtype=[("s", "<f4"), ("z", "<i4")], count=n_groups, offset=off)
        off += 8 * n_groups
        (n_c,) = struct.unpack_from("<I", buf, off)
        off += 4
        c = np.frombuffer(buf, dtype="<f4", count=n_c, offset=off).astype(np.float64) if n_c else None
        return cls(packed=packed, granularity=_TAG_NAMES[tag], bits=bits, shape=(rows, cols),
                   scales=params["s"].astype(np.float64), zero_points=params["z"].astype(np.int32),
                   group_size=n, channel_scales=c)


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D (tokens, channels) matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains non-finite values")
    return X


def _quantize_rows(R: np.ndarray, k: int):
    """Quantize each row of ``R`` as its own group."""
    if R.size == 0:
        return np.zeros(R.shape, np.uint8), np.zeros(R.shape[0]), np.zeros(R.shape[0], np.int64)
    scale, zero = _params_for(R.min(axis=1), R.max(axis=1), k)
    codes = _codes(R, scale[:, None], zero[:, None], k)
    return codes, scale, zero


def quantize_matrix(X, granularity: str, k: int, group_size: int | None = None) -> QuantizedBlock:
    _check_bits(k)
    X = _as_matrix(X)
    rows, cols = X.shape
    if granularity == TOKENWISE:
        codes, scale, zero = _quantize_rows(X, k)
        n = 0
    elif granularity == CHANNELWISE:
        codes_t, scale, zero = _quantize_rows(X.T, k)
        codes = codes_t.T
        n = 0
    elif granularity == GROUPWISE:
        n = group_size or 0
        if n < 1 or cols % n:
            raise ValueError(f"group size {group_size} does not divide channel count {cols}")
        codes, scale, zero = _quantize_rows(X.reshape(-1, n), k)
        codes = codes.reshape(rows, cols)
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    return QuantizedBlock(pack_codes(codes, k), granularity, k, (rows, cols),
                          scale, zero.astype(np.int32), n)


def channel_scales(X) -> np.ndarray:
    """sqrt of each column's largest magnitude; 1 for all-zero columns."""
    X = np.asarray(X, dtype=np.float64)
    peak = np.abs(X).max(axis=0) if X.shape[0] else np.zeros(X.shape[1])
    c = np.sqrt(peak)
    c[peak == 0] = 1.0
    return c


def cst_quantize(X, k: int) -> QuantizedBlock:
    """Channel-separable tokenwise quantization.

    Columns are divided by ``channel_scales`` before per-row quantization, so
    a handful of large channels no longer sets every row's step size.
    """
    _check_bits(k)
    X = _as_matrix(X)
    c = channel_scales(X)
    codes, scale, zero = _quantize_rows(X / c, k)
    return QuantizedBlock(pack_codes(codes, k), CST, k, X.shape, scale, zero.astype(np.int32), 0, c)


def dequantize_block(block: QuantizedBlock) -> np.ndarray:
    rows, cols = block.shape
    codes = block.codes.astype(np.float64)
    s = block.scales.astype(np.float64)
    z = block.zero_points.astype(np.float64)
    if block.granularity in (TOKENWISE, CST):
        out = (codes - z[:, None]) * s[:, None]
    elif block.granularity == CHANNELWISE:
        out = (codes - z[None, :]) * s[None, :]
    elif block.granularity == GROUPWISE:
        g = codes.reshape(-1, block.group_size)
        out = ((g - z[:, None]) * s[:, None]).reshape(rows, cols)
    else:
        raise ValueError(f"unknown granularity {block.granularity!r}")
    if block.granularity == CST:
        out = out * block.channel_scales.astype(np.float64)[None, :]
    return out


# --------------------------------------------------------------------------
# parameter budgets
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamBudget:
    scheme: str
    count: int


# K + V pair, counted as in the granularity comparison: channel parameters
# are shared across the batch.
_BUDGETS = {
    "groupwise": lambda b, h, l, d, n: 4 * b * h * l * d // n,
    "tokenwise": lambda b, h, l, d, n: 4 * b * l,
    "channel-tokenwise": lambda b, h, l, d, n: 2 * h * d + 2 * b * l,
    "channel-cst": lambda b, h, l, d, n: 3 * h * d + 2 * b * l,
}
SCHEME_ALIASES = {"baseline": "channel-cst", "zipcache-baseline": "channel-cst"}


def param_budget(scheme: str, dims, n: int | None = None) -> ParamBudget:
    scheme = SCHEME_ALIASES.get(scheme, scheme)
    if scheme not in _BUDGETS:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {sorted(_BUDGETS)}")
    b, h, l, d = (int(x) for x in dims)
    if min(b, h, l, d) < 1:
        raise ValueError(f"dims must be positive, got {dims}")
    if scheme == "groupwise":
        if not n or n < 1:
            raise ValueError("groupwise needs a positive group size n")
        if (b * h * l * d) % n:
            raise ValueError(f"group size {n} does not divide b*h*l*d")
    return ParamBudget(scheme, _BUDGETS[scheme](b, h, l, d, n))
