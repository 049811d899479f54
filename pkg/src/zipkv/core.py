"""Dense tensor containers, the binary trace format and synthetic trace generation."""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"ZKV1"
HEADER = struct.Struct("<4s6I")
HEADER_SIZE = HEADER.size  # 28 bytes

ORDINARY, SPECIAL, PUNCTUATION = 0, 1, 2

PROFILES = ("uniform", "peaked", "outlier-channel")

# Refuse headers that would describe more than 16 GiB of float payload.
MAX_PAYLOAD_BYTES = 1 << 34


class TraceFormatError(ValueError):
    """Base class for trace decoding failures; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MalformedHeaderError(TraceFormatError):
    pass


class DimensionOverflowError(TraceFormatError):
    pass


class NonFiniteError(TraceFormatError):
    pass


class TruncatedPayloadError(TraceFormatError):
    pass


class TrailingDataError(TraceFormatError):
    pass


@dataclass(frozen=True)
class Tensor4:
    """A (batch, heads, length, head_dim) block of float32 values."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 4:
            raise ValueError(f"Tensor4 needs 4 dims, got shape {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(int(x) for x in self.data.shape)  # type: ignore[return-value]

    @classmethod
    def zeros(cls, dims) -> "Tensor4":
        return cls(np.zeros(dims, dtype=np.float32))

    def head(self, b: int, h: int) -> np.ndarray:
        """The (l, d) matrix for one batch row and head."""
        return self.data[b, h]


@dataclass
class Trace:
    layers: list[tuple[Tensor4, Tensor4, Tensor4]]
    token_classes: np.ndarray  # uint8, shape (b, l)
    prefill_len: int
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a trace needs at least one layer")
        dims = self.layers[0][0].dims
        for i, qkv in enumerate(self.layers):
            for t in qkv:
                if t.dims != dims:
                    raise ValueError(f"layer {i} has dims {t.dims}, expected {dims}")
        b, _, l, _ = dims
        self.token_classes = np.ascontiguousarray(self.token_classes, dtype=np.uint8).reshape(b, l)
        if not 0 <= self.prefill_len <= l:
            raise ValueError(f"prefill_len {self.prefill_len} outside [0, {l}]")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.layers[0][0].dims

    @property
    def decode_len(self) -> int:
        return self.dims[2] - self.prefill_len

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        return to_bytes(self) == to_bytes(other)


@dataclass
class AttnMatrix:
    """A subset of rows of a causal attention matrix.

    ``rows[r]`` is the probability row for query ``row_index[r]`` over ``l``
    key columns. A full matrix simply has every row present.
    """

    rows: np.ndarray  # (r, l) float64
    row_index: np.ndarray  # (r,) int64, sorted ascending

    @property
    def l(self) -> int:
        return int(self.rows.shape[1])

    def __len__(self) -> int:
        return int(self.rows.shape[0])


def to_bytes(trace: Trace) -> bytes:
    b, h, l, d = trace.dims
    parts = [HEADER.pack(MAGIC, len(trace.layers), b, h, l, d, trace.prefill_len)]
    for qkv in trace.layers:
        for t in qkv:
            parts.append(t.data.astype("<f4", copy=False).tobytes())
    parts.append(trace.token_classes.tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> Trace:
    if len(buf) < HEADER_SIZE:
        raise MalformedHeaderError(f"header needs {HEADER_SIZE} bytes, file has {len(buf)}", len(buf))
    magic, n_layers, b, h, l, d, prefill = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}", 0)
    for name, value, off in (("layer_count", n_layers, 4), ("b", b, 8), ("h", h, 12), ("l", l, 16), ("d", d, 20)):
        if value == 0:
            raise MalformedHeaderError(f"{name} is zero", off)
    if prefill > l:
        raise MalformedHeaderError(f"prefill_len {prefill} exceeds l {l}", 24)

    n = b * h * l * d
    payload = n_layers * 3 * n * 4 + b * l
    if payload > MAX_PAYLOAD_BYTES:
        raise DimensionOverflowError(f"declared payload of {payload} bytes is too large", 4)
    if len(buf) < HEADER_SIZE + payload:
        raise TruncatedPayloadError(
            f"expected {HEADER_SIZE + payload} bytes, file has {len(buf)}", len(buf)
        )
    if len(buf) > HEADER_SIZE + payload:
        raise TrailingDataError("unexpected bytes after token classes", HEADER_SIZE + payload)

    layers = []
    off = HEADER_SIZE
    for _ in range(n_layers):
        qkv = []
        for _ in range(3):
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off)
            bad = np.flatnonzero(~np.isfinite(arr))
            if bad.size:
                raise NonFiniteError("non-finite float in payload", off + 4 * int(bad[0]))
            qkv.append(Tensor4(arr.astype(np.float32).reshape(b, h, l, d)))
            off += 4 * n
        layers.append(tuple(qkv))
    classes = np.frombuffer(buf, dtype=np.uint8, count=b * l, offset=off).copy()
    return Trace(layers=layers, token_classes=classes.reshape(b, l), prefill_len=prefill)


def load_trace(path) -> Trace:
    with open(path, "rb") as f:
        return from_bytes(f.read())


def save_trace(trace: Trace, path) -> None:
    data = to_bytes(trace)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def trace_digest(trace: Trace) -> str:
    return hashlib.sha256(to_bytes(trace)).hexdigest()


# --------------------------------------------------------------------------
# synthetic traces
# --------------------------------------------------------------------------

OUTLIER_FACTOR = 100.0


def peaked_hot_positions(seed: int, l: int) -> np.ndarray:
    """Key positions that the ``peaked`` profile concentrates attention on."""
    rng = np.random.default_rng([seed, 0x9E37])
    n_hot = max(1, l // 20)
    return np.sort(rng.choice(l, size=n_hot, replace=False))


def outlier_channels(seed: int, d: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x51ED])
    n_out = max(1, d // 16)
    return np.sort(rng.choice(d, size=n_out, replace=False))


def synth_trace(seed: int, dims, profile: str = "uniform", prefill_len: int | None = None,
                n_layers: int = 1) -> Trace:
    """Deterministic synthetic trace.

    ``peaked`` aligns a few seeded key rows with a shared direction that every
    query also points along, so those keys soak up most of the attention mass.
    ``outlier-channel`` multiplies a few seeded K/V channels by ``OUTLIER_FACTOR``.
    """
    dims = tuple(int(x) for x in dims)
    if len(dims) != 4:
        raise ValueError(f"dims must be (b, h, l, d), got {dims}")
    if min(dims) < 1:
        raise ValueError(f"all dims must be >= 1, got {dims}")
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; choose from {PROFILES}")
    b, h, l, d = dims
    if prefill_len is None:
        prefill_len = max(1, l - l // 4)

    rng = np.random.default_rng(seed)
    hot = peaked_hot_positions(seed, l)
    outl = outlier_channels(seed, d)
    layers = []
    for _ in range(n_layers):
        q = rng.standard_normal(dims)
        k = rng.standard_normal(dims)
        v = rng.standard_normal(dims)
        if profile == "peaked":
            u = rng.standard_normal((b, h, 1, d))
            u /= np.linalg.norm(u, axis=-1, keepdims=True)
            # logit of a hot key is about 3 * 3 * sqrt(d) / sqrt(d) = 9
            q = 0.5 * q + 3.0 * np.sqrt(np.sqrt(d)) * u
            k[:, :, hot, :] += 3.0 * np.sqrt(np.sqrt(d)) * u
        elif profile == "outlier-channel":
            k[..., outl] *= OUTLIER_FACTOR
            v[..., outl] *= OUTLIER_FACTOR
        layers.append(tuple(Tensor4(x.astype(np.float32)) for x in (q, k, v)))

    classes = np.zeros((b, l), dtype=np.uint8)
    marks = rng.random((b, l))
    classes[marks < 0.08] = PUNCTUATION
    classes[:, 0] = SPECIAL
    return Trace(layers=layers, token_classes=classes, prefill_len=prefill_len,
                 meta={"seed": seed, "profile": profile})
