"""Binary code representation and the dynamic sign binarizer.

The plain sign function thresholds at zero (zero itself maps to -1). The
dynamic variant opens an interval [-t, t] and jointly assigns every value
inside it to the minority sign among the values outside, which nudges each
code toward an equal count of +1 and -1 bits.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from cshash import fileio
from cshash.errors import ValidationError

DEFAULT_T_UPPER_BOUND = 0.005
DEFAULT_SURROGATE_TAU = 0.001

# Keep the logistic output strictly inside (0, 1) so a learned threshold never
# collapses onto 0 or its upper bound exactly.
_LOGISTIC_CLAMP = 1e-12


@dataclass(frozen=True)
class DsfParams:
    """Parameters of the learned-threshold binarizer."""

    threshold_t: float = 0.0
    t_upper_bound: float = DEFAULT_T_UPPER_BOUND
    head_weights: np.ndarray | None = None  # maps a feature vector to a raw scalar
    temperature_tau: float = DEFAULT_SURROGATE_TAU

    def __post_init__(self):
        if not 0.0 <= self.threshold_t <= self.t_upper_bound:
            raise ValidationError(
                f"threshold_t must lie in [0, {self.t_upper_bound}], "
                f"got {self.threshold_t}"
            )
        if self.temperature_tau <= 0.0:
            raise ValidationError("temperature_tau must be > 0")
        if self.head_weights is not None:
            head = np.asarray(self.head_weights, dtype=np.float64)
            if head.ndim != 1:
                raise ValidationError("head_weights must be a 1-D vector")
            object.__setattr__(self, "head_weights", head)


@dataclass(frozen=True)
class BinaryCodeMatrix:
    """N bit-packed K-bit codes, immutable after construction."""

    bits: int
    data: np.ndarray  # (count, ceil(bits/8)) uint8

    def __post_init__(self):
        data = np.array(self.data, dtype=np.uint8, order="C")
        if self.bits < 1:
            raise ValidationError(f"bits must be >= 1, got {self.bits}")
        if data.ndim != 2 or data.shape[1] != (self.bits + 7) // 8:
            raise ValidationError(
                f"packed data shape {data.shape} inconsistent with {self.bits} bits"
            )
        if self.bits % 8 and np.any(data[:, -1] & (0xFF >> (self.bits % 8))):
            raise ValidationError("nonzero padding bits past the declared width")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_signs(cls, signs: np.ndarray) -> "BinaryCodeMatrix":
        signs = np.atleast_2d(np.asarray(signs))
        return cls(bits=signs.shape[1], data=fileio.pack_sign_rows(signs))

    def to_signs(self) -> np.ndarray:
        return fileio.unpack_sign_rows(self.data, self.bits)

    def row(self, i: int) -> np.ndarray:
        return self.data[i]


def sign_plain(v: np.ndarray) -> np.ndarray:
    """Elementwise sign with the zero input mapped to -1."""
    return np.where(np.asarray(v, dtype=np.float64) > 0, 1, -1).astype(np.int8)


def dynamic_fill_value(v: np.ndarray, t: float) -> int:
    """Joint value for entries inside [-t, t]: -1 when strictly more entries
    sit above t than below -t, else +1 (ties and the empty case included)."""
    v = np.asarray(v, dtype=np.float64)
    n_pos = int(np.count_nonzero(v > t))
    n_neg = int(np.count_nonzero(v < -t))
    return -1 if n_pos > n_neg else 1


def sign_dynamic(v: np.ndarray, t: float) -> np.ndarray:
    """Sign with a dead zone: entries in [-t, t] all take the minority sign
    of the entries outside the interval."""
    if t < 0:
        raise ValidationError(f"threshold must be >= 0, got {t}")
    v = np.asarray(v, dtype=np.float64)
    out = np.full(v.shape, dynamic_fill_value(v, t), dtype=np.int8)
    out[v > t] = 1
    out[v < -t] = -1
    return out


def stable_logistic(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic, clamped strictly inside (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _LOGISTIC_CLAMP, 1.0 - _LOGISTIC_CLAMP)


def dsf_threshold(feature: np.ndarray, params: DsfParams) -> float:
    """Content-dependent threshold: upper_bound * logistic(head . feature).

    Stays strictly inside (0, upper_bound); a zero head gives the midpoint.
    """
    if params.head_weights is None:
        raise ValidationError("dsf_threshold requires head_weights")
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != params.head_weights.shape:
        raise ValidationError(
            f"feature dim {feature.shape} != head dim {params.head_weights.shape}"
        )
    return float(params.t_upper_bound * stable_logistic(params.head_weights @ feature))


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    """Differing-bit count between two packed codes via XOR + popcount."""
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape != b.shape:
        raise ValidationError(f"bit width mismatch: {a.shape} vs {b.shape}")
    return int(np.bitwise_count(a ^ b).sum())


def hamming_to_all(query: np.ndarray, packed_rows: np.ndarray) -> np.ndarray:
    """Hamming distance from one packed code to every packed row.

    Rows whose byte width is a multiple of 8 are popcounted as uint64 words,
    which keeps a single query over a million 64-bit codes in the
    milliseconds.
    """
    query = np.ascontiguousarray(query, dtype=np.uint8)
    packed_rows = np.asarray(packed_rows, dtype=np.uint8)
    if packed_rows.ndim != 2 or query.shape != (packed_rows.shape[1],):
        raise ValidationError(
            f"bit width mismatch: query {query.shape} vs rows {packed_rows.shape}"
        )
    row_bytes = packed_rows.shape[1]
    if row_bytes % 8 == 0 and packed_rows.flags.c_contiguous:
        words = row_bytes // 8
        rows64 = packed_rows.view(np.uint64)
        query64 = query.view(np.uint64)
        counts = np.bitwise_count(rows64 ^ query64[None, :])
        if words == 1:
            return counts[:, 0].astype(np.uint32)
        return counts.sum(axis=1, dtype=np.uint32)
    return np.bitwise_count(packed_rows ^ query[None, :]).sum(axis=1, dtype=np.uint32)


@dataclass(frozen=True)
class BalanceReport:
    per_code: np.ndarray  # |#(+1) - #(-1)| per code
    mean: float
    max: int


def balance_stats(codes: BinaryCodeMatrix) -> BalanceReport:
    """Per-code and aggregate |#(+1) - #(-1)| imbalance."""
    ones = np.bitwise_count(codes.data).sum(axis=1, dtype=np.int64)
    imbalance = np.abs(2 * ones - codes.bits)
    return BalanceReport(
        per_code=imbalance,
        mean=float(imbalance.mean()) if codes.count else 0.0,
        max=int(imbalance.max()) if codes.count else 0,
    )


def write_codes(path: str | os.PathLike, codes: BinaryCodeMatrix) -> None:
    header = fileio.MAGIC_CODES + struct.pack(
        "<IIQ", fileio.FORMAT_VERSION, codes.bits, codes.count
    )
    fileio.atomic_write(path, header + codes.data.tobytes(order="C"))


def read_codes(path: str | os.PathLike) -> BinaryCodeMatrix:
    with open(path, "rb") as fh:
        data = fh.read()
    return read_codes_bytes(data, what=f"{os.fspath(path)} (codes)")


def read_codes_bytes(data: bytes, *, what: str = "codes") -> BinaryCodeMatrix:
    reader = fileio.Reader(data, what)
    reader.expect_magic(fileio.MAGIC_CODES)
    reader.expect_version()
    bits = reader.u32()
    count = reader.u64()
    if bits == 0:
        raise ValidationError(f"{what}: zero code width")
    row_bytes = (bits + 7) // 8
    raw = reader.take(count * row_bytes)
    reader.done()
    packed = np.frombuffer(raw, dtype=np.uint8).reshape(count, row_bytes)
    return BinaryCodeMatrix(bits=bits, data=packed)
