"""Hash-center construction from Sylvester Hadamard matrices.

Class c is assigned a fixed target code over {-1,+1}. For up to K classes the
codes are Hadamard rows (pairwise Hamming distance exactly K/2); for up to 2K
classes the negated rows are appended; beyond that, codes are rejection-sampled
under a minimum-distance constraint of K/4 to every accepted row.
"""

from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from cshash import fileio
from cshash.errors import ResamplingError, ValidationError

RESAMPLE_BUDGET = 10_000


class CenterSource(enum.Enum):
    HADAMARD_ROW = "hadamard_row"
    NEGATED_HADAMARD_ROW = "negated_hadamard_row"
    SAMPLED = "sampled"


@dataclass(frozen=True)
class ProblemConfig:
    n_samples: int
    n_classes: int
    input_dim: int
    code_bits: int

    def __post_init__(self):
        for name in ("n_samples", "n_classes", "input_dim", "code_bits"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass(frozen=True)
class HashCenterSet:
    """C target codes of K bits each, with per-row provenance."""

    bits: int
    classes: int
    rows: np.ndarray  # (classes, bits) int8 over {-1,+1}
    sources: tuple[CenterSource, ...]

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.int8)
        if rows.shape != (self.classes, self.bits):
            raise ValidationError(
                f"rows shape {rows.shape} != ({self.classes}, {self.bits})"
            )
        if not np.all(np.abs(rows) == 1):
            raise ValidationError("center entries must be exactly -1 or +1")
        if len(self.sources) != self.classes:
            raise ValidationError("one source tag required per row")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    def unit_rows(self) -> np.ndarray:
        """Rows scaled to unit L2 norm (divide by sqrt(K))."""
        return self.rows.astype(np.float64) / np.sqrt(self.bits)


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def hadamard(order: int) -> np.ndarray:
    """Sylvester Hadamard matrix of the given power-of-two order (>= 2).

    Row 0 is all ones and any two distinct rows have dot product zero.
    """
    if order < 2 or not is_power_of_two(order):
        raise ValidationError(f"Hadamard order must be a power of two >= 2, got {order}")
    h = np.array([[1]], dtype=np.int8)
    while h.shape[0] < order:
        h = np.block([[h, h], [h, -h]])
    return h.astype(np.int8)


def hamming_between_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamming distances between sign rows: d = (K - a . b) / 2."""
    a = np.asarray(a, dtype=np.int32)
    b = np.asarray(b, dtype=np.int32)
    return (a.shape[-1] - a @ b.T) // 2


def generate_centers(config: ProblemConfig, seed: int) -> HashCenterSet:
    """Deterministically assign one center per class.

    Classes 0..K-1 take Hadamard rows, K..2K-1 the negated rows. Any further
    class gets a seeded random sign vector resampled until it sits at Hamming
    distance >= K/4 from every accepted row, within a bounded retry budget.
    """
    k, c = config.code_bits, config.n_classes
    if not is_power_of_two(k) or k < 2:
        raise ValidationError(f"code_bits must be a power of two >= 2, got {k}")
    h = hadamard(k)
    rows = [h[: min(c, k)]]
    sources = [CenterSource.HADAMARD_ROW] * min(c, k)
    if c > k:
        rows.append(-h[: min(c - k, k)])
        sources += [CenterSource.NEGATED_HADAMARD_ROW] * min(c - k, k)
    accepted = np.concatenate(rows, axis=0)
    if c > 2 * k:
        rng = np.random.default_rng(seed)
        min_distance = k // 4
        extra = []
        for _ in range(c - 2 * k):
            best = -1
            for _attempt in range(RESAMPLE_BUDGET):
                candidate = (rng.integers(0, 2, size=k, dtype=np.int8) * 2 - 1).astype(
                    np.int8
                )
                distances = hamming_between_rows(accepted, candidate)
                achieved = int(distances.min())
                best = max(best, achieved)
                if achieved >= min_distance:
                    break
            else:
                raise ResamplingError(
                    f"failed to place center {len(accepted)} within "
                    f"{RESAMPLE_BUDGET} attempts; best minimum distance {best} "
                    f"< required {min_distance}",
                    achieved_min_distance=best,
                )
            accepted = np.concatenate([accepted, candidate[None, :]], axis=0)
            extra.append(candidate)
        sources += [CenterSource.SAMPLED] * len(extra)
    return HashCenterSet(bits=k, classes=c, rows=accepted, sources=tuple(sources))


def multilabel_center(
    labels: Iterable[int], centers: HashCenterSet, seed: int
) -> np.ndarray:
    """Compose a target code for a label set by bitwise majority vote.

    Ties (possible only for even set sizes) are broken by a seeded coin flip,
    so the composite is deterministic given (labels, centers, seed).
    """
    selected = sorted(set(int(label) for label in labels))
    if not selected:
        raise ValidationError("label set must be non-empty")
    if selected[0] < 0 or selected[-1] >= centers.classes:
        raise ValidationError(
            f"labels {selected} out of range for {centers.classes} classes"
        )
    votes = centers.rows[selected].astype(np.int32).sum(axis=0)
    out = np.sign(votes).astype(np.int8)
    tied = np.flatnonzero(votes == 0)
    if tied.size:
        rng = np.random.default_rng(seed)
        out[tied] = rng.integers(0, 2, size=tied.size, dtype=np.int8) * 2 - 1
    return out


def write_centers(path: str | os.PathLike, centers: HashCenterSet) -> None:
    header = fileio.MAGIC_CENTERS + struct.pack(
        "<III", fileio.FORMAT_VERSION, centers.bits, centers.classes
    )
    packed = fileio.pack_sign_rows(centers.rows)
    fileio.atomic_write(path, header + packed.tobytes(order="C"))


def read_centers(path: str | os.PathLike) -> HashCenterSet:
    with open(path, "rb") as fh:
        data = fh.read()
    reader = fileio.Reader(data, f"{os.fspath(path)} (centers)")
    reader.expect_magic(fileio.MAGIC_CENTERS)
    reader.expect_version()
    bits = reader.u32()
    classes = reader.u32()
    if bits == 0 or classes == 0:
        raise ValidationError("centers file declares a zero dimension")
    row_bytes = (bits + 7) // 8
    raw = reader.take(classes * row_bytes)
    reader.done()
    packed = np.frombuffer(raw, dtype=np.uint8).reshape(classes, row_bytes)
    rows = fileio.unpack_sign_rows(packed, bits, what="centers")
    return HashCenterSet(
        bits=bits, classes=classes, rows=rows, sources=_infer_sources(rows, bits)
    )


def _infer_sources(rows: np.ndarray, bits: int) -> tuple[CenterSource, ...]:
    # Provenance is not stored in the file; recover it by matching against the
    # Hadamard rows when the width admits them.
    if not is_power_of_two(bits) or bits < 2:
        return tuple(CenterSource.SAMPLED for _ in rows)
    h = hadamard(bits)
    sources = []
    for row in rows:
        if np.any((h == row).all(axis=1)):
            sources.append(CenterSource.HADAMARD_ROW)
        elif np.any((h == -row).all(axis=1)):
            sources.append(CenterSource.NEGATED_HADAMARD_ROW)
        else:
            sources.append(CenterSource.SAMPLED)
    return tuple(sources)
