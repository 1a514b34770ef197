"""Bit-packed Hamming retrieval index and mAP evaluation.

Ranking is by ascending Hamming distance with ties broken by ascending
insertion index, so results are bit-reproducible regardless of how the
candidate scan is implemented. Relevance is label-set intersection; single
labels are the singleton special case and keep a dedicated fast path.
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from cshash import fileio
from cshash.binhash import BinaryCodeMatrix, hamming_to_all
from cshash.errors import ValidationError

AP_DENOMINATORS = ("retrieved", "min_k_total")


@dataclass(frozen=True)
class RetrievalIndex:
    codes: BinaryCodeMatrix
    ids: np.ndarray  # (N,) uint64, unique
    label_space: int  # number of distinct labels C
    multi_label: bool
    single_labels: np.ndarray | None  # (N,) int64 when single-label
    label_masks: np.ndarray | None  # (N, ceil(C/8)) uint8 bitmasks when multi-label

    def __post_init__(self):
        ids = np.array(self.ids, dtype=np.uint64)
        if ids.shape != (self.codes.count,):
            raise ValidationError(
                f"ids count {ids.shape} != codes count {self.codes.count}"
            )
        if np.unique(ids).size != ids.size:
            raise ValidationError("item ids must be unique")
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)

    @property
    def count(self) -> int:
        return self.codes.count


@dataclass(frozen=True)
class QueryResult:
    ids: np.ndarray  # ranked item ids, ascending distance
    distances: np.ndarray  # matching Hamming distances, non-decreasing
    positions: np.ndarray  # gallery row of each hit


def labels_to_masks(label_sets: Sequence[frozenset[int]], label_space: int) -> np.ndarray:
    bits = np.zeros((len(label_sets), label_space), dtype=np.uint8)
    for i, labels in enumerate(label_sets):
        for label in labels:
            if not 0 <= label < label_space:
                raise ValidationError(
                    f"label {label} out of range for space {label_space}"
                )
            bits[i, label] = 1
    return np.packbits(bits, axis=1)


def normalize_labels(
    labels: Sequence, label_space: int | None = None
) -> tuple[bool, np.ndarray | None, np.ndarray | None, int]:
    """Classify a label column as single- or multi-label and materialize it.

    Returns (multi_label, single_labels, label_masks, label_space).
    """
    items = list(labels)
    as_sets = all(isinstance(x, (set, frozenset)) for x in items)
    if as_sets:
        sets = [frozenset(int(v) for v in x) for x in items]
        if any(not s for s in sets):
            raise ValidationError("every item needs at least one label")
        space = label_space or (max(max(s) for s in sets) + 1 if sets else 1)
        return True, None, labels_to_masks(sets, space), space
    singles = np.asarray(items, dtype=np.int64)
    if singles.ndim != 1:
        raise ValidationError(f"expected a flat label column, got shape {singles.shape}")
    if singles.size and singles.min() < 0:
        raise ValidationError("labels must be non-negative")
    space = label_space or (int(singles.max()) + 1 if singles.size else 1)
    if singles.size and singles.max() >= space:
        raise ValidationError(f"label {singles.max()} out of range for space {space}")
    return False, singles, None, space


def build_index(
    codes: BinaryCodeMatrix,
    ids: Sequence[int] | np.ndarray,
    labels: Sequence,
    label_space: int | None = None,
) -> RetrievalIndex:
    ids = np.asarray(ids, dtype=np.uint64)
    if len(labels) != codes.count:
        raise ValidationError(
            f"labels count {len(labels)} != codes count {codes.count}"
        )
    multi, singles, masks, space = normalize_labels(labels, label_space)
    return RetrievalIndex(
        codes=codes,
        ids=ids,
        label_space=space,
        multi_label=multi,
        single_labels=singles,
        label_masks=masks,
    )


def query_topk(index: RetrievalIndex, query_code: np.ndarray, k: int) -> QueryResult:
    """The k nearest gallery items by Hamming distance (stable tie order).

    Selection is O(N): partition finds the k-th distance, every strictly
    closer row is kept, and the boundary distance is filled in insertion
    order. Only the <= k survivors are sorted.
    """
    if k < 0:
        raise ValidationError(f"k must be >= 0, got {k}")
    distances = hamming_to_all(query_code, index.codes.data)
    k = min(k, index.count)
    if k == 0:
        empty_u64 = np.empty(0, dtype=np.uint64)
        return QueryResult(
            ids=empty_u64, distances=np.empty(0, dtype=np.uint32), positions=empty_u64
        )
    if k < index.count:
        boundary = np.partition(distances, k - 1)[k - 1]
        closer = np.flatnonzero(distances < boundary)
        at_boundary = np.flatnonzero(distances == boundary)[: k - closer.size]
        positions = np.concatenate([closer, at_boundary])
        # Both slices are in insertion order, so a stable sort on distance
        # reproduces the global (distance, insertion index) order.
        positions = positions[np.argsort(distances[positions], kind="stable")]
    else:
        positions = np.argsort(distances, kind="stable")
    return QueryResult(
        ids=index.ids[positions],
        distances=distances[positions],
        positions=positions.astype(np.uint64),
    )


def _relevance(index: RetrievalIndex, positions: np.ndarray, query_label) -> np.ndarray:
    if index.multi_label:
        if not isinstance(query_label, (set, frozenset)):
            query_label = {int(query_label)}
        qmask = labels_to_masks([frozenset(query_label)], index.label_space)[0]
        hits = index.label_masks[positions] & qmask[None, :]
        return np.any(hits != 0, axis=1)
    return index.single_labels[positions] == int(query_label)


def average_precision(relevant: np.ndarray) -> float:
    """AP over a ranked 0/1 relevance vector: mean of precision-at-hit over
    the number of relevant items retrieved. Zero when nothing relevant."""
    relevant = np.asarray(relevant, dtype=np.float64)
    total = relevant.sum()
    if total == 0:
        return 0.0
    precision = np.cumsum(relevant) / np.arange(1, relevant.size + 1)
    return float((precision * relevant).sum() / total)


def map_at_k(
    index: RetrievalIndex,
    query_codes: BinaryCodeMatrix | np.ndarray,
    query_labels: Sequence,
    k: int,
    *,
    include_zero_relevant: bool = False,
    denominator: str = "retrieved",
    threads: int = 1,
) -> float:
    """Mean average precision over the top-k ranked gallery items.

    Defaults follow the common central-similarity evaluation convention: the
    AP denominator is the number of relevant items inside the top k, and
    queries that retrieve nothing relevant are excluded from the mean. Both
    behaviors can be toggled for comparison against other protocols.
    """
    if denominator not in AP_DENOMINATORS:
        raise ValidationError(f"unknown denominator {denominator!r}")
    packed = query_codes.data if isinstance(query_codes, BinaryCodeMatrix) else np.asarray(query_codes)
    if isinstance(query_codes, BinaryCodeMatrix) and query_codes.bits != index.codes.bits:
        raise ValidationError(
            f"query bits {query_codes.bits} != index bits {index.codes.bits}"
        )
    if packed.ndim != 2 or packed.shape[0] == 0:
        raise ValidationError("need at least one query")
    if packed.shape[0] != len(query_labels):
        raise ValidationError("one label (set) required per query")

    def one_query(i: int) -> float | None:
        result = query_topk(index, packed[i], k)
        relevant = _relevance(index, result.positions.astype(np.int64), query_labels[i])
        hits = relevant.sum()
        if hits == 0:
            return None
        if denominator == "retrieved":
            return average_precision(relevant)
        precision = np.cumsum(relevant) / np.arange(1, relevant.size + 1)
        total_relevant = _total_relevant(index, query_labels[i])
        return float((precision * relevant).sum() / min(k, total_relevant))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            aps = list(pool.map(one_query, range(packed.shape[0])))
    else:
        aps = [one_query(i) for i in range(packed.shape[0])]

    if include_zero_relevant:
        values = [0.0 if ap is None else ap for ap in aps]
    else:
        values = [ap for ap in aps if ap is not None]
    return float(np.mean(values)) if values else 0.0


def _total_relevant(index: RetrievalIndex, query_label) -> int:
    return int(_relevance(index, np.arange(index.count), query_label).sum())


def write_index(path: str | os.PathLike, index: RetrievalIndex) -> None:
    flags = 0x01 if index.multi_label else 0x00
    blob = fileio.MAGIC_INDEX + struct.pack(
        "<IIIQB",
        fileio.FORMAT_VERSION,
        index.codes.bits,
        index.label_space,
        index.count,
        flags,
    )
    blob += index.codes.data.tobytes(order="C")
    blob += index.ids.astype("<u8").tobytes(order="C")
    if index.multi_label:
        blob += index.label_masks.tobytes(order="C")
    else:
        blob += index.single_labels.astype("<u4").tobytes(order="C")
    fileio.atomic_write(path, blob)


def read_index(path: str | os.PathLike) -> RetrievalIndex:
    with open(path, "rb") as fh:
        data = fh.read()
    reader = fileio.Reader(data, f"{os.fspath(path)} (index)")
    reader.expect_magic(fileio.MAGIC_INDEX)
    reader.expect_version()
    bits = reader.u32()
    label_space = reader.u32()
    count = reader.u64()
    flags = reader.u8()
    multi = bool(flags & 0x01)
    row_bytes = (bits + 7) // 8
    packed = np.frombuffer(reader.take(count * row_bytes), dtype=np.uint8)
    codes = BinaryCodeMatrix(bits=bits, data=packed.reshape(count, row_bytes))
    ids = np.frombuffer(reader.take(8 * count), dtype="<u8").astype(np.uint64)
    if multi:
        mask_bytes = (label_space + 7) // 8
        masks = np.frombuffer(reader.take(mask_bytes * count), dtype=np.uint8)
        reader.done()
        return RetrievalIndex(
            codes=codes,
            ids=ids,
            label_space=label_space,
            multi_label=True,
            single_labels=None,
            label_masks=np.ascontiguousarray(masks.reshape(count, mask_bytes)),
        )
    singles = np.frombuffer(reader.take(4 * count), dtype="<u4").astype(np.int64)
    reader.done()
    return RetrievalIndex(
        codes=codes,
        ids=ids,
        label_space=label_space,
        multi_label=False,
        single_labels=singles,
        label_masks=None,
    )
