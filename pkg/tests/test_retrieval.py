import numpy as np
import pytest

from cshash.binhash import BinaryCodeMatrix
from cshash.errors import ValidationError
from cshash.retrieval import (
    average_precision,
    build_index,
    map_at_k,
    query_topk,
    read_index,
    write_index,
)


def random_codes(rng, n, bits):
    return BinaryCodeMatrix.from_signs(rng.integers(0, 2, size=(n, bits)) * 2 - 1)


def naive_topk(codes: BinaryCodeMatrix, query_signs: np.ndarray, k: int):
    """Per-bit loop distances + stable sort; the independent oracle."""
    signs = codes.to_signs()
    distances = np.array(
        [sum(1 for a, b in zip(row, query_signs) if a != b) for row in signs]
    )
    order = sorted(range(len(signs)), key=lambda i: (distances[i], i))[:k]
    return order, [distances[i] for i in order]


def naive_map_at_k(codes, labels, query_codes, query_labels, k):
    """Independent mAP: explicit loops over the AP definition, zero-relevant
    queries excluded, denominator = relevant retrieved within top k."""
    aps = []
    for qi in range(query_codes.count):
        qsigns = query_codes.to_signs()[qi]
        order, _ = naive_topk(codes, qsigns, k)
        if isinstance(query_labels[qi], (set, frozenset)):
            rel = [1 if set(labels[g]) & set(query_labels[qi]) else 0 for g in order]
        else:
            rel = [1 if labels[g] == query_labels[qi] else 0 for g in order]
        hits = sum(rel)
        if hits == 0:
            continue
        ap = 0.0
        seen = 0
        for rank, r in enumerate(rel, start=1):
            if r:
                seen += 1
                ap += seen / rank
        aps.append(ap / hits)
    return sum(aps) / len(aps) if aps else 0.0


class TestBuildIndex:
    def test_empty_index(self):
        codes = BinaryCodeMatrix(bits=16, data=np.zeros((0, 2), dtype=np.uint8))
        index = build_index(codes, np.array([], dtype=np.uint64), [])
        result = query_topk(index, np.zeros(2, dtype=np.uint8), 5)
        assert result.ids.size == 0 and result.distances.size == 0

    def test_single_item(self):
        rng = np.random.default_rng(0)
        codes = random_codes(rng, 1, 16)
        index = build_index(codes, [42], [3])
        result = query_topk(index, np.zeros(2, dtype=np.uint8), 10)
        assert list(result.ids) == [42]

    def test_duplicate_ids_rejected(self):
        rng = np.random.default_rng(1)
        codes = random_codes(rng, 3, 8)
        with pytest.raises(ValidationError):
            build_index(codes, [1, 1, 2], [0, 0, 1])

    def test_count_mismatch_rejected(self):
        rng = np.random.default_rng(2)
        codes = random_codes(rng, 3, 8)
        with pytest.raises(ValidationError):
            build_index(codes, [1, 2, 3], [0, 0])


class TestQueryTopk:
    def test_exact_match_first_with_distance_zero(self):
        rng = np.random.default_rng(3)
        codes = random_codes(rng, 50, 32)
        index = build_index(codes, np.arange(50), np.zeros(50, dtype=int))
        result = query_topk(index, codes.row(17), 5)
        assert result.ids[0] == 17 and result.distances[0] == 0

    def test_k_larger_than_n_returns_all(self):
        rng = np.random.default_rng(4)
        codes = random_codes(rng, 7, 16)
        index = build_index(codes, np.arange(7), np.zeros(7, dtype=int))
        result = query_topk(index, codes.row(0), 100)
        assert result.ids.size == 7

    def test_distances_non_decreasing(self):
        rng = np.random.default_rng(5)
        codes = random_codes(rng, 200, 24)
        index = build_index(codes, np.arange(200), np.zeros(200, dtype=int))
        result = query_topk(index, codes.row(0), 50)
        assert np.all(np.diff(result.distances.astype(int)) >= 0)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(6)
        codes = random_codes(rng, 300, 16)
        index = build_index(codes, np.arange(300), np.zeros(300, dtype=int))
        signs = codes.to_signs()
        for _ in range(25):
            qi = int(rng.integers(0, 300))
            k = int(rng.integers(1, 40))
            result = query_topk(index, codes.row(qi), k)
            order, dists = naive_topk(codes, signs[qi], k)
            assert list(result.positions) == order
            assert list(result.distances) == dists

    def test_tie_break_by_insertion_index(self):
        # four identical codes: ranked purely by insertion order
        signs = np.tile(np.array([1, -1, 1, -1, 1, -1, 1, -1]), (4, 1))
        codes = BinaryCodeMatrix.from_signs(signs)
        index = build_index(codes, [30, 10, 20, 40], [0, 0, 0, 0])
        result = query_topk(index, codes.row(0), 4)
        assert list(result.ids) == [30, 10, 20, 40]

    def test_width_mismatch(self):
        rng = np.random.default_rng(7)
        codes = random_codes(rng, 5, 16)
        index = build_index(codes, np.arange(5), np.zeros(5, dtype=int))
        with pytest.raises(ValidationError):
            query_topk(index, np.zeros(3, dtype=np.uint8), 2)


class TestAveragePrecision:
    def test_hand_case(self):
        # relevance [1, 0, 1]: AP = (1/1 + 2/3) / 2
        assert average_precision(np.array([1, 0, 1])) == pytest.approx(5 / 6)

    def test_all_relevant(self):
        assert average_precision(np.ones(10)) == 1.0

    def test_none_relevant(self):
        assert average_precision(np.zeros(4)) == 0.0


class TestMapAtK:
    def test_matches_naive_oracle_single_label(self):
        rng = np.random.default_rng(8)
        codes = random_codes(rng, 50, 16)
        labels = rng.integers(0, 4, size=50)
        index = build_index(codes, np.arange(50), labels)
        queries = random_codes(rng, 12, 16)
        qlabels = rng.integers(0, 4, size=12)
        fast = map_at_k(index, queries, list(qlabels), k=10)
        naive = naive_map_at_k(codes, list(labels), queries, list(qlabels), 10)
        assert fast == pytest.approx(naive, abs=1e-12)

    def test_matches_naive_oracle_multi_label(self):
        rng = np.random.default_rng(9)
        codes = random_codes(rng, 40, 16)
        labels = [frozenset(rng.choice(5, size=rng.integers(1, 3), replace=False).tolist())
                  for _ in range(40)]
        index = build_index(codes, np.arange(40), labels)
        queries = random_codes(rng, 8, 16)
        qlabels = [frozenset(rng.choice(5, size=rng.integers(1, 3), replace=False).tolist())
                   for _ in range(8)]
        fast = map_at_k(index, queries, qlabels, k=10)
        naive = naive_map_at_k(codes, labels, queries, qlabels, 10)
        assert fast == pytest.approx(naive, abs=1e-12)

    def test_single_label_equals_singleton_sets(self):
        rng = np.random.default_rng(10)
        codes = random_codes(rng, 60, 16)
        labels = rng.integers(0, 3, size=60)
        queries = random_codes(rng, 10, 16)
        qlabels = rng.integers(0, 3, size=10)
        single = build_index(codes, np.arange(60), labels)
        as_sets = build_index(codes, np.arange(60), [frozenset([int(l)]) for l in labels])
        a = map_at_k(single, queries, list(qlabels), k=15)
        b = map_at_k(as_sets, queries, [frozenset([int(l)]) for l in qlabels], k=15)
        assert a == pytest.approx(b, abs=1e-12)

    def test_perfect_retrieval_scores_one(self):
        signs = np.concatenate([np.ones((5, 16)), -np.ones((5, 16))]).astype(np.int8)
        codes = BinaryCodeMatrix.from_signs(signs)
        labels = [0] * 5 + [1] * 5
        index = build_index(codes, np.arange(10), labels)
        queries = BinaryCodeMatrix.from_signs(np.ones((1, 16), dtype=np.int8))
        assert map_at_k(index, queries, [0], k=5) == 1.0

    def test_zero_relevant_modes(self):
        rng = np.random.default_rng(11)
        codes = random_codes(rng, 10, 16)
        index = build_index(codes, np.arange(10), np.zeros(10, dtype=int))
        queries = random_codes(rng, 2, 16)
        # label 5 never occurs in the gallery
        excluded = map_at_k(index, queries, [5, 0], k=5)
        counted = map_at_k(index, queries, [5, 0], k=5, include_zero_relevant=True)
        only_valid = map_at_k(index, queries.data[1:2], [0], k=5)
        assert excluded == pytest.approx(only_valid)
        assert counted == pytest.approx(only_valid / 2)

    def test_min_k_total_denominator(self):
        # one relevant item in the gallery, retrieved at rank 1 with k=3:
        # retrieved-denominator AP = 1, min(k, total)-denominator AP = 1/1
        signs = np.ones((3, 8), dtype=np.int8)
        signs[1] *= -1
        signs[2, :4] *= -1
        codes = BinaryCodeMatrix.from_signs(signs)
        index = build_index(codes, np.arange(3), [0, 1, 1])
        queries = BinaryCodeMatrix.from_signs(np.ones((1, 8), dtype=np.int8))
        a = map_at_k(index, queries, [0], k=3, denominator="retrieved")
        b = map_at_k(index, queries, [0], k=3, denominator="min_k_total")
        assert a == 1.0 and b == 1.0

    def test_threads_match_sequential(self):
        rng = np.random.default_rng(12)
        codes = random_codes(rng, 80, 16)
        labels = rng.integers(0, 4, size=80)
        index = build_index(codes, np.arange(80), labels)
        queries = random_codes(rng, 16, 16)
        qlabels = list(rng.integers(0, 4, size=16))
        assert map_at_k(index, queries, qlabels, k=10) == map_at_k(
            index, queries, qlabels, k=10, threads=4
        )

    def test_no_queries_rejected(self):
        rng = np.random.default_rng(13)
        codes = random_codes(rng, 5, 16)
        index = build_index(codes, np.arange(5), np.zeros(5, dtype=int))
        with pytest.raises(ValidationError):
            map_at_k(index, np.zeros((0, 2), dtype=np.uint8), [], k=3)

    def test_map_in_unit_interval(self):
        rng = np.random.default_rng(18)
        codes = random_codes(rng, 30, 16)
        index = build_index(codes, np.arange(30), rng.integers(0, 3, size=30))
        queries = random_codes(rng, 5, 16)
        value = map_at_k(index, queries, list(rng.integers(0, 3, size=5)), k=8)
        assert 0.0 <= value <= 1.0

    def test_insertion_order_invariance_with_distinct_distances(self):
        # gallery items at pairwise-distinct distances from the query: mAP
        # must not depend on insertion order
        k_bits = 32
        query_signs = np.ones(k_bits, dtype=np.int8)
        signs = np.tile(query_signs, (8, 1))
        for i in range(8):
            signs[i, :i] = -1  # item i sits at distance exactly i
        labels = np.array([0, 1, 0, 1, 0, 1, 0, 1])
        codes = BinaryCodeMatrix.from_signs(signs)
        base = build_index(codes, np.arange(8), labels)
        query = BinaryCodeMatrix.from_signs(query_signs[None, :])
        expected = map_at_k(base, query, [0], k=6)
        perm = np.array([5, 2, 7, 0, 3, 6, 1, 4])
        shuffled = build_index(
            BinaryCodeMatrix.from_signs(signs[perm]), np.arange(8), labels[perm]
        )
        assert map_at_k(shuffled, query, [0], k=6) == pytest.approx(expected, abs=1e-15)


class TestIndexFile:
    def test_round_trip_single_label(self, tmp_path):
        rng = np.random.default_rng(14)
        codes = random_codes(rng, 20, 24)
        labels = rng.integers(0, 6, size=20)
        index = build_index(codes, np.arange(100, 120), labels)
        path = tmp_path / "g.csix"
        write_index(path, index)
        loaded = read_index(path)
        assert loaded.count == 20 and not loaded.multi_label
        assert np.array_equal(loaded.ids, index.ids)
        assert np.array_equal(loaded.single_labels, index.single_labels)
        query = codes.row(3)
        a = query_topk(index, query, 7)
        b = query_topk(loaded, query, 7)
        assert np.array_equal(a.ids, b.ids)
        assert np.array_equal(a.distances, b.distances)

    def test_round_trip_multi_label(self, tmp_path):
        rng = np.random.default_rng(15)
        codes = random_codes(rng, 15, 16)
        labels = [frozenset(rng.choice(9, size=rng.integers(1, 4), replace=False).tolist())
                  for _ in range(15)]
        index = build_index(codes, np.arange(15), labels, label_space=9)
        path = tmp_path / "m.csix"
        write_index(path, index)
        loaded = read_index(path)
        assert loaded.multi_label and loaded.label_space == 9
        assert np.array_equal(loaded.label_masks, index.label_masks)

    def test_byte_identical_rewrite(self, tmp_path):
        rng = np.random.default_rng(16)
        codes = random_codes(rng, 9, 16)
        index = build_index(codes, np.arange(9), rng.integers(0, 3, size=9))
        a, b = tmp_path / "a.csix", tmp_path / "b.csix"
        write_index(a, index)
        write_index(b, read_index(a))
        assert a.read_bytes() == b.read_bytes()

    def test_header_layout(self, tmp_path):
        rng = np.random.default_rng(17)
        codes = random_codes(rng, 2, 16)
        index = build_index(codes, [5, 6], [1, 0], label_space=3)
        path = tmp_path / "h.csix"
        write_index(path, index)
        raw = path.read_bytes()
        assert raw[:4] == bytes([0x43, 0x53, 0x49, 0x58])
        assert int.from_bytes(raw[4:8], "little") == 1  # version
        assert int.from_bytes(raw[8:12], "little") == 16  # K
        assert int.from_bytes(raw[12:16], "little") == 3  # C
        assert int.from_bytes(raw[16:24], "little") == 2  # N
        assert raw[24] == 0  # flags: single-label
