import numpy as np
import pytest

from hks.errors import (
    DegenerateInputError,
    InsufficientDataError,
    InvalidInputError,
    MissingSampleError,
    ModeError,
    StaleHierarchyError,
)
from hks.knowledge import (
    Granularity,
    HashVector,
    HnswIndex,
    KnowledgeCache,
    RandomProjectionEncoder,
    SampleId,
    agglomerate,
    build_hierarchy,
    cluster_path,
    encode_hash,
    exact_knn,
    fedcache_teacher,
    feddistill_teacher,
    fetch_teacher,
)
from reference_oracles import knn_by_sorting, naive_linkage


def make_cache(points, n_classes=2, clients=None, labels=None, round_index=0):
    """Cache of 1-per-point records; hashes mirror the logit vectors."""
    points = [np.atleast_1d(np.asarray(p, dtype=np.float64)) for p in points]
    cache = KnowledgeCache(n_classes, store_labels=labels is not None)
    for i, p in enumerate(points):
        client = clients[i] if clients else 0
        sid = SampleId(client, i)
        cache.register(sid, p, label=labels[i] if labels else None)
        cache.update_logits(sid, p, round_index)
    return cache


class TestEncodeHash:
    def test_deterministic(self):
        x = np.arange(6.0)
        np.testing.assert_array_equal(encode_hash(x, 4, 3), encode_hash(x, 4, 3))

    def test_unit_norm(self):
        h = encode_hash(np.linspace(1, 2, 10), 8, seed := 5)
        assert abs(np.linalg.norm(h) - 1.0) < 1e-9

    def test_scale_invariance(self):
        x = np.array([0.5, -1.0, 2.0])
        np.testing.assert_allclose(encode_hash(x, 4, 1), encode_hash(2 * x, 4, 1), atol=1e-12)

    def test_zero_input_degenerates(self):
        with pytest.raises(DegenerateInputError):
            encode_hash(np.zeros(5), 4, 0)

    def test_batched_encode_matches_single(self):
        enc = RandomProjectionEncoder(6, 4, seed=2)
        X = np.random.default_rng(0).normal(size=(5, 6))
        H = enc.encode_rows(X)
        for i in range(5):
            np.testing.assert_allclose(H[i], enc.encode(X[i]), atol=1e-12)


class TestExactKnn:
    def test_singleton(self):
        cache = make_cache([[1.0, 0.0]])
        assert exact_knn(cache, np.array([0.0, 0.0]), 3) == [SampleId(0, 0)]

    def test_tie_break_by_sample_id(self):
        cache = make_cache([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        out = exact_knn(cache, np.array([1.0, 0.0]), 3)
        assert out == [SampleId(0, 0), SampleId(0, 1), SampleId(0, 2)]

    def test_matches_independent_sorted_table(self):
        rng = np.random.default_rng(17)
        points = rng.normal(size=(200, 6))
        cache = make_cache(points, n_classes=1)
        q = rng.normal(size=6)
        mine = exact_knn(cache, q, 10)
        reference = knn_by_sorting(points, q, 10)
        assert [sid.local_index for sid in mine] == reference

    def test_filter(self):
        cache = make_cache([[0.0, 1.0], [0.0, 2.0], [0.0, 3.0]])
        out = exact_knn(cache, np.array([0.0, 0.0]), 2, lambda s: s.local_index != 0)
        assert out == [SampleId(0, 1), SampleId(0, 2)]


class TestHnsw:
    def build(self, points, seed=0, **kwargs):
        index = HnswIndex(points.shape[1], seed=seed, **kwargs)
        for i, p in enumerate(points):
            index.insert(HashVector(SampleId(0, i), p))
        return index

    def test_query_of_indexed_vector_returns_itself_first(self):
        rng = np.random.default_rng(0)
        points = rng.normal(size=(50, 8))
        index = self.build(points)
        assert index.query(points[17], 5)[0] == SampleId(0, 17)

    def test_k_larger_than_index(self):
        rng = np.random.default_rng(1)
        points = rng.normal(size=(6, 4))
        index = self.build(points)
        assert len(index.query(points[0], 50)) == 6

    def test_empty_index_returns_empty(self):
        index = HnswIndex(4)
        assert index.query(np.zeros(4), 3) == []

    def test_degree_caps(self):
        rng = np.random.default_rng(2)
        points = rng.normal(size=(300, 8))
        index = self.build(points, m=8)
        for node, layers in enumerate(index.neighbors):
            for layer, nbrs in enumerate(layers):
                cap = index.m0 if layer == 0 else index.m
                assert len(nbrs) <= cap, (node, layer)

    def test_layer0_reachability(self):
        rng = np.random.default_rng(3)
        points = rng.normal(size=(250, 8))
        index = self.build(points)
        seen = {index.entry_point}
        frontier = [index.entry_point]
        while frontier:
            nxt = []
            for node in frontier:
                for nb in index.neighbors[node][0]:
                    if nb not in seen:
                        seen.add(nb)
                        nxt.append(nb)
            frontier = nxt
        assert len(seen) == len(index)

    def test_recall_against_exact(self):
        rng = np.random.default_rng(4)
        points = rng.normal(size=(400, 16))
        cache = make_cache(points, n_classes=1)
        index = self.build(points, m=16, ef_construction=100, ef_search=64)
        hits = total = 0
        for q in rng.normal(size=(50, 16)):
            truth = set(exact_knn(cache, q, 10))
            found = set(index.query(q, 10))
            hits += len(truth & found)
            total += 10
        assert hits / total >= 0.9

    def test_filtered_query(self):
        rng = np.random.default_rng(5)
        points = rng.normal(size=(40, 4))
        index = self.build(points)
        out = index.query(points[0], 5, lambda s: s.local_index % 2 == 1)
        assert out and all(s.local_index % 2 == 1 for s in out)

    def test_duplicate_insert_rejected(self):
        index = HnswIndex(3)
        index.insert(HashVector(SampleId(0, 0), np.ones(3)))
        with pytest.raises(InvalidInputError):
            index.insert(HashVector(SampleId(0, 0), np.ones(3)))


class TestCache:
    def test_update_then_read(self):
        cache = make_cache([[1.0, 2.0]])
        cache.update_logits(SampleId(0, 0), np.array([5.0, 6.0]), round_index=3)
        rec = cache.record(SampleId(0, 0))
        np.testing.assert_array_equal(rec.logits, [5.0, 6.0])
        assert rec.round_updated == 3

    def test_last_update_wins(self):
        cache = make_cache([[0.0]])
        cache.update_logits(SampleId(0, 0), np.array([1.0]), 1)
        cache.update_logits(SampleId(0, 0), np.array([2.0]), 1)
        np.testing.assert_array_equal(cache.record(SampleId(0, 0)).logits, [2.0])

    def test_update_is_isolated(self):
        cache = make_cache([[1.0], [2.0]])
        cache.update_logits(SampleId(0, 0), np.array([9.0]), 1)
        np.testing.assert_array_equal(cache.record(SampleId(0, 1)).logits, [2.0])

    def test_unknown_id_rejected(self):
        cache = make_cache([[1.0]])
        with pytest.raises(MissingSampleError):
            cache.update_logits(SampleId(5, 5), np.array([1.0]), 0)

    def test_label_free_mode_has_no_labels(self):
        cache = make_cache([[1.0], [2.0]])
        assert all(rec.label is None for rec in cache.records.values())
        with pytest.raises(ModeError):
            cache.get_label(SampleId(0, 0))
        assert cache.label_reads == 0

    def test_snapshot_export(self):
        cache = KnowledgeCache(2)
        cache.register(SampleId(1, 0), np.zeros(2))
        cache.update_logits(SampleId(1, 0), np.array([0.5, -1.0]), 4)
        cache.register(SampleId(0, 3), np.zeros(2))
        text = cache.export_snapshot()
        assert text.splitlines() == ["3 0 -1", "0 1 4 0.5 -1.0"]


class FourPoints:
    """1-D logits {0, 0.1, 10, 10.1}; at a 2-cluster cut the pairs separate."""

    values = [0.0, 0.1, 10.0, 10.1]

    def tree(self, cut=2):
        cache = make_cache(self.values)
        return cache, build_hierarchy(cache, cut)


class TestBuildHierarchy(FourPoints):
    def test_four_point_cut(self):
        _, tree = self.tree()
        partition = {frozenset(s.local_index for s in c) for c in tree.cut_partition()}
        assert partition == {frozenset({0, 1}), frozenset({2, 3})}

    def test_heights_nondecreasing(self):
        rng = np.random.default_rng(6)
        cache = make_cache(rng.normal(size=(20, 3)), n_classes=3)
        tree = build_hierarchy(cache, 3)
        heights = [m.height for m in tree.merges]
        assert all(b >= a - 1e-9 for a, b in zip(heights, heights[1:]))

    def test_insufficient_records(self):
        cache = make_cache([[1.0], [2.0]])
        with pytest.raises(InsufficientDataError):
            build_hierarchy(cache, 3)

    @pytest.mark.parametrize("dim", [2, 10])
    def test_matches_naive_reference(self, dim):
        rng = np.random.default_rng(70 + dim)
        for _ in range(6):
            n = int(rng.integers(4, 33))
            X = rng.normal(size=(n, dim))
            tree = agglomerate(X, [SampleId(0, i) for i in range(n)], cut=2)
            expected_merges, expected_cut = naive_linkage(X, cut=2)
            assert len(tree.merges) == len(expected_merges)
            for merge, (left, right, height) in zip(tree.merges, expected_merges):
                got_left = frozenset(s.local_index for s in tree.members(merge.left))
                got_right = frozenset(s.local_index for s in tree.members(merge.right))
                assert (got_left, got_right) == (left, right)
                assert merge.height == pytest.approx(height, abs=1e-9)
            got_cut = {frozenset(s.local_index for s in c) for c in tree.cut_partition()}
            assert got_cut == set(expected_cut)

    def test_exact_tie_break_prefers_smallest_ids(self):
        # 1-D points 0,1,10,11: both candidate pairs sit at exactly 1.0
        X = np.array([[0.0], [1.0], [10.0], [11.0]])
        tree = agglomerate(X, [SampleId(0, i) for i in range(4)], cut=2)
        first = tree.merges[0]
        members = {s.local_index for s in tree.members(first.left)} | {
            s.local_index for s in tree.members(first.right)
        }
        assert members == {0, 1}

    def test_permutation_invariance(self):
        rng = np.random.default_rng(8)
        points = rng.normal(size=(12, 2))
        ids = [SampleId(0, i) for i in range(12)]

        def build(order):
            cache = KnowledgeCache(2)
            for i in order:
                cache.register(ids[i], points[i])
                cache.update_logits(ids[i], points[i], 0)
            tree = build_hierarchy(cache, 3)
            return {frozenset(c) for c in tree.cut_partition()}

        base = build(range(12))
        shuffled = list(range(12))
        rng.shuffle(shuffled)
        assert build(shuffled) == base

    def test_single_and_complete_linkage_match_reference(self):
        rng = np.random.default_rng(9)
        X = rng.normal(size=(10, 2))
        for linkage in ("single", "complete"):
            tree = agglomerate(X, [SampleId(0, i) for i in range(10)], cut=2, linkage=linkage)
            expected, _ = naive_linkage(X, cut=2, linkage=linkage)
            for merge, (_, _, height) in zip(tree.merges, expected):
                assert merge.height == pytest.approx(height, abs=1e-9)


class TestClusterPath(FourPoints):
    def test_four_point_path(self):
        _, tree = self.tree()
        path = cluster_path(tree, SampleId(0, 0))
        sets = [frozenset(s.local_index for s in c) for c in path.clusters]
        assert sets == [frozenset({0}), frozenset({0, 1})]

    def test_last_element_in_cut(self):
        _, tree = self.tree()
        cut = set(tree.cut_partition())
        for i in range(4):
            path = cluster_path(tree, SampleId(0, i))
            assert path.clusters[-1] in cut

    def test_strict_nesting(self):
        rng = np.random.default_rng(10)
        cache = make_cache(rng.normal(size=(16, 2)), n_classes=2)
        tree = build_hierarchy(cache, 2)
        for i in range(16):
            chain = cluster_path(tree, SampleId(0, i)).clusters
            assert chain[0] == frozenset({SampleId(0, i)})
            for small, big in zip(chain, chain[1:]):
                assert small < big

    def test_unknown_leaf(self):
        _, tree = self.tree()
        with pytest.raises(MissingSampleError):
            cluster_path(tree, SampleId(9, 9))

    def test_single_merge_before_cut_gives_length_two(self):
        _, tree = self.tree()
        assert len(cluster_path(tree, SampleId(0, 2))) == 2


class TestFetchTeacher(FourPoints):
    def test_singleton_path_bottom_unavailable(self):
        # three points, cut at 2: the far point stays a singleton
        cache = make_cache([0.0, 0.1, 10.0])
        tree = build_hierarchy(cache, 2)
        assert fetch_teacher(cache, tree, SampleId(0, 2), Granularity.BOTTOM) == []

    def test_top_aggregates_cut_cluster_excluding_self(self):
        cache, tree = self.tree()
        out = fetch_teacher(cache, tree, SampleId(0, 0), Granularity.TOP, exclude_self=True)
        assert len(out) == 1
        np.testing.assert_allclose(out[0], [0.1])

    def test_top_without_exclusion_is_cluster_mean(self):
        cache, tree = self.tree()
        out = fetch_teacher(cache, tree, SampleId(0, 0), Granularity.TOP, exclude_self=False)
        np.testing.assert_allclose(out[0], [0.05])

    def test_top_identical_across_cluster_without_exclusion(self):
        cache, tree = self.tree()
        a = fetch_teacher(cache, tree, SampleId(0, 0), Granularity.TOP, exclude_self=False)
        b = fetch_teacher(cache, tree, SampleId(0, 1), Granularity.TOP, exclude_self=False)
        np.testing.assert_allclose(a[0], b[0])

    def chain_tree(self):
        # 1-D points 0,1,4,16 merge as ({0,1}), ({0,1},4), (.,16); cut at 1
        cache = make_cache([0.0, 1.0, 4.0, 16.0], n_classes=1)
        return cache, build_hierarchy(cache, 1)

    def test_all_on_length_three_path_yields_two_entries(self):
        cache, tree = self.chain_tree()
        out = fetch_teacher(cache, tree, SampleId(0, 2), Granularity.ALL, exclude_self=False)
        assert len(out) == 2
        np.testing.assert_allclose(out[0], [(0.0 + 1.0 + 4.0) / 3])
        np.testing.assert_allclose(out[1], [(0.0 + 1.0 + 4.0 + 16.0) / 4])

    def test_middle_of_length_four_path(self):
        cache, tree = self.chain_tree()
        # leaf 0 path: {0} < {0,1} < {0,1,4} < {0,1,4,16}; middle = ceil(5/2) = 3rd
        out = fetch_teacher(cache, tree, SampleId(0, 0), Granularity.MIDDLE, exclude_self=False)
        np.testing.assert_allclose(out[0], [(0.0 + 1.0 + 4.0) / 3])

    def test_bottom_is_first_merge(self):
        cache, tree = self.chain_tree()
        out = fetch_teacher(cache, tree, SampleId(0, 0), Granularity.BOTTOM, exclude_self=True)
        np.testing.assert_allclose(out[0], [1.0])

    def test_missing_tree(self):
        cache, _ = self.tree()
        with pytest.raises(StaleHierarchyError):
            fetch_teacher(cache, None, SampleId(0, 0), Granularity.TOP)

    def test_stale_tree_for_new_sample(self):
        cache, tree = self.tree()
        cache.register(SampleId(0, 99), np.array([1.0]))
        cache.update_logits(SampleId(0, 99), np.array([1.0]), 1)
        with pytest.raises(StaleHierarchyError):
            fetch_teacher(cache, tree, SampleId(0, 99), Granularity.TOP)

    def test_unknown_sample(self):
        cache, tree = self.tree()
        with pytest.raises(MissingSampleError):
            fetch_teacher(cache, tree, SampleId(7, 7), Granularity.TOP)


class TestFedDistillTeacher:
    def test_single_foreign_holder(self):
        cache = make_cache(
            [[1.0, 2.0], [9.0, 9.0]], clients=[1, 0], labels=[0, 1], n_classes=2
        )
        np.testing.assert_allclose(feddistill_teacher(cache, 0, requesting_client=0), [1.0, 2.0])

    def test_only_requester_holds_class(self):
        cache = make_cache([[1.0, 2.0]], clients=[0], labels=[0], n_classes=2)
        assert feddistill_teacher(cache, 0, requesting_client=0) is None

    def test_mean_of_two_foreign_records(self):
        cache = make_cache(
            [[0.0, 2.0], [2.0, 0.0], [5.0, 5.0]], clients=[1, 2, 0], labels=[0, 0, 0], n_classes=1
        )
        np.testing.assert_allclose(feddistill_teacher(cache, 0, requesting_client=0), [1.0, 1.0])

    def test_mode_error_without_labels(self):
        cache = make_cache([[1.0]])
        with pytest.raises(ModeError):
            feddistill_teacher(cache, 0, requesting_client=0)


class TestFedCacheTeacher:
    def crafted(self):
        """Three same-class foreign neighbors at distances 1, 2, 9 from target."""
        hashes = np.array(
            [[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [9.0, 0.0]], dtype=np.float64
        )
        logits = np.array([[0.0, 0.0], [1.0, 1.0], [3.0, 3.0], [100.0, 100.0]])
        cache = KnowledgeCache(2, store_labels=True)
        index = HnswIndex(2, seed=0)
        clients = [0, 1, 2, 3]
        for i in range(4):
            sid = SampleId(clients[i], i)
            cache.register(sid, hashes[i], label=0)
            cache.update_logits(sid, logits[i], 0)
            index.insert(HashVector(sid, hashes[i]))
        return cache, index

    def test_r1_single_foreign(self):
        cache, index = self.crafted()
        np.testing.assert_allclose(fedcache_teacher(cache, index, SampleId(0, 0), R=1), [1.0, 1.0])

    def test_r2_means_two_closest_matching_exact_knn(self):
        cache, index = self.crafted()
        me = SampleId(0, 0)
        expected_ids = exact_knn(
            cache,
            cache.hash_of(me),
            2,
            lambda s: s.client_id != 0 and cache.record(s).label == 0,
        )
        assert expected_ids == [SampleId(1, 1), SampleId(2, 2)]
        np.testing.assert_allclose(fedcache_teacher(cache, index, me, R=2), [2.0, 2.0])

    def test_r_beyond_population_means_everything_foreign(self):
        cache, index = self.crafted()
        out = fedcache_teacher(cache, index, SampleId(0, 0), R=50)
        np.testing.assert_allclose(out, np.mean([[1.0, 1.0], [3.0, 3.0], [100.0, 100.0]], axis=0))

    def test_unavailable_when_no_foreign_same_class(self):
        cache = KnowledgeCache(2, store_labels=True)
        index = HnswIndex(2, seed=0)
        sid = SampleId(0, 0)
        cache.register(sid, np.array([1.0, 0.0]), label=1)
        cache.update_logits(sid, np.array([0.5, 0.5]), 0)
        index.insert(HashVector(sid, np.array([1.0, 0.0])))
        assert fedcache_teacher(cache, index, sid, R=3) is None

    def test_mode_error_without_labels(self):
        cache = make_cache([[1.0, 0.0]])
        index = HnswIndex(2, seed=0)
        index.insert(HashVector(SampleId(0, 0), np.array([1.0, 0.0])))
        with pytest.raises(ModeError):
            fedcache_teacher(cache, index, SampleId(0, 0), R=1)
