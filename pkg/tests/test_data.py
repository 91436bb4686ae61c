import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hks.data import (
    ClientShard,
    Dataset,
    PartitionSpec,
    batches,
    dirichlet_partition,
    load_idx,
    split_local_test,
    stratified_subsample,
    synth_blobs,
    synth_train_and_test,
    write_idx,
)
from hks.errors import (
    ConsistencyError,
    EmptyShardError,
    FormatError,
    InfeasiblePartitionError,
    InvalidInputError,
    TruncatedFileError,
)


def idx_fixture_bytes():
    """Two 2x2 images with pixels [0,255,0,255 | 255,0,255,0], labels [1,0]."""
    images = struct.pack(">IIII", 0x00000803, 2, 2, 2) + bytes([0, 255, 0, 255, 255, 0, 255, 0])
    labels = struct.pack(">II", 0x00000801, 2) + bytes([1, 0])
    return images, labels


def write_pair(tmp_path, images, labels, gz=False):
    if gz:
        ip, lp = tmp_path / "img.idx.gz", tmp_path / "lab.idx.gz"
        ip.write_bytes(gzip.compress(images))
        lp.write_bytes(gzip.compress(labels))
    else:
        ip, lp = tmp_path / "img.idx", tmp_path / "lab.idx"
        ip.write_bytes(images)
        lp.write_bytes(labels)
    return ip, lp


class TestLoadIdx:
    def test_crafted_fixture(self, tmp_path):
        ip, lp = write_pair(tmp_path, *idx_fixture_bytes())
        ds = load_idx(ip, lp)
        np.testing.assert_allclose(ds.features, [[0, 1, 0, 1], [1, 0, 1, 0]])
        np.testing.assert_array_equal(ds.labels, [1, 0])
        assert ds.input_dim == 4

    def test_gzip_transparent(self, tmp_path):
        ip, lp = write_pair(tmp_path, *idx_fixture_bytes(), gz=True)
        ds = load_idx(ip, lp)
        assert len(ds) == 2

    def test_wrong_magic(self, tmp_path):
        images, labels = idx_fixture_bytes()
        bad = struct.pack(">I", 0x00000802) + images[4:]
        ip, lp = write_pair(tmp_path, bad, labels)
        with pytest.raises(FormatError):
            load_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        images, _ = idx_fixture_bytes()
        labels = struct.pack(">II", 0x00000801, 3) + bytes([1, 0, 1])
        ip, lp = write_pair(tmp_path, images, labels)
        with pytest.raises(ConsistencyError):
            load_idx(ip, lp)

    def test_truncated_file(self, tmp_path):
        images, labels = idx_fixture_bytes()
        ip, lp = write_pair(tmp_path, images[:-3], labels)
        with pytest.raises(TruncatedFileError):
            load_idx(ip, lp)

    def test_round_trip(self, tmp_path):
        ip, lp = write_pair(tmp_path, *idx_fixture_bytes())
        ds = load_idx(ip, lp)
        write_idx(ds, tmp_path / "out.idx", tmp_path / "outl.idx")
        again = load_idx(tmp_path / "out.idx", tmp_path / "outl.idx")
        np.testing.assert_array_equal(ds.features, again.features)
        np.testing.assert_array_equal(ds.labels, again.labels)


class TestSynthBlobs:
    def test_counts(self):
        ds = synth_blobs(3, 10, 5, 0.5, seed=0)
        assert len(ds) == 30
        assert all(np.sum(ds.labels == c) == 10 for c in range(3))

    def test_zero_spread_collapses_classes(self):
        ds = synth_blobs(2, 5, 4, 0.0, seed=1)
        for c in range(2):
            rows = ds.features[ds.labels == c]
            assert np.all(rows == rows[0])

    def test_nearest_centroid_oracle_is_perfect(self):
        ds = synth_blobs(4, 25, 8, 0.1, seed=2)
        centroids = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(4)])
        diffs = ds.features[:, None, :] - centroids[None, :, :]
        preds = np.argmin(np.einsum("ncd,ncd->nc", diffs, diffs), axis=1)
        assert np.mean(preds == ds.labels) == 1.0

    def test_deterministic(self):
        a = synth_blobs(3, 7, 6, 0.3, seed=9)
        b = synth_blobs(3, 7, 6, 0.3, seed=9)
        np.testing.assert_array_equal(a.features, b.features)

    def test_train_and_test_share_centers(self):
        train, test = synth_train_and_test(3, 20, 6, 0.05, seed=4, test_per_class=5)
        assert len(train) == 60 and len(test) == 15
        for c in range(3):
            tc = train.features[train.labels == c].mean(axis=0)
            ec = test.features[test.labels == c].mean(axis=0)
            assert np.linalg.norm(tc - ec) < 0.15


class TestDirichletPartition:
    def test_single_client_gets_everything(self):
        ds = synth_blobs(3, 10, 4, 0.5, seed=0)
        parts = dirichlet_partition(ds, PartitionSpec(1, 0.5, seed=0))
        assert sorted(parts[0].tolist()) == list(range(30))

    @given(
        n_clients=st.integers(min_value=1, max_value=12),
        alpha=st.floats(min_value=0.05, max_value=100),
        seed=st.integers(min_value=0, max_value=10_000),
    )
    @settings(max_examples=40, deadline=None)
    def test_partition_is_complete_and_disjoint(self, n_clients, alpha, seed):
        ds = synth_blobs(4, 12, 3, 0.5, seed=7)
        parts = dirichlet_partition(ds, PartitionSpec(n_clients, alpha, seed=seed))
        flat = np.concatenate(parts)
        assert len(flat) == len(ds)
        assert len(np.unique(flat)) == len(ds)

    def test_near_uniform_limit(self):
        ds = synth_blobs(10, 1000, 2, 1.0, seed=3)
        for seed in range(5):
            parts = dirichlet_partition(ds, PartitionSpec(4, 1e6, seed=seed))
            for part in parts:
                labels = ds.labels[part]
                for c in range(10):
                    count = int(np.sum(labels == c))
                    assert abs(count - 250) <= 25

    def test_min_per_client_enforced(self):
        ds = synth_blobs(2, 50, 3, 0.5, seed=5)
        parts = dirichlet_partition(ds, PartitionSpec(10, 0.05, seed=11, min_per_client=8))
        assert all(len(p) >= 8 for p in parts)
        flat = np.concatenate(parts)
        assert len(np.unique(flat)) == len(ds)

    def test_infeasible_min_per_client(self):
        ds = synth_blobs(2, 5, 3, 0.5, seed=5)
        with pytest.raises(InfeasiblePartitionError):
            dirichlet_partition(ds, PartitionSpec(4, 1.0, seed=0, min_per_client=5))

    def test_lower_alpha_is_more_skewed(self):
        # mean per-client label entropy: alpha=0.5 strictly below alpha=1000
        ds = synth_blobs(5, 200, 2, 1.0, seed=8)

        def mean_entropy(alpha, seed):
            parts = dirichlet_partition(ds, PartitionSpec(10, alpha, seed=seed))
            ents = []
            for part in parts:
                if len(part) == 0:
                    continue
                counts = np.bincount(ds.labels[part], minlength=5)
                p = counts / counts.sum()
                nz = p[p > 0]
                ents.append(float(-(nz * np.log(nz)).sum()))
            return float(np.mean(ents))

        skewed = np.mean([mean_entropy(0.5, s) for s in range(20)])
        uniform = np.mean([mean_entropy(1000.0, s) for s in range(20)])
        assert skewed < uniform


class TestSplitLocalTest:
    def shard_dataset(self):
        rng = np.random.default_rng(0)
        return Dataset(rng.normal(size=(10, 3)), np.array([0] * 5 + [1] * 5), 2)

    def test_eight_two_split(self):
        ds = self.shard_dataset()
        shard = split_local_test(range(10), ds, 0.2, seed=0)
        assert len(shard.train) == 8
        assert len(shard.local_test) == 2

    def test_disjoint_by_identity(self):
        ds = self.shard_dataset()
        shard = split_local_test(range(10), ds, 0.3, seed=1)
        assert not set(shard.train_indices) & set(shard.test_indices)
        assert sorted([*shard.train_indices, *shard.test_indices]) == list(range(10))

    def test_stratified_one_of_each(self):
        ds = self.shard_dataset()
        shard = split_local_test(range(10), ds, 0.2, seed=2)
        assert sorted(ds.labels[shard.test_indices].tolist()) == [0, 1]

    def test_singleton_class_goes_to_train(self):
        rng = np.random.default_rng(1)
        ds = Dataset(rng.normal(size=(5, 2)), np.array([0, 0, 0, 0, 1]), 2)
        shard = split_local_test(range(5), ds, 0.25, seed=3)
        assert 1 not in ds.labels[shard.test_indices]
        assert 4 in shard.train_indices

    def test_empty_shard_rejected(self):
        ds = self.shard_dataset()
        with pytest.raises(EmptyShardError):
            split_local_test([], ds, 0.2, seed=0)

    def test_bad_fraction_rejected(self):
        ds = self.shard_dataset()
        with pytest.raises(InvalidInputError):
            split_local_test(range(10), ds, 1.0, seed=0)


class TestBatches:
    def make_shard(self, n=10):
        rng = np.random.default_rng(5)
        ds = Dataset(rng.normal(size=(n, 2)), np.zeros(n, dtype=np.int64), 1)
        return ClientShard(client_id=3, train=ds, local_test=ds)

    def test_batch_sizes(self):
        sizes = [len(b) for b in batches(self.make_shard(), 8, seed=0, epoch=0)]
        assert sizes == [8, 2]

    def test_same_key_same_order(self):
        shard = self.make_shard()
        a = batches(shard, 4, seed=7, epoch=2)
        b = batches(shard, 4, seed=7, epoch=2)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_epochs_reshuffle(self):
        shard = self.make_shard(20)
        differing = 0
        for seed in range(20):
            a = np.concatenate(batches(shard, 8, seed=seed, epoch=0))
            b = np.concatenate(batches(shard, 8, seed=seed, epoch=1))
            if not np.array_equal(a, b):
                differing += 1
        assert differing >= 19

    def test_batches_cover_shard(self):
        shard = self.make_shard(13)
        flat = np.concatenate(batches(shard, 5, seed=1, epoch=0))
        assert sorted(flat.tolist()) == list(range(13))


class TestSubsample:
    def test_keeps_class_balance(self):
        ds = synth_blobs(4, 100, 3, 0.5, seed=0)
        sub = stratified_subsample(ds, 100, seed=1)
        assert len(sub) <= 100
        counts = np.bincount(sub.labels, minlength=4)
        assert counts.min() >= 15

    def test_noop_when_large_enough(self):
        ds = synth_blobs(2, 5, 3, 0.5, seed=0)
        assert stratified_subsample(ds, 100, seed=0) is ds
