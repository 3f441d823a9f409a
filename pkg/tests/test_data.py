import numpy as np
import pytest
from loguru import logger

from models import PartitionScheme
from core.data import (
    AlignmentError,
    Dataset,
    PartitionError,
    align_vertical,
    label_skew_stats,
    load_csv,
    partition,
    partition_iid,
    partition_label_skew,
    partition_quantity_skew,
    save_csv,
    split_train_test_val,
    split_vertical,
    synth_dataset,
)


class TestSplit:
    def test_sizes_and_disjointness(self):
        ds = synth_dataset("blobs-classification", 1200, 3, classes=2, seed=1)
        ds.keys = [f"r{i}" for i in range(len(ds))]
        train, test, val = split_train_test_val(ds, seed=0)
        assert (len(train), len(test), len(val)) == (999, 99, 102)
        keys = train.keys + test.keys + val.keys
        assert sorted(keys) == sorted(ds.keys)

    def test_seed_changes_split(self, blobs):
        a, _, _ = split_train_test_val(blobs, 0)
        b, _, _ = split_train_test_val(blobs, 1)
        assert not np.array_equal(a.features, b.features)

    def test_too_small(self):
        ds = synth_dataset("blobs-classification", 11, 2, seed=0)
        with pytest.raises(ValueError):
            split_train_test_val(ds, 0)


class TestIid:
    def test_balanced_partition(self, blobs):
        spec = partition_iid(blobs, 7, seed=3)
        spec.validate(len(blobs))
        assert max(spec.sizes) - min(spec.sizes) <= 1

    def test_clients_keep_global_class_mix(self):
        ds = synth_dataset("blobs-classification", 10_000, 2, classes=4, seed=5)
        global_share = ds.class_histogram() / len(ds)
        for shard in partition_iid(ds, 5, seed=1).shards(ds):
            share = shard.class_histogram() / len(shard)
            assert np.all(np.abs(share - global_share) <= 0.05)

    def test_more_clients_than_records(self):
        ds = synth_dataset("blobs-classification", 12, 2, seed=0)
        with pytest.raises(PartitionError):
            partition_iid(ds, 13, 0)


class TestLabelSkew:
    def test_no_empty_clients(self, blobs):
        spec = partition_label_skew(blobs, 0.1, 5, seed=2)
        spec.validate(len(blobs))
        assert min(spec.sizes) > 0

    def test_small_alpha_is_more_skewed(self, blobs):
        skewed = [label_skew_stats(partition_label_skew(blobs, 0.1, 5, s), blobs.labels)
                  for s in range(5)]
        mixed = [label_skew_stats(partition_label_skew(blobs, 100.0, 5, s), blobs.labels)
                 for s in range(5)]
        assert np.mean(skewed) > np.mean(mixed) + 0.2

    def test_huge_alpha_matches_global_mix(self):
        ds = synth_dataset("blobs-classification", 10_000, 2, classes=10, seed=3)
        global_share = ds.class_histogram() / len(ds)
        for shard in partition_label_skew(ds, 1e6, 5, seed=0).shards(ds):
            share = shard.class_histogram() / len(shard)
            np.testing.assert_allclose(share, global_share, rtol=0.02)

    def test_strong_skew_on_ten_classes(self):
        ds = synth_dataset("blobs-classification", 2000, 2, classes=10, seed=3)
        shares = [label_skew_stats(partition_label_skew(ds, 0.2, 5, s), ds.labels)
                  for s in range(10)]
        assert np.mean(shares) > 0.5

    def test_skew_is_monotone_in_alpha(self, blobs):
        def mean_share(alpha):
            return np.mean([
                label_skew_stats(partition_label_skew(blobs, alpha, 5, s), blobs.labels)
                for s in range(100)
            ])

        assert mean_share(0.2) > mean_share(1.0)

    def test_needs_classes(self, regression):
        with pytest.raises(PartitionError):
            partition_label_skew(regression, 0.5, 3, 0)

    def test_partition_logs_class_share(self, blobs):
        messages = []
        sink = logger.add(messages.append, level="DEBUG", format="{message}")
        try:
            partition(blobs, PartitionScheme.LABEL_SKEW, 4, 0.3, 9)
        finally:
            logger.remove(sink)
        assert any("mean max class share" in m for m in messages)

    def test_deterministic(self, blobs):
        a = partition(blobs, PartitionScheme.LABEL_SKEW, 4, 0.3, 9)
        b = partition(blobs, PartitionScheme.LABEL_SKEW, 4, 0.3, 9)
        for x, y in zip(a.client_indices, b.client_indices):
            np.testing.assert_array_equal(x, y)


class TestQuantitySkew:
    def test_explicit_weights(self):
        ds = synth_dataset("blobs-classification", 100, 2, classes=2, seed=0)
        spec = partition_quantity_skew(ds, 1.0, 3, 0, weights=[0.5, 0.25, 0.25])
        assert spec.sizes == [50, 25, 25]

    def test_shards_keep_class_mix(self, blobs):
        spec = partition_quantity_skew(blobs, 1.0, 3, 0, weights=[0.5, 0.3, 0.2])
        global_share = blobs.class_histogram() / len(blobs)
        for shard in spec.shards(blobs):
            expected = global_share * len(shard)
            assert np.all(np.abs(shard.class_histogram() - expected) <= 2)

    def test_dirichlet_sizes(self, blobs):
        spec = partition(blobs, PartitionScheme.QUANTITY_SKEW, 5, 0.5, 4)
        assert sum(spec.sizes) == len(blobs) and min(spec.sizes) > 0

    def test_power_law_largest_client(self, blobs):
        spec = partition(blobs, PartitionScheme.POWER_LAW, 5, 1.0, 4)
        harmonic = sum(1 / i for i in range(1, 6))
        assert abs(max(spec.sizes) - len(blobs) / harmonic) <= 1

    def test_huge_alpha_sizes(self):
        ds = synth_dataset("blobs-classification", 1000, 2, classes=2, seed=0)
        spec = partition_quantity_skew(ds, 1e6, 5, seed=2)
        np.testing.assert_allclose(spec.sizes, 200, rtol=0.02)

    def test_bad_alpha(self, blobs):
        with pytest.raises(PartitionError):
            partition(blobs, PartitionScheme.QUANTITY_SKEW, 5, 0.0, 0)


class TestVertical:
    def _parties(self):
        a = Dataset(
            np.arange(10.0).reshape(5, 2), np.array([0, 1, 0, 1, 0]),
            keys=["k0", "k1", "k2", "k3", "k4"], n_classes=2,
        )
        b = Dataset(
            np.array([[1.0], [3.0], [5.0]]), np.zeros(3),
            keys=["k1", "k3", "k5"], n_classes=2,
        )
        return a, b

    def test_outer_join_pads_with_zeros(self):
        a, b = self._parties()
        aligned = align_vertical(a, b)
        assert aligned.keys == ["k0", "k1", "k2", "k3", "k4", "k5"]
        np.testing.assert_array_equal(aligned.features[:, 2], [0, 1, 0, 3, 0, 5])
        np.testing.assert_array_equal(aligned.features[5, :2], [0, 0])
        assert np.isnan(aligned.labels[5])
        assert aligned.party_slices() == [slice(0, 2), slice(2, 3)]

    def test_to_dataset_keeps_labeled_rows(self):
        a, b = self._parties()
        ds = align_vertical(a, b).to_dataset()
        assert len(ds) == 5
        np.testing.assert_array_equal(ds.labels, [0, 1, 0, 1, 0])
        assert ds.labels.dtype == np.int64

    def test_alignment_is_symmetric(self):
        a, b = self._parties()
        ab = align_vertical(a, b, label_owner=0)
        ba = align_vertical(b, a, label_owner=1)
        assert set(ab.keys) == set(ba.keys)
        d_a, d_b = ab.widths
        rows_ba = {k: ba.features[i] for i, k in enumerate(ba.keys)}
        for i, key in enumerate(ab.keys):
            swapped = np.concatenate([rows_ba[key][d_b:], rows_ba[key][:d_b]])
            np.testing.assert_array_equal(ab.features[i], swapped)
        labels_ba = dict(zip(ba.keys, ba.labels))
        for key, label in zip(ab.keys, ab.labels):
            np.testing.assert_array_equal(label, labels_ba[key])

    def test_duplicate_keys(self):
        a, b = self._parties()
        b.keys = ["k1", "k1", "k5"]
        with pytest.raises(AlignmentError):
            align_vertical(a, b)

    def test_missing_keys(self, blobs):
        with pytest.raises(AlignmentError):
            align_vertical(blobs, blobs)

    def test_split_vertical_overlap(self, blobs):
        party_a, party_b = split_vertical(blobs, 3, overlap=0.5, seed=1)
        assert party_a.n_features == 3 and party_b.n_features == 1
        assert len(party_b) == 150
        assert set(party_b.keys) <= set(party_a.keys)
        aligned = align_vertical(party_a, party_b)
        assert len(aligned.keys) == len(blobs)
        assert aligned.present[:, 1].sum() == 150


class TestWorkloads:
    def test_regression_meta(self, regression):
        assert regression.meta["true_weights"].shape == (3,)
        assert not regression.is_classification

    def test_noiseless_regression_recovers_weights(self):
        ds = synth_dataset("linear-regression", 200, 5, noise=0.0, seed=2)
        w, *_ = np.linalg.lstsq(ds.features, ds.labels, rcond=None)
        np.testing.assert_allclose(w, ds.meta["true_weights"], atol=1e-8)

    def test_noiseless_blobs_are_linearly_separable(self):
        ds = synth_dataset("blobs-classification", 300, 5, classes=4, noise=0.0, seed=3,
                           separation=10.0)
        x = np.hstack([ds.features, np.ones((len(ds), 1))])
        w, *_ = np.linalg.lstsq(x, np.eye(4)[ds.labels], rcond=None)
        assert np.mean(np.argmax(x @ w, axis=1) == ds.labels) == 1.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            synth_dataset("spirals", 10, 2)

    def test_csv_round_trip(self, tmp_path, blobs):
        blobs.keys = [f"k{i}" for i in range(len(blobs))]
        path = tmp_path / "blobs.csv"
        save_csv(blobs, str(path))
        loaded = load_csv(str(path))
        np.testing.assert_allclose(loaded.features, blobs.features)
        np.testing.assert_array_equal(loaded.labels, blobs.labels)
        assert loaded.keys == blobs.keys and loaded.n_classes == 3
