import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flexchill.data import (
    ClientPartition,
    DataFormatError,
    Dataset,
    gen_gaussian_blobs,
    load_csv,
    load_idx,
    partition_dirichlet,
    partition_iid,
    partition_shards,
    train_eval_split,
    write_idx,
)
from flexchill.models import ModelSpec, build_model
from flexchill.nn import Tape, ce_loss_t, sgd_step


def labels_only(counts) -> Dataset:
    """Featureless dataset with ``counts[k]`` samples of class k."""
    labels = np.repeat(np.arange(len(counts)), counts)
    return Dataset(np.zeros((labels.size, 1)), labels, len(counts))


def class_histograms(ds, part):
    return np.array([np.bincount(ds.labels[a], minlength=ds.num_classes) for a in part.assignments])


class TestDataset:
    def test_label_range(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 1)), np.array([0, 3]), 3)

    def test_empty(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((0, 1)), np.array([], dtype=int), 2)

    def test_subset(self):
        ds = labels_only([2, 3])
        sub = ds.subset([4, 0])
        assert sub.labels.tolist() == [1, 0]
        assert ds.subset([]) is None


class TestIdx:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(3, 28, 28), dtype=np.uint8)
        labels = np.array([7, 0, 3], dtype=np.uint8)
        write_idx(images, labels, tmp_path / "img", tmp_path / "lab")
        ds = load_idx(tmp_path / "img", tmp_path / "lab", num_classes=10)
        assert ds.features.shape == (3, 1, 28, 28)
        np.testing.assert_array_equal(ds.features[:, 0] * 255, images)
        assert ds.labels.tolist() == [7, 0, 3]
        assert 0.0 <= ds.features.min() and ds.features.max() <= 1.0

    def _pair(self, tmp_path, n_img=2, n_lab=2):
        write_idx(np.zeros((n_img, 4, 4), np.uint8), np.zeros(n_lab, np.uint8), tmp_path / "img", tmp_path / "lab")
        return tmp_path / "img", tmp_path / "lab"

    def test_bad_image_magic(self, tmp_path):
        img, lab = self._pair(tmp_path)
        img.write_bytes(struct.pack(">I", 0x00000801) + img.read_bytes()[4:])
        with pytest.raises(DataFormatError, match="img"):
            load_idx(img, lab)

    def test_bad_label_magic(self, tmp_path):
        img, lab = self._pair(tmp_path)
        lab.write_bytes(struct.pack(">I", 0x00000803) + lab.read_bytes()[4:])
        with pytest.raises(DataFormatError, match="lab"):
            load_idx(img, lab)

    def test_truncated_payload(self, tmp_path):
        img, lab = self._pair(tmp_path)
        img.write_bytes(img.read_bytes()[:-3])
        with pytest.raises(DataFormatError, match="truncated"):
            load_idx(img, lab)

    def test_count_mismatch(self, tmp_path):
        img, lab = self._pair(tmp_path, n_img=3, n_lab=2)
        with pytest.raises(DataFormatError, match="lab"):
            load_idx(img, lab)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError, match="nope"):
            load_idx(tmp_path / "nope", tmp_path / "nope2")


class TestCsv:
    def test_basic(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,2,0\n3,4,1\n")
        ds = load_csv(p, 2)
        assert len(ds) == 2
        np.testing.assert_array_equal(ds.features, [[1, 2], [3, 4]])
        assert ds.labels.tolist() == [0, 1]

    def test_empty_file(self, tmp_path):
        p = tmp_path / "e.csv"
        p.write_text("")
        with pytest.raises(DataFormatError):
            load_csv(p, 2)

    def test_label_out_of_range(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,2,0\n3,4,5\n")
        with pytest.raises(DataFormatError, match=":2:"):
            load_csv(p, 2)

    def test_ragged(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,2,0\n3,1\n")
        with pytest.raises(DataFormatError, match=":2:"):
            load_csv(p, 2)

    def test_non_numeric(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,2,0\n1,2,0\nx,4,1\n")
        with pytest.raises(DataFormatError, match=":3:"):
            load_csv(p, 2)

    def test_fractional_label(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("1,2,0.5\n")
        with pytest.raises(DataFormatError, match=":1:"):
            load_csv(p, 2)


class TestBlobs:
    def test_balanced(self):
        ds = gen_gaussian_blobs(3, 10, 2, 0.5, seed=0)
        assert len(ds) == 30
        assert ds.class_counts().tolist() == [10, 10, 10]

    def test_reproducible(self):
        a = gen_gaussian_blobs(4, 5, 3, 1.0, seed=7)
        b = gen_gaussian_blobs(4, 5, 3, 1.0, seed=7)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_splits_share_centers(self):
        a = gen_gaussian_blobs(3, 2000, 4, 0.1, seed=1, split="train")
        b = gen_gaussian_blobs(3, 2000, 4, 0.1, seed=1, split="test")
        assert not np.array_equal(a.features, b.features)
        for k in range(3):
            np.testing.assert_allclose(
                a.features[a.labels == k].mean(0), b.features[b.labels == k].mean(0), atol=0.02
            )

    def test_tiny_spread_is_linearly_separable(self):
        ds = gen_gaussian_blobs(4, 25, 2, 1e-3, seed=0)
        model = build_model(ModelSpec("logreg_2d", num_classes=4), 0)
        for step in range(300):
            with Tape() as tape:
                loss = ce_loss_t(model.forward(ds.features), ds.labels, 1.0)
            tape.backward(loss)
            sgd_step(model.params, 0.5)
        assert np.mean(model.logits(ds.features).argmax(1) == ds.labels) == 1.0

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            gen_gaussian_blobs(0, 5, 2, 1.0, seed=0)


class TestShards:
    def test_sizes(self):
        ds = labels_only([1000] * 10)
        part = partition_shards(ds, 10, 200, 2, seed=0)
        assert part.sizes().tolist() == [400] * 10
        part.validate(len(ds))

    def test_single_class_clients(self):
        ds = labels_only([50] * 4)
        part = partition_shards(ds, 4, 50, 1, seed=3)
        hist = class_histograms(ds, part)
        assert ((hist > 0).sum(axis=1) == 1).all()

    def test_shards_are_label_sorted_runs(self):
        ds = labels_only([30, 30])
        part = partition_shards(ds, 3, 20, 1, seed=0)
        for a in part.assignments:
            assert np.ptp(np.diff(a)) == 0 or len(set(ds.labels[a])) <= 2

    def test_insufficient_data(self):
        ds = labels_only([10, 10])
        with pytest.raises(ValueError, match="needs 30 samples.*has 20"):
            partition_shards(ds, 3, 5, 2, seed=0)

    def test_leftover_unassigned(self):
        ds = labels_only([7, 7])
        part = partition_shards(ds, 2, 3, 2, seed=0)
        assert part.sizes().sum() == 12


class TestDirichlet:
    def test_counts_follow_floor_formula(self):
        ds = labels_only([100, 37, 250])
        part = partition_dirichlet(ds, 4, 0.7, seed=2)
        hist = class_histograms(ds, part)
        expected = np.floor(ds.class_counts()[None, :] * part.proportions).astype(int)
        np.testing.assert_array_equal(hist, expected)

    def test_floor_example(self):
        assert int(np.floor(100 * 0.237)) == 23

    def test_columns_normalized(self):
        ds = labels_only([20] * 5)
        part = partition_dirichlet(ds, 6, 0.3, seed=1)
        np.testing.assert_allclose(part.proportions.sum(axis=0), 1.0, atol=1e-12)
        assert class_histograms(ds, part).sum(axis=0).max() <= 20

    def test_rejects_bad_alpha(self):
        with pytest.raises(ValueError):
            partition_dirichlet(labels_only([5, 5]), 2, 0.0, seed=0)

    def test_near_uniform_at_large_alpha(self):
        ds = labels_only([1000] * 10)
        for seed in range(5):
            hist = class_histograms(ds, partition_dirichlet(ds, 10, 1000.0, seed))
            expected = hist.sum(axis=1, keepdims=True) / 10
            assert np.abs(hist / expected - 1).max() < 0.2

    def test_concentrated_at_small_alpha(self):
        ds = labels_only([600] * 10)
        medians = []
        for seed in range(20):
            hist = class_histograms(ds, partition_dirichlet(ds, 10, 0.1, seed))
            share = hist / np.maximum(hist.sum(axis=1, keepdims=True), 1)
            medians.append(np.median((share >= 0.05).sum(axis=1)))
        assert np.median(medians) <= 3

    def test_realized_proportions_converge(self):
        ds = labels_only([10_000] * 10)
        part = partition_dirichlet(ds, 10, 0.5, seed=0)
        hist = class_histograms(ds, part)
        for i in range(10):
            realized = hist[i] / hist[i].sum()
            target = part.proportions[i] / part.proportions[i].sum()
            assert np.abs(np.cumsum(realized) - np.cumsum(target)).max() < 0.05


@st.composite
def partition_configs(draw):
    counts = draw(st.lists(st.integers(0, 40), min_size=2, max_size=6))
    counts[0] = max(counts[0], 1)
    clients = draw(st.integers(1, 8))
    seed = draw(st.integers(0, 2**31))
    return labels_only(counts), clients, seed


class TestPartitionProperties:
    @given(partition_configs(), st.floats(0.05, 50.0))
    def test_dirichlet_valid_and_deterministic(self, cfg, alpha):
        ds, clients, seed = cfg
        a = partition_dirichlet(ds, clients, alpha, seed)
        a.validate(len(ds))
        b = partition_dirichlet(ds, clients, alpha, seed)
        for x, y in zip(a.assignments, b.assignments):
            np.testing.assert_array_equal(x, y)

    @given(partition_configs(), st.integers(1, 10), st.integers(1, 3))
    def test_shards_valid_and_deterministic(self, cfg, shard_size, spc):
        ds, clients, seed = cfg
        if clients * spc * shard_size > len(ds):
            with pytest.raises(ValueError):
                partition_shards(ds, clients, shard_size, spc, seed)
            return
        a = partition_shards(ds, clients, shard_size, spc, seed)
        a.validate(len(ds))
        assert set(a.sizes().tolist()) == {shard_size * spc}
        b = partition_shards(ds, clients, shard_size, spc, seed)
        for x, y in zip(a.assignments, b.assignments):
            np.testing.assert_array_equal(x, y)

    @given(partition_configs())
    def test_iid_covers_everything(self, cfg):
        ds, clients, seed = cfg
        part = partition_iid(ds, clients, seed)
        part.validate(len(ds))
        assert part.sizes().sum() == len(ds)

    def test_validate_catches_overlap(self):
        with pytest.raises(ValueError):
            ClientPartition([np.array([0, 1]), np.array([1])]).validate(3)

    def test_validate_catches_range(self):
        with pytest.raises(ValueError):
            ClientPartition([np.array([5])]).validate(3)


def test_train_eval_split():
    idx = np.arange(10, 20)
    tr, ev = train_eval_split(idx, 0.2, np.random.default_rng(0))
    assert len(ev) == 2 and len(tr) == 8
    assert sorted(np.concatenate([tr, ev]).tolist()) == idx.tolist()
    tr, ev = train_eval_split(idx, 0.0, np.random.default_rng(0))
    assert len(ev) == 0
