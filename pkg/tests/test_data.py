"""Tests for long-tail synthesis, priors, grouping, and embedding I/O."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taillab.data import (
    FEW,
    MANY,
    MEDIUM,
    EmbeddingDataset,
    LongTailSpec,
    assign_groups,
    class_priors,
    load_embeddings,
    make_longtail_counts,
    save_embeddings,
    save_embeddings_csv,
    synth_gaussian_mixture,
)
from taillab.errors import EmbeddingParseError
from taillab.numerics import Rng


class TestLongtailCounts:
    def test_two_class_endpoints(self):
        counts = make_longtail_counts(LongTailSpec(2, 100, 100))
        assert counts.tolist() == [100, 1]

    def test_balanced_degenerate(self):
        counts = make_longtail_counts(LongTailSpec(5, 50, 1))
        assert counts.tolist() == [50] * 5

    def test_geometric_interpolation(self):
        counts = make_longtail_counts(LongTailSpec(3, 400, 4))
        assert counts.tolist() == [400, 200, 100]

    def test_invalid_specs(self):
        with pytest.raises(ValueError):
            LongTailSpec(1, 100, 2)  # one class cannot be imbalanced
        with pytest.raises(ValueError):
            LongTailSpec(5, 10, 100)  # smallest class would be empty
        with pytest.raises(ValueError):
            LongTailSpec(5, 100, 0.5)

    @given(
        st.integers(2, 40),
        st.integers(1, 2000),
        st.floats(1.0, 500.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_counts_non_increasing_and_ratio(self, n_classes, n_max, imbalance):
        if n_max < imbalance:
            return
        counts = make_longtail_counts(LongTailSpec(n_classes, n_max, imbalance))
        assert np.all(np.diff(counts) <= 0)
        assert counts[0] == n_max
        assert counts[-1] >= 1
        # max/min within rounding of the requested ratio
        assert counts[0] / counts[-1] <= imbalance * 1.5 + 1
        assert counts.min() >= np.floor(n_max / imbalance + 0.5) - 1


class TestClassPriors:
    def test_two_class(self):
        assert np.allclose(class_priors([100, 1]), [100 / 101, 1 / 101])

    def test_uniform(self):
        assert np.allclose(class_priors([7, 7, 7]), [1 / 3] * 3)

    def test_normalization(self):
        assert np.allclose(class_priors([400, 200, 100]), [4 / 7, 2 / 7, 1 / 7])

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError):
            class_priors([5, 0, 3])

    @given(st.lists(st.integers(1, 10_000), min_size=1, max_size=64))
    @settings(max_examples=200, deadline=None)
    def test_priors_sum_to_one(self, counts):
        assert abs(class_priors(counts).sum() - 1.0) <= 1e-12


class TestAssignGroups:
    def test_direct_thresholds(self):
        ga = assign_groups([150, 50, 10], many_min=100, few_max=20)
        assert ga.tags == (MANY, MEDIUM, FEW)

    def test_all_many(self):
        ga = assign_groups([500, 400, 300], many_min=100, few_max=20)
        assert ga.tags == (MANY, MANY, MANY)

    def test_boundary_is_medium(self):
        """Count exactly equal to many_min is Medium (strict inequality)."""
        ga = assign_groups([100, 20], many_min=100, few_max=20)
        assert ga.tags == (MEDIUM, MEDIUM)

    def test_threshold_order_enforced(self):
        with pytest.raises(ValueError):
            assign_groups([10], many_min=10, few_max=20)

    @given(st.lists(st.integers(0, 1000), min_size=1, max_size=50))
    @settings(max_examples=200, deadline=None)
    def test_partition(self, counts):
        ga = assign_groups(counts)
        assert len(ga.tags) == len(counts)
        assert all(t in (MANY, MEDIUM, FEW) for t in ga.tags)
        together = sorted(
            list(ga.classes(MANY)) + list(ga.classes(MEDIUM)) + list(ga.classes(FEW))
        )
        assert together == list(range(len(counts)))


class TestSynthGaussianMixture:
    def test_same_seed_bit_identical(self):
        spec = LongTailSpec(5, 60, 10)
        a = synth_gaussian_mixture(spec, 4, 1.0, Rng(3), 10, 10)
        b = synth_gaussian_mixture(spec, 4, 1.0, Rng(3), 10, 10)
        assert a.train == b.train and a.val == b.val and a.test == b.test

    def test_zero_separation_collapses_means(self):
        bench = synth_gaussian_mixture(LongTailSpec(4, 40, 4), 3, 0.0, Rng(0), 5, 5)
        assert np.allclose(bench.true_means, 1.0)

    def test_split_shapes(self):
        bench = synth_gaussian_mixture(LongTailSpec(6, 100, 20), 8, 1.0, Rng(1), 12, 7)
        assert bench.train.class_counts().tolist() == list(bench.counts)
        assert np.all(bench.val.class_counts() == 12)
        assert np.all(bench.test.class_counts() == 7)
        assert bench.train.dim == 8

    def test_features_clamped_non_negative(self):
        bench = synth_gaussian_mixture(LongTailSpec(4, 200, 2), 4, 0.2, Rng(5), 50, 50)
        assert bench.train.features.min() >= 0.0

    def test_empirical_means_match_truth(self):
        """Per-class train mean within 4 sigma / sqrt(N_k) for N_k >= 100."""
        bench = synth_gaussian_mixture(LongTailSpec(5, 2000, 10), 6, 2.0, Rng(7), 10, 10)
        counts = bench.counts
        for k in range(5):
            if counts[k] < 100:
                continue
            rows = bench.train.features[bench.train.labels == k].astype(np.float64)
            sigma = np.sqrt(bench.true_variances[k])
            bound = 4 * sigma / np.sqrt(counts[k])
            assert np.all(np.abs(rows.mean(axis=0) - bench.true_means[k]) <= bound)

    def test_dim_too_small(self):
        with pytest.raises(ValueError):
            synth_gaussian_mixture(LongTailSpec(3, 10, 2), 1, 1.0, Rng(0))


class TestEmbeddingIO:
    def _dataset(self):
        bench = synth_gaussian_mixture(LongTailSpec(4, 30, 6), 5, 1.0, Rng(11), 4, 4)
        return bench.train

    def test_binary_roundtrip_is_identity(self, tmp_path):
        ds = self._dataset()
        path = tmp_path / "x.emb"
        save_embeddings(path, ds)
        assert load_embeddings(path) == ds

    def test_save_is_deterministic(self, tmp_path):
        ds = self._dataset()
        save_embeddings(tmp_path / "a.emb", ds)
        save_embeddings(tmp_path / "b.emb", ds)
        assert (tmp_path / "a.emb").read_bytes() == (tmp_path / "b.emb").read_bytes()

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.emb"
        path.write_bytes(b"")
        with pytest.raises(EmbeddingParseError):
            load_embeddings(path)

    def test_truncated_record_reports_offset(self, tmp_path):
        ds = self._dataset()
        path = tmp_path / "x.emb"
        save_embeddings(path, ds)
        blob = path.read_bytes()
        # keep the header (claims N records) but drop the last record
        record = 4 + 4 * ds.dim
        path.write_bytes(blob[: len(blob) - record])
        with pytest.raises(EmbeddingParseError, match="byte offset"):
            load_embeddings(path)

    def test_label_out_of_range_reports_offset(self, tmp_path):
        ds = self._dataset()
        path = tmp_path / "x.emb"
        save_embeddings(path, ds)
        blob = bytearray(path.read_bytes())
        header = 4 + 12
        blob[header : header + 4] = (999).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(EmbeddingParseError, match="out of range") as err:
            load_embeddings(path)
        assert err.value.offset == header

    def test_trailing_bytes_rejected(self, tmp_path):
        ds = self._dataset()
        path = tmp_path / "x.emb"
        save_embeddings(path, ds)
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(EmbeddingParseError, match="trailing"):
            load_embeddings(path)

    def test_csv_roundtrip(self, tmp_path):
        ds = self._dataset()
        path = tmp_path / "x.csv"
        save_embeddings_csv(path, ds)
        loaded = load_embeddings(path)
        assert loaded.n_classes == ds.n_classes
        assert np.array_equal(loaded.labels, ds.labels)
        assert np.allclose(loaded.features, ds.features, atol=1e-6)

    def test_csv_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("foo,bar\n1,2\n")
        with pytest.raises(EmbeddingParseError):
            load_embeddings(path)

    def test_csv_ragged_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("label,f0,f1\n0,1.0\n")
        with pytest.raises(EmbeddingParseError, match="line 2"):
            load_embeddings(path)


class TestEmbeddingDataset:
    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            EmbeddingDataset(np.zeros((2, 3), dtype=np.float32), np.array([0, 5]), 3)

    def test_canonicalized_sorts_counts(self):
        feats = np.zeros((6, 2), dtype=np.float32)
        labels = np.array([2, 2, 2, 0, 1, 1])
        ds = EmbeddingDataset(feats, labels, 3).canonicalized()
        counts = ds.class_counts()
        assert np.all(np.diff(counts) <= 0)
        assert counts.tolist() == [3, 2, 1]
