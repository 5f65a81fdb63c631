"""Synthetic datasets: determinism, learnability and label coverage."""

import numpy as np
import pytest

from mssit.synth import (
    assign_splits,
    real_sh_basis,
    regression_samples,
    segmentation_samples,
    synthesise,
)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestDeterminism:
    @pytest.mark.parametrize("kind", ["regression", "segmentation"])
    def test_byte_identical(self, tmp_path, kind):
        synthesise(kind, 10, 7, tmp_path / "a", n_classes=5)
        synthesise(kind, 10, 7, tmp_path / "b", n_classes=5)
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert a == b and "manifest.csv" in a

    def test_seed_matters(self):
        assert not np.array_equal(regression_samples(1, 1)[0].data, regression_samples(1, 2)[0].data)


class TestRegression:
    def test_ridge_baseline(self):
        """Ridge regression on per-channel vertex means reaches r > 0.5 on held-out samples."""
        samples = regression_samples(200, 3)
        x = np.array([s.data.mean(axis=0) for s in samples])
        y = np.array([s.target for s in samples])
        xtr, xte, ytr, yte = x[:150], x[150:], y[:150], y[150:]
        mu, sd = xtr.mean(0), xtr.std(0)
        a = np.hstack([(xtr - mu) / sd, np.ones((150, 1))])
        w = np.linalg.solve(a.T @ a + 1e-2 * np.eye(a.shape[1]), a.T @ ytr)
        pred = np.hstack([(xte - mu) / sd, np.ones((50, 1))]) @ w
        assert np.corrcoef(pred, yte)[0, 1] > 0.5

    def test_shapes_and_scale(self):
        s = regression_samples(20, 0)
        assert s[0].data.shape == (40962, 4) and s[0].data.dtype == np.float32
        t = np.array([x.target for x in s])
        assert 25 < t.mean() < 45 and 1 < t.std() < 6

    def test_basis_near_orthonormal(self):
        b = real_sh_basis(2, 4)
        assert b.shape == (2562, 9)
        gram = b.T @ b / b.shape[0] * 4 * np.pi
        assert np.max(np.abs(gram - np.eye(9))) < 0.05

    def test_invalid_n(self):
        with pytest.raises(ValueError):
            regression_samples(0, 0)


class TestSegmentation:
    @pytest.mark.parametrize("k", [2, 8, 16])
    def test_all_classes_present(self, k):
        for s in segmentation_samples(3, k, n_classes=k):
            assert np.array_equal(np.unique(s.labels), np.arange(k))

    def test_invalid_kind(self, tmp_path):
        with pytest.raises(ValueError):
            synthesise("classification", 2, 0, tmp_path)


class TestSplits:
    def test_fractions_and_train_nonempty(self):
        tags = assign_splits(200, 0)
        assert tags.count("train") == 160 and tags.count("val") == 20 and tags.count("test") == 20
        assert assign_splits(1, 0) == ["train"]
        assert assign_splits(2, 0).count("train") >= 1
