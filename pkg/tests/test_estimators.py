"""The sklearn facade: protocol conformance and behavior."""

from __future__ import annotations

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dilationnet.checkpoint import checkpoint_from_net
from dilationnet.data import partition_batches, split, synth_dataset
from dilationnet.estimators import DilationNetClassifier, FusionClassifier
from dilationnet.fusion import extract_backbone
from dilationnet.validation import check_binary_labels, check_image_batch


def collect_arrays(n=64, resolution=32, seed=7):
    ds = synth_dataset(n, seed=seed)
    ds = ds.with_manifest(split(ds.manifest, seed=seed))
    xs, ys = [], []
    for batch in partition_batches(ds, "train", resolution, 16):
        xs.append(batch.images)
        ys.append(batch.labels)
    return np.concatenate(xs), np.concatenate(ys)


@pytest.fixture(scope="module")
def xy32():
    return collect_arrays(n=64, resolution=32)


@pytest.fixture(scope="module")
def fitted(xy32):
    x, y = xy32
    est = DilationNetClassifier(variant="A", epochs=6, batch_size=16, seed=3)
    return est.fit(x, y)


@pytest.fixture(scope="module")
def backbones(xy32):
    x32, y = xy32
    a = DilationNetClassifier(variant="A", epochs=4, seed=1).fit(x32, y)
    ckpt = checkpoint_from_net(a.net_)
    return {"A": extract_backbone(ckpt)}, x32, y


class TestValidationHelpers:
    def test_image_batch_happy_path(self):
        arr = check_image_batch(np.zeros((2, 8, 8, 3)), resolution=8)
        assert arr.dtype == np.float32

    def test_image_batch_rejections(self):
        with pytest.raises(ValueError, match="4-D"):
            check_image_batch(np.zeros((8, 8, 3)))
        with pytest.raises(ValueError, match="3 channels"):
            check_image_batch(np.zeros((1, 8, 8, 4)))
        with pytest.raises(ValueError, match="square"):
            check_image_batch(np.zeros((1, 8, 6, 3)))
        with pytest.raises(ValueError, match="expects"):
            check_image_batch(np.zeros((1, 8, 8, 3)), resolution=16)
        with pytest.raises(ValueError, match="non-finite"):
            check_image_batch(np.full((1, 8, 8, 3), np.nan))
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            check_image_batch(np.full((1, 8, 8, 3), 9.0))
        with pytest.raises(ValueError, match="empty"):
            check_image_batch(np.zeros((0, 8, 8, 3)))

    def test_labels(self):
        assert check_binary_labels([0, 1, 1], 3).dtype == np.float32
        with pytest.raises(ValueError, match="labels"):
            check_binary_labels([0, 2], 2)
        with pytest.raises(ValueError, match="expected 3"):
            check_binary_labels([0, 1], 3)


class TestDilationNetClassifier:
    def test_sklearn_protocol(self):
        est = DilationNetClassifier(variant="B", epochs=2, seed=9)
        params = est.get_params()
        assert params["variant"] == "B" and params["seed"] == 9
        twin = clone(est)
        assert twin.get_params() == params

    def test_fit_learns_the_synthetic_task(self, fitted, xy32):
        x, y = xy32
        assert fitted.score(x, y) >= 0.9

    def test_predict_shapes_and_classes(self, fitted, xy32):
        x, _ = xy32
        proba = fitted.predict_proba(x)
        assert proba.shape == (x.shape[0], 2)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)
        pred = fitted.predict(x)
        assert set(np.unique(pred)) <= {0, 1}
        np.testing.assert_array_equal(fitted.classes_, [0, 1])

    def test_transform_yields_backbone_features(self, fitted, xy32):
        x, _ = xy32
        feats = fitted.transform(x[:5])
        assert feats.shape == (5, 96)

    def test_unfitted_rejected(self):
        est = DilationNetClassifier()
        with pytest.raises(NotFittedError):
            est.predict(np.zeros((1, 32, 32, 3)))

    def test_wrong_resolution_rejected(self, fitted):
        with pytest.raises(ValueError, match="expects"):
            fitted.predict(np.zeros((1, 64, 64, 3)))

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError, match="variant"):
            DilationNetClassifier(variant="Z").fit(
                np.zeros((2, 32, 32, 3)), [0, 1])

    def test_deterministic_given_seed(self, xy32):
        x, y = xy32
        a = DilationNetClassifier(epochs=1, seed=5).fit(x, y)
        b = DilationNetClassifier(epochs=1, seed=5).fit(x, y)
        np.testing.assert_array_equal(a.predict_proba(x), b.predict_proba(x))


class TestFusionClassifier:
    def test_fit_predict_and_freeze(self, backbones, xy32):
        import copy

        bbs, x32, y = backbones
        x64, _ = collect_arrays(n=64, resolution=64)
        b = DilationNetClassifier(variant="B", epochs=4, seed=2).fit(x64, y)
        members = {"A": bbs["A"], "B": extract_backbone(checkpoint_from_net(b.net_))}
        before = {v: copy.deepcopy(bb.net.params["stem1.weight"].data)
                  for v, bb in members.items()}

        est = FusionClassifier(backbones=members, epochs=8, batch_size=16,
                               seed=4)
        est.fit(x32, y)
        assert est.score(x32, y) >= 0.9
        assert est.transform(x32[:3]).shape == (3, 96 + 128)
        for v, bb in members.items():
            np.testing.assert_array_equal(
                bb.net.params["stem1.weight"].data, before[v])

        proba = est.predict_proba(x32[:4])
        assert proba.shape == (4, 2)

    def test_requires_two_backbones(self, backbones):
        bbs, x32, y = backbones
        est = FusionClassifier(backbones=bbs, epochs=1)
        with pytest.raises(ValueError, match="at least two"):
            est.fit(x32, y)
        with pytest.raises(ValueError, match="at least two"):
            FusionClassifier(backbones=None, epochs=1).fit(x32, y)

    def test_mislabeled_backbone_caught(self, backbones):
        bbs, x32, y = backbones
        est = FusionClassifier(backbones={"A": bbs["A"], "B": bbs["A"]})
        with pytest.raises(ValueError, match="variant-A"):
            est.fit(x32, y)

    def test_unfitted_rejected(self):
        with pytest.raises(NotFittedError):
            FusionClassifier().predict(np.zeros((1, 32, 32, 3)))
