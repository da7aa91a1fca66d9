import numpy as np
import pytest
from sklearn.base import clone

from vitsplit.estimator import SplitViTClassifier


@pytest.fixture(scope="module")
def fitted(tiny_data):
    X, y = tiny_data
    clf = SplitViTClassifier(
        n_devices=2, budget_mib=0.075, device_memory_mib=1, device_energy_gflop=0.01,
        head_lr=1e-2, fusion_lr=1e-2, fusion_epochs=20, batch_size=32, calib_size=16, retrain=False,
    )
    return clf.fit(X, y)


class TestSplitViTClassifier:
    def test_params_roundtrip(self):
        clf = SplitViTClassifier(n_devices=3, budget_mib=50.0)
        assert clone(clf).get_params() == clf.get_params()
        assert clf.set_params(n_devices=4).n_devices == 4

    def test_fitted_attributes(self, fitted):
        assert fitted.split_.hp == (2, 1)
        assert set(fitted.plan_.mapping) == {0, 1}
        assert fitted.classes_.tolist() == list(range(8))

    def test_accuracy(self, fitted, tiny_data):
        X, y = tiny_data
        assert fitted.score(X, y) >= 0.85

    def test_predict_proba(self, fitted, tiny_data):
        proba = fitted.predict_proba(tiny_data[0][:5])
        assert proba.shape == (5, 8)
        assert np.allclose(proba.sum(axis=1), 1.0, atol=1e-5)

    def test_verify(self, fitted, tiny_data):
        report = fitted.verify(*tiny_data, required_accuracy=0.85)
        assert report.all_passed, str(report)
        assert fitted.verify(*tiny_data, required_accuracy=1.01).failed()[0].name == "accuracy"

    def test_rejects_wrong_image_shape(self, fitted):
        with pytest.raises(ValueError):
            fitted.predict(np.zeros((2, 3, 16, 16)))

    def test_rejects_mismatched_labels(self, tiny_data):
        with pytest.raises(ValueError):
            SplitViTClassifier().fit(tiny_data[0], tiny_data[1][:-1])
