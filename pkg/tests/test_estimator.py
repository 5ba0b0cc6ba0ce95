"""Estimator facade tests: sklearn contract, validation, and learning."""

import numpy as np
import pytest
from sklearn.base import clone

from immunity.data import synth_shapes
from immunity.estimator import ImmunityClassifier
from immunity.validation import check_image_batch, check_labels


@pytest.fixture(scope="module")
def shapes():
    ds = synth_shapes(240, 3, 16, seed=21)
    return ds.images, ds.labels


def small_clf(**overrides):
    params = dict(n_experts=2, epochs=4, batch_size=16, beta=0.0, gamma=0.0,
                  learning_rate=0.005, momentum=0.9, random_state=0)
    params.update(overrides)
    return ImmunityClassifier(**params)


class TestSklearnContract:
    def test_get_set_params_round_trip(self):
        clf = small_clf()
        params = clf.get_params()
        assert params["n_experts"] == 2
        clf.set_params(epochs=7, beta=0.5)
        assert clf.epochs == 7 and clf.beta == 0.5

    def test_clone_produces_unfitted_copy(self, shapes):
        X, y = shapes
        clf = small_clf(epochs=1).fit(X, y)
        fresh = clone(clf)
        assert fresh.get_params() == clf.get_params()
        with pytest.raises(RuntimeError, match="not fitted"):
            fresh.predict(X[:2])

    def test_predict_before_fit_rejected(self, shapes):
        X, _ = shapes
        with pytest.raises(RuntimeError, match="not fitted"):
            small_clf().predict(X[:2])


class TestFitPredict:
    def test_learns_shapes(self, shapes):
        X, y = shapes
        clf = small_clf(epochs=8).fit(X, y)
        assert clf.score(X, y) >= 0.9
        assert set(clf.classes_.tolist()) == {0, 1, 2}

    def test_predict_proba_rows_sum_to_one(self, shapes):
        X, y = shapes
        clf = small_clf(epochs=1).fit(X, y)
        probs = clf.predict_proba(X[:10])
        assert probs.shape == (10, 3)
        assert np.abs(probs.sum(axis=1) - 1.0).max() <= 1e-9

    def test_deterministic_given_random_state(self, shapes):
        X, y = shapes
        a = small_clf(epochs=2).fit(X, y)
        b = small_clf(epochs=2).fit(X, y)
        assert a.model_.param_checksum() == b.model_.param_checksum()
        assert np.array_equal(a.predict(X[:20]), b.predict(X[:20]))

    def test_single_expert_baseline(self, shapes):
        X, y = shapes
        clf = small_clf(n_experts=1, epochs=8).fit(X, y)
        assert clf.model_.n_experts == 1
        assert clf.score(X, y) >= 0.9

    def test_history_records_losses(self, shapes):
        X, y = shapes
        clf = small_clf(epochs=4).fit(X, y)
        assert len(clf.history_) == 4
        first = np.mean([b.ce for b in clf.history_[0]])
        last = np.mean([b.ce for b in clf.history_[-1]])
        assert last < first


class TestValidationHelpers:
    def test_rejects_non_4d(self):
        with pytest.raises(ValueError, match="4-D"):
            check_image_batch(np.zeros((3, 16, 16)))

    def test_rejects_out_of_range_pixels(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            check_image_batch(np.full((1, 3, 4, 4), 1.5))

    def test_rejects_non_finite(self):
        bad = np.zeros((1, 1, 2, 2))
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            check_image_batch(bad)

    def test_rejects_empty_batch(self):
        with pytest.raises(ValueError, match="empty"):
            check_image_batch(np.zeros((0, 3, 4, 4)))

    def test_labels_length_checked(self):
        with pytest.raises(ValueError, match="entries"):
            check_labels([0, 1], 3)

    def test_labels_must_be_integers(self):
        with pytest.raises(ValueError, match="integer"):
            check_labels(np.array([0.5, 1.0]), 2)
        assert check_labels(np.array([0.0, 1.0]), 2).dtype == np.int64

    def test_negative_labels_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            check_labels(np.array([0, -1]), 2)

    def test_estimator_validates_inputs(self, shapes):
        X, y = shapes
        clf = small_clf()
        with pytest.raises(ValueError, match="4-D"):
            clf.fit(X.reshape(len(X), -1), y)
