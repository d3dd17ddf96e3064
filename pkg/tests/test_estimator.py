"""sklearn-compatible estimator wrapper."""

import numpy as np
import pytest
import torch
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from defit import DatasetManifest, DecoupledFewShotClassifier, ExampleRecord
from defit.errors import ManifestValidationError


def _quick(**kw):
    kw.setdefault("shots", 4)
    kw.setdefault("epochs", 1)
    kw.setdefault("lora_scale", 256.0)
    return DecoupledFewShotClassifier(**kw)


def _split_manifest(bench, split):
    """File-backed records keep paths relative to a root; carry it along."""
    return DatasetManifest(name=bench.name, class_names=bench.class_names,
                           records=bench.split_records(split),
                           root=bench.root)


def test_get_params_verbatim_and_clone():
    est = _quick(alpha_sp=1.0, seed=3)
    params = est.get_params()
    assert params["shots"] == 4
    assert params["alpha_sp"] == 1.0
    assert params["seed"] == 3
    assert params["backbone"] is None
    copy = clone(est)
    assert copy.get_params() == params


def test_set_params_round_trip():
    est = _quick()
    est.set_params(epochs=2, loss_mode="ce_only")
    assert est.epochs == 2
    assert est.loss_mode == "ce_only"


def test_fit_predict_score_on_manifest(bench):
    est = _quick()
    assert est.fit(bench) is est
    assert est.class_names_ == bench.class_names
    np.testing.assert_array_equal(est.classes_, np.arange(3))
    assert len(est.train_log_) > 0

    test_split = _split_manifest(bench, "test_id")
    n = len(test_split.records)
    probs = est.predict_proba(test_split)
    assert probs.shape == (n, 3)
    np.testing.assert_allclose(probs.sum(axis=1), np.ones(n),
                               rtol=0, atol=1e-6)
    preds = est.predict(test_split)
    np.testing.assert_array_equal(preds, probs.argmax(axis=1))

    labels = np.asarray([r.label for r in test_split.records])
    assert est.score(test_split) == float((preds == labels).mean())
    assert 0.0 <= est.score(test_split, labels) <= 1.0


def test_unfitted_estimator_raises(bench):
    est = _quick()
    with pytest.raises(NotFittedError):
        est.predict_proba(bench.split_records("test_id"))
    with pytest.raises(NotFittedError):
        est.predict(bench.split_records("test_id"))


def _inline_records(n_per_class=4):
    records = []
    gen = torch.Generator().manual_seed(0)
    for label, name in enumerate(("circle", "square")):
        for i in range(n_per_class):
            records.append(ExampleRecord(
                example_id=f"{name}{i}", caption=f"an image of {name}",
                label=label, class_name=name, split="test_id",
                source_dataset="memory",
                image=torch.rand(3, 32, 32, generator=gen)))
    return records


def test_fit_on_record_list_coerces_to_train_split():
    records = _inline_records()
    est = _quick(shots=2)
    est.fit(records)
    assert est.class_names_ == ("circle", "square")
    probs = est.predict_proba(records)
    assert probs.shape == (len(records), 2)


def test_fit_rejects_inconsistent_labels():
    records = _inline_records()
    bad = ExampleRecord(example_id="odd", caption="", label=0,
                        class_name="square", split="train",
                        source_dataset="memory", image=torch.rand(3, 32, 32))
    est = _quick()
    with pytest.raises(ManifestValidationError):
        est.fit(records + [bad])


def test_estimator_is_deterministic(bench):
    test_split = _split_manifest(bench, "test_id")
    p1 = _quick(seed=5).fit(bench).predict_proba(test_split)
    p2 = _quick(seed=5).fit(bench).predict_proba(test_split)
    np.testing.assert_allclose(p1, p2, rtol=0, atol=0)
