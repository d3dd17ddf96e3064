"""sklearn-style estimator façade over the few-shot adaptation workflow.

``DecoupledFewShotClassifier`` is a proper sklearn estimator: constructor
arguments are stored verbatim (so ``clone``/``get_params`` work), ``fit``
takes a dataset manifest (or a list of example records) and adapts the
dual encoder, and ``predict``/``predict_proba``/``score`` run the invariant
branch.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .configs import BackboneConfig, HsicConfig, LossWeights, TrainConfig
from .encoder import class_text_embeddings, decouple
from .errors import ManifestValidationError
from .losses import class_probs
from .manifest import DatasetManifest, load_image, sample_few_shot
from .trainer import train
from .validation import as_records


def _records_to_manifest(records, name: str = "memory") -> DatasetManifest:
    """Build an in-memory manifest from records; class order follows labels."""
    by_label: dict = {}
    for rec in records:
        existing = by_label.setdefault(rec.label, rec.class_name)
        if existing != rec.class_name:
            raise ManifestValidationError(
                f"label {rec.label} maps to both {existing!r} and {rec.class_name!r}")
    class_names = tuple(by_label[i] for i in sorted(by_label))
    if sorted(by_label) != list(range(len(by_label))):
        raise ManifestValidationError(
            f"labels must be contiguous from 0, got {sorted(by_label)}")
    return DatasetManifest(name=name, class_names=class_names,
                           records=list(records))


class DecoupledFewShotClassifier(BaseEstimator, ClassifierMixin):
    """Few-shot robust classifier with decoupled invariant/spurious features.

    Parameters mirror the training configuration; ``backbone=None`` uses the
    desk-scale backbone. ``fit`` expects a ``DatasetManifest`` whose train
    split holds the support examples (it applies few-shot subsampling itself),
    or a plain list of ``ExampleRecord``s treated as the train split.
    """

    def __init__(self, shots=16, epochs=10, batch_size=4, learning_rate=2.6e-6,
                 momentum=0.0, tau=0.07, alpha_sp=0.5, beta=0.5,
                 lora_rank=4, lora_scale=1.0, prompt_depth=3, prompt_width=2,
                 loss_mode="full", min_class_count=2, seed=0, backbone=None):
        self.shots = shots
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.tau = tau
        self.alpha_sp = alpha_sp
        self.beta = beta
        self.lora_rank = lora_rank
        self.lora_scale = lora_scale
        self.prompt_depth = prompt_depth
        self.prompt_width = prompt_width
        self.loss_mode = loss_mode
        self.min_class_count = min_class_count
        self.seed = seed
        self.backbone = backbone

    def _train_config(self) -> TrainConfig:
        backbone = self.backbone if self.backbone is not None else BackboneConfig.tiny()
        return TrainConfig(
            shots=self.shots, epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, momentum=self.momentum,
            lora_rank=self.lora_rank, lora_scale=self.lora_scale,
            prompt_depth=self.prompt_depth, prompt_width=self.prompt_width,
            seed=self.seed, loss_mode=self.loss_mode,
            weights=LossWeights(tau=self.tau, alpha_sp=self.alpha_sp, beta=self.beta),
            hsic=HsicConfig(min_class_count=self.min_class_count),
            backbone=backbone,
        )

    def fit(self, X, y=None):
        """Adapt the model on X's train split; y is ignored (labels ride on records)."""
        if isinstance(X, DatasetManifest):
            manifest = X
        else:
            records = as_records(X)
            manifest = _records_to_manifest(
                [r if r.split == "train" else type(r)(**{**r.to_json_dict(),
                                                         "split": "train"},
                                                      image=r.image)
                 for r in records])
        cfg = self._train_config()
        few = sample_few_shot(manifest, cfg.shots, cfg.seed)
        result = train(cfg, few)
        self.adapted_ = result.adapted
        self.train_log_ = result.log
        self.class_names_ = tuple(result.adapted.class_names)
        self.classes_ = np.arange(len(self.class_names_))
        self._source_manifest = manifest
        return self

    def _check_fitted(self):
        if not hasattr(self, "adapted_"):
            raise NotFittedError(
                "this DecoupledFewShotClassifier instance is not fitted yet")

    def predict_proba(self, X) -> np.ndarray:
        """Invariant-branch class probabilities for records (any split)."""
        self._check_fitted()
        records = as_records(X)
        manifest = X if isinstance(X, DatasetManifest) else None
        adapted = self.adapted_
        class_emb = class_text_embeddings(adapted.model, adapted.class_names,
                                          adapted.captions)
        probs = []
        with torch.no_grad():
            for start in range(0, len(records), 64):
                batch = records[start:start + 64]
                images = torch.stack([load_image(r, manifest) for r in batch])
                dec = decouple(adapted.model.encode_images(images),
                               adapted.model.heads, "vision")
                p = class_probs(dec.invariant, class_emb.invariant,
                                adapted.weights.tau)
                probs.append(p.double().cpu().numpy())
        if not probs:
            return np.zeros((0, len(self.class_names_)))
        return np.concatenate(probs, axis=0)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y=None) -> float:
        """Mean top-1 accuracy (0..1); labels come from the records when y is None."""
        records = as_records(X)
        if y is None:
            y = np.asarray([r.label for r in records])
        preds = self.predict(X)
        return float((preds == np.asarray(y)).mean())
