"""Prediction and metrics: Top-1, Macro-F1, one-vs-rest macro AUC.

All metrics are percentages in [0, 100]. Conventions: argmax ties resolve to
the lowest class index; a class with zero support (or zero predicted
positives) contributes F1 = 0; AUC uses the rank statistic with ties counted
half, skipping classes missing a label side (the skipped set is reported).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy.stats import rankdata

from .encoder import class_text_embeddings
from .errors import AlignmentError, CompatibilityError, EvaluationError, ParameterError
from .losses import class_probs
from .manifest import DatasetManifest, load_image
from .trainer import AdaptedModel

_BRANCHES = ("invariant", "spurious")


@dataclass
class Metrics:
    """Split-level metrics; ``auc`` is None when no class has both label sides."""

    top1: float
    macro_f1: float
    auc: Optional[float]
    per_class: tuple      # (precision, recall, f1, support) per class, percentages
    auc_skipped: tuple = ()
    n_examples: int = 0


@dataclass
class CrossEvalSpec:
    """Evaluate one source-trained model on one or more target datasets."""

    source: str
    targets: tuple

    def __post_init__(self):
        self.targets = tuple(self.targets)
        if len(self.targets) < 1:
            raise ParameterError("cross-eval needs at least one target dataset")


@dataclass
class CrossEvalResult:
    source: str
    per_target: dict
    average: float
    split: str


def _predict_probs(model, class_rows, manifest: DatasetManifest, records,
                   tau: float, batch_size: int = 64) -> np.ndarray:
    """(N, C) softmax probabilities of ``records`` against ``class_rows``."""
    probs = []
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            batch = records[start:start + batch_size]
            images = torch.stack([load_image(r, manifest) for r in batch])
            from .encoder import decouple  # local import keeps module load light

            dec = decouple(model.encode_images(images), model.heads, "vision")
            branch = dec.invariant if class_rows["branch"] == "invariant" else dec.spurious
            p = class_probs(branch, class_rows["rows"], tau)
            probs.append(p.double().cpu().numpy())
    if not probs:
        return np.zeros((0, class_rows["rows"].shape[0]), dtype=np.float64)
    return np.concatenate(probs, axis=0)


def predict(adapted: AdaptedModel, manifest: DatasetManifest, split: str,
            branch: str = "invariant", batch_size: int = 64):
    """Class probabilities and labels for one split.

    The manifest's class set must equal the one the model was trained against;
    use ``cross_eval`` for mismatched class sets.
    """
    if branch not in _BRANCHES:
        raise ParameterError(f"branch must be one of {_BRANCHES}, got {branch!r}")
    if tuple(manifest.class_names) != tuple(adapted.class_names):
        raise CompatibilityError(
            f"manifest classes {tuple(manifest.class_names)} do not match the "
            f"model's training classes {tuple(adapted.class_names)}")
    records = manifest.split_records(split)
    class_emb = class_text_embeddings(adapted.model, adapted.class_names,
                                      adapted.captions)
    rows = class_emb.invariant if branch == "invariant" else class_emb.spurious
    probs = _predict_probs(adapted.model, {"rows": rows, "branch": branch},
                           manifest, records, adapted.weights.tau, batch_size)
    labels = np.asarray([r.label for r in records], dtype=np.int64)
    return probs, labels


def top1_accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of rows whose argmax (lowest index on ties) hits the label."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2:
        raise EvaluationError(f"probs must be (N, C), got shape {probs.shape}")
    if probs.shape[0] == 0:
        raise EvaluationError("cannot compute accuracy of an empty evaluation set")
    if labels.shape != (probs.shape[0],):
        raise EvaluationError(
            f"labels shape {labels.shape} does not match probs rows {probs.shape[0]}")
    preds = probs.argmax(axis=1)
    return 100.0 * float((preds == labels).mean())


def per_class_prf(probs: np.ndarray, labels: np.ndarray, n_classes: int) -> tuple:
    """(precision, recall, f1, support) per class, percentages; 0/0 -> 0."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape[0] == 0:
        raise EvaluationError("cannot compute F1 of an empty evaluation set")
    preds = probs.argmax(axis=1)
    rows = []
    for c in range(n_classes):
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        support = int(np.sum(labels == c))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        rows.append((100.0 * precision, 100.0 * recall, 100.0 * f1, support))
    return tuple(rows)


def macro_f1(probs: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    """Unweighted mean of per-class F1 (zero-support classes count as 0)."""
    rows = per_class_prf(probs, labels, n_classes)
    return float(np.mean([r[2] for r in rows]))


def roc_auc(probs: np.ndarray, labels: np.ndarray, n_classes: int,
            return_skipped: bool = False):
    """One-vs-rest macro AUC via the rank statistic; ties contribute half.

    Classes missing a positive or negative side are skipped; if every class is
    skipped the metric is undefined and raises EvaluationError.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape[0] == 0:
        raise EvaluationError("cannot compute AUC of an empty evaluation set")
    aucs = []
    skipped = []
    for c in range(n_classes):
        pos = labels == c
        n_pos = int(pos.sum())
        n_neg = int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            skipped.append(c)
            continue
        ranks = rankdata(probs[:, c])          # average ranks on ties
        rank_sum = float(ranks[pos].sum())
        auc_c = (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
        aucs.append(auc_c)
    if not aucs:
        raise EvaluationError(
            "AUC is undefined: no class has both positive and negative examples")
    value = 100.0 * float(np.mean(aucs))
    if return_skipped:
        return value, tuple(skipped)
    return value


def evaluate(adapted: AdaptedModel, manifest: DatasetManifest, split: str,
             branch: str = "invariant", batch_size: int = 64) -> Metrics:
    """All metrics on one split; AUC degrades to None when undefined."""
    probs, labels = predict(adapted, manifest, split, branch=branch,
                            batch_size=batch_size)
    if probs.shape[0] == 0:
        raise EvaluationError(f"split {split!r} of {manifest.name!r} is empty")
    n_classes = len(manifest.class_names)
    per_class = per_class_prf(probs, labels, n_classes)
    f1 = float(np.mean([r[2] for r in per_class]))
    try:
        auc, skipped = roc_auc(probs, labels, n_classes, return_skipped=True)
    except EvaluationError:
        auc, skipped = None, tuple(range(n_classes))
    return Metrics(top1=top1_accuracy(probs, labels), macro_f1=f1, auc=auc,
                   per_class=per_class, auc_skipped=skipped,
                   n_examples=int(probs.shape[0]))


def cross_eval(adapted: AdaptedModel, spec: CrossEvalSpec, manifests: dict,
               alignment: dict, split: str = "test_id",
               batch_size: int = 64) -> CrossEvalResult:
    """Accuracy of a source-trained model on target datasets.

    ``alignment`` maps, per target name, each target class name to the source
    class name it counts as; any unmapped target class (or mapping to an
    unknown source class) is an alignment error listing the gaps.
    """
    missing_targets = [t for t in spec.targets if t not in manifests]
    if missing_targets:
        raise AlignmentError(f"no manifest provided for target(s): {missing_targets}")
    class_emb = class_text_embeddings(adapted.model, adapted.class_names,
                                      adapted.captions)
    source_names = tuple(adapted.class_names)
    per_target = {}
    for target in spec.targets:
        manifest = manifests[target]
        table = alignment.get(target, {})
        gaps = [name for name in manifest.class_names if name not in table]
        bad = sorted(set(table.values()) - set(source_names))
        if gaps or bad:
            parts = []
            if gaps:
                parts.append(f"unmapped target classes {gaps}")
            if bad:
                parts.append(f"mapped to unknown source classes {bad}")
            raise AlignmentError(f"target {target!r}: " + "; ".join(parts))
        records = manifest.split_records(split)
        if not records:
            raise EvaluationError(f"split {split!r} of target {target!r} is empty")
        probs = _predict_probs(adapted.model,
                               {"rows": class_emb.invariant, "branch": "invariant"},
                               manifest, records, adapted.weights.tau, batch_size)
        preds = probs.argmax(axis=1)
        correct = sum(
            1 for rec, p in zip(records, preds)
            if source_names[p] == table[rec.class_name])
        per_target[target] = 100.0 * correct / len(records)
    average = float(np.mean(list(per_target.values())))
    return CrossEvalResult(source=spec.source, per_target=per_target,
                           average=average, split=split)
