"""Tile-level metrics and the method comparison table."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch
from scipy.stats import rankdata

from .data import Dataset
from .networks import Classifier, color_to_tensor


class MetricsError(ValueError):
    pass


def _check_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise MetricsError(f"{len(scores)} scores but {len(labels)} labels")
    if not np.all(np.isin(labels, (0, 1))):
        raise MetricsError("labels must be 0 or 1")
    labels = labels.astype(np.int64)
    if labels.min() == labels.max():
        raise MetricsError("both classes must be present")
    return scores, labels


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(positive outscores negative), ties counted half."""
    scores, labels = _check_scores(scores, labels)
    ranks = rankdata(scores)  # average ranks for ties
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class ConfusionMetrics:
    precision: float
    recall: float
    specificity: float
    tp: int
    fp: int
    tn: int
    fn: int
    zero_division: tuple[str, ...] = ()

    def __iter__(self):
        return iter((self.precision, self.recall, self.specificity))


def confusion_metrics(scores, labels, threshold: float = 0.5) -> ConfusionMetrics:
    """Precision, recall and specificity with ``score >= threshold`` as positive.

    An undefined ratio is reported as 0 and named in ``zero_division``.
    """
    scores, labels = _check_scores(scores, labels)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    tn = int(np.sum(~pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    flagged = []

    def ratio(num, den, name):
        if den == 0:
            flagged.append(name)
            return 0.0
        return num / den

    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    specificity = ratio(tn, tn + fp, "specificity")
    if flagged:
        warnings.warn(f"zero division in {', '.join(flagged)}; reported as 0", RuntimeWarning, stacklevel=2)
    return ConfusionMetrics(precision, recall, specificity, tp, fp, tn, fn, tuple(flagged))


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    precision: float
    recall: float
    specificity: float
    n_samples: int
    method_name: str

    def to_json(self) -> dict:
        return asdict(self)


@torch.no_grad()
def predict_proba(classifier: Classifier, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Tumor probabilities for an ``(n, d, d, 3)`` stack, in inference mode."""
    was_training = classifier.training
    classifier.eval()
    out = []
    for start in range(0, len(images), batch_size):
        _, prob = classifier(color_to_tensor(images[start:start + batch_size]))
        out.append(prob.double().numpy())
    classifier.train(was_training)
    return np.concatenate(out)


Transfer = Callable[[np.ndarray], np.ndarray]


def transform_images(dataset: Dataset, transfer: Transfer | None) -> np.ndarray:
    if transfer is None:
        return dataset.images
    batch = getattr(transfer, "batch", None)
    if batch is not None:
        return np.asarray(batch(dataset.images))
    return np.stack([transfer(t) for t in dataset.images])


def evaluate(
    classifier: Classifier,
    dataset: Dataset,
    transfer: Transfer | None = None,
    threshold: float = 0.5,
    method_name: str = "identity",
) -> MetricsReport:
    """Score every (optionally transferred) tile with the frozen classifier.

    A transfer callable maps one tile to one tile; if it also exposes a
    ``batch`` attribute, that is used on the whole ``(n, d, d, 3)`` stack.
    """
    labels = dataset.labels
    if labels.min() == labels.max():
        raise MetricsError("dataset must contain both classes")
    images = transform_images(dataset, transfer)
    d = classifier.config.d
    if images.shape[1:] != (d, d, 3):
        raise MetricsError(f"transfer output shape {images.shape[1:]} does not match classifier input {(d, d, 3)}")
    scores = predict_proba(classifier, images)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        cm = confusion_metrics(scores, labels, threshold)
    return MetricsReport(roc_auc(scores, labels), cm.precision, cm.recall, cm.specificity, len(labels), method_name)


@dataclass
class ComparisonTable:
    rows: list[MetricsReport]
    errors: dict[str, str] = field(default_factory=dict)

    def auc(self, method: str) -> float:
        for r in self.rows:
            if r.method_name == method:
                return r.auc
        raise KeyError(method)

    def to_json(self) -> list[dict]:
        out = [r.to_json() for r in self.rows]
        out += [{"method_name": name, "error": msg} for name, msg in self.errors.items()]
        return out

    def render(self) -> str:
        lines = ["tile-level metrics (threshold-based metrics at the decision threshold)"]
        header = f"{'method':<12} {'AUC':>7} {'Prec':>7} {'Recall':>7} {'Spec':>7} {'n':>6}"
        lines += [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.method_name:<12} {r.auc:>7.4f} {r.precision:>7.4f} {r.recall:>7.4f} "
                f"{r.specificity:>7.4f} {r.n_samples:>6d}"
            )
        for name, msg in self.errors.items():
            lines.append(f"{name:<12} error: {msg}")
        return "\n".join(lines)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def comparison_report(
    classifier: Classifier,
    dataset: Dataset,
    methods: Mapping[str, Transfer | None],
    threshold: float = 0.5,
) -> ComparisonTable:
    """One MetricsReport per named transfer, sorted by AUC (descending).

    A method that raises is recorded as an error row instead of aborting.
    """
    rows, errors = [], {}
    for name, transfer in methods.items():
        try:
            rows.append(evaluate(classifier, dataset, transfer, threshold, name))
        except Exception as exc:  # reported per method
            errors[name] = f"{type(exc).__name__}: {exc}"
    rows.sort(key=lambda r: r.auc, reverse=True)
    return ComparisonTable(rows, errors)
