"""Testing-stage detection and benchmark scoring.

Prediction uses only the image tower (merged or adapted) and the linear
classifier; no text encoder is involved. Scores aggregate into per-subset
average precision and accuracy plus their unweighted means across subsets
(mAP / mAcc), and logit histograms are exportable for distribution plots.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import DatasetManifest, PreprocessPolicy, load_image_tensor
from .errors import InvalidInputError, UndefinedMetricError

HISTOGRAM_BINS = 50


@dataclass(frozen=True)
class DetectionResult:
    image_id: str
    subset: str
    label: int
    logit: float
    probability: float


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    exp_x = np.exp(x[~positive])
    out[~positive] = exp_x / (1.0 + exp_x)
    return out if out.ndim else float(out)


def iter_image_batches(
    manifest: DatasetManifest,
    policy: PreprocessPolicy,
    batch_size: int,
    skipped: list[tuple[str, str]] | None = None,
):
    """Stream (records, image tensor) batches; unreadable files are recorded."""
    pending: list = []
    for record in manifest.records:
        try:
            pending.append((record, load_image_tensor(record, policy)))
        except Exception as exc:
            if skipped is not None:
                skipped.append((record.image_id, f"{type(exc).__name__}: {exc}"))
            continue
        if len(pending) == batch_size:
            yield [r for r, _ in pending], torch.stack([t for _, t in pending])
            pending = []
    if pending:
        yield [r for r, _ in pending], torch.stack([t for _, t in pending])


def predict(
    manifest: DatasetManifest,
    backend,
    classifier,
    policy: PreprocessPolicy | None = None,
    batch_size: int = 32,
) -> tuple[list[DetectionResult], list[tuple[str, str]]]:
    """Score every manifest record; unreadable images are skipped with a reason."""
    policy = policy or PreprocessPolicy()
    classifier.eval()
    results: list[DetectionResult] = []
    skipped: list[tuple[str, str]] = []

    for records, images in iter_image_batches(manifest, policy, batch_size, skipped):
        vectors = backend.encode_image(images, training=False)
        with torch.no_grad():
            logits = classifier(vectors).detach().cpu().numpy().astype(np.float64)
        for record, logit in zip(records, logits):
            results.append(
                DetectionResult(
                    image_id=record.image_id,
                    subset=record.subset,
                    label=record.label,
                    logit=float(logit),
                    probability=float(sigmoid(float(logit))),
                )
            )
    return results, skipped


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mean of precision at each positive's rank, scores sorted descending.

    Ties break by stable input order, so equal scores keep their original
    relative positions in the ranking.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape[0] != labels.shape[0]:
        raise InvalidInputError(
            f"scores and labels differ in length: {scores.shape[0]} vs {labels.shape[0]}"
        )
    if not np.any(labels == 1):
        raise UndefinedMetricError("average precision is undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, ranked.shape[0] + 1)
    precision_at_positives = (hits / ranks)[ranked == 1]
    return float(precision_at_positives.mean())


def accuracy(probabilities: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> float:
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probabilities.shape[0] != labels.shape[0]:
        raise InvalidInputError(
            f"probabilities and labels differ in length: {probabilities.shape[0]} vs {labels.shape[0]}"
        )
    if probabilities.shape[0] == 0:
        raise UndefinedMetricError("accuracy is undefined on empty input")
    predictions = (probabilities >= threshold).astype(np.int64)
    return float((predictions == labels).mean())


def balanced_accuracy(probabilities: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> float:
    """Mean of the real-class and fake-class accuracies (benchmark convention)."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probabilities.shape[0] == 0:
        raise UndefinedMetricError("accuracy is undefined on empty input")
    per_class = [
        accuracy(probabilities[labels == c], labels[labels == c], threshold)
        for c in (0, 1)
        if np.any(labels == c)
    ]
    return float(np.mean(per_class))


@dataclass(frozen=True)
class SubsetMetrics:
    ap: float
    acc: float
    acc_balanced: float
    n_real: int
    n_fake: int


@dataclass
class MetricsReport:
    per_subset: dict[str, SubsetMetrics]
    map_mean: float
    macc_mean: float
    macc_balanced_mean: float

    def to_dict(self) -> dict:
        return {
            "per_subset": {
                name: {
                    "ap": m.ap,
                    "acc": m.acc,
                    "acc_balanced": m.acc_balanced,
                    "n_real": m.n_real,
                    "n_fake": m.n_fake,
                }
                for name, m in sorted(self.per_subset.items())
            },
            "map_mean": self.map_mean,
            "macc_mean": self.macc_mean,
            "macc_balanced_mean": self.macc_balanced_mean,
        }


def score_results(results: Sequence[DetectionResult], threshold: float = 0.5) -> MetricsReport:
    """Per-subset AP/Acc plus unweighted means across subsets."""
    if not results:
        raise InvalidInputError("cannot score an empty result list")
    by_subset: dict[str, list[DetectionResult]] = {}
    for r in results:
        by_subset.setdefault(r.subset, []).append(r)

    per_subset: dict[str, SubsetMetrics] = {}
    for name in sorted(by_subset):
        rows = by_subset[name]
        probs = [r.probability for r in rows]
        labels = [r.label for r in rows]
        per_subset[name] = SubsetMetrics(
            ap=average_precision(probs, labels),
            acc=accuracy(probs, labels, threshold),
            acc_balanced=balanced_accuracy(probs, labels, threshold),
            n_real=sum(1 for r in rows if r.label == 0),
            n_fake=sum(1 for r in rows if r.label == 1),
        )
    return MetricsReport(
        per_subset=per_subset,
        map_mean=float(np.mean([m.ap for m in per_subset.values()])),
        macc_mean=float(np.mean([m.acc for m in per_subset.values()])),
        macc_balanced_mean=float(np.mean([m.acc_balanced for m in per_subset.values()])),
    )


def export_logit_distribution(results: Sequence[DetectionResult], bins: int = HISTOGRAM_BINS) -> dict:
    """Per-subset binned real/fake logit masses plus their overlap coefficient.

    Bins are uniform over the subset's pooled logit range; each class's
    masses sum to one, and the overlap coefficient is the summed bin-wise
    minimum of the two masses.
    """
    if not results:
        raise InvalidInputError("cannot export distributions for an empty result list")
    by_subset: dict[str, list[DetectionResult]] = {}
    for r in results:
        by_subset.setdefault(r.subset, []).append(r)

    export: dict[str, dict] = {}
    for name in sorted(by_subset):
        rows = by_subset[name]
        logits = np.array([r.logit for r in rows], dtype=np.float64)
        labels = np.array([r.label for r in rows], dtype=np.int64)
        lo, hi = float(logits.min()), float(logits.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, bins + 1)

        masses = {}
        for class_name, class_label in (("real", 0), ("fake", 1)):
            class_logits = logits[labels == class_label]
            counts, _ = np.histogram(class_logits, bins=edges)
            total = counts.sum()
            masses[class_name] = counts / total if total else np.zeros(bins)
        overlap = float(np.minimum(masses["real"], masses["fake"]).sum())
        export[name] = {
            "bin_edges": edges.tolist(),
            "real": masses["real"].tolist(),
            "fake": masses["fake"].tolist(),
            "overlap": overlap,
            "n_real": int((labels == 0).sum()),
            "n_fake": int((labels == 1).sum()),
        }
    return export


def write_results(results: Sequence[DetectionResult], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for r in results:
            handle.write(
                json.dumps(
                    {
                        "image_id": r.image_id,
                        "subset": r.subset,
                        "label": r.label,
                        "logit": r.logit,
                        "probability": r.probability,
                    }
                )
                + "\n"
            )
    return path


def read_results(path: str | Path) -> list[DetectionResult]:
    path = Path(path)
    results = []
    with path.open("r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            results.append(
                DetectionResult(
                    image_id=row["image_id"],
                    subset=row["subset"],
                    label=int(row["label"]),
                    logit=float(row["logit"]),
                    probability=float(row["probability"]),
                )
            )
    return results
