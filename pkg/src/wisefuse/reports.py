"""Representative-slide selection from per-class report embeddings.

Each report is scored by its summed cosine similarity to every report of
the same class (self included); a stable softmax turns the row sums into
weights and the top n slides per class are kept for distillation training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyReportSet
from .store import EmbeddingStore


@dataclass(frozen=True)
class ClassReportSet:
    class_id: str
    reports: EmbeddingStore  # kind=report, one record per slide


@dataclass(frozen=True)
class RepresentativeSet:
    class_id: str
    slide_ids: list[str]
    scores: list[float]  # softmax weight of each chosen slide


def _softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def representative_slides(report_set: ClassReportSet, n: int = 5) -> RepresentativeSet:
    """Top n slides by softmaxed similarity row sum; ties go to the lower id."""
    if n < 1:
        raise ValueError("n must be >= 1")
    store = report_set.reports
    if len(store) == 0:
        raise EmptyReportSet(report_set.class_id)

    vectors = store.matrix().astype(np.float64)
    normed = vectors / np.linalg.norm(vectors, axis=1, keepdims=True)
    # symmetrize and pin the self-similarity diagonal so mathematically
    # tied row sums stay bit-equal ties for the id rule to resolve
    cosines = normed @ normed.T
    cosines = 0.5 * (cosines + cosines.T)
    np.fill_diagonal(cosines, 1.0)
    row_sums = cosines.sum(axis=1)
    weights = _softmax(row_sums)

    order = sorted(range(len(store)), key=lambda i: (-weights[i], store.ids[i]))
    chosen = order[: min(n, len(store))]
    return RepresentativeSet(
        class_id=report_set.class_id,
        slide_ids=[store.ids[i] for i in chosen],
        scores=[float(weights[i]) for i in chosen],
    )


def write_representatives(sets: list[RepresentativeSet], path) -> None:
    doc = {s.class_id: s.slide_ids for s in sets}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1))


def read_representatives(path) -> dict[str, list[str]]:
    return json.loads(Path(path).read_text())
