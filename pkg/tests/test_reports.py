import math

import numpy as np
import pytest

from wisefuse.errors import EmptyReportSet
from wisefuse.reports import ClassReportSet, representative_slides
from wisefuse.store import EmbeddingStore


def report_set(vectors, ids=None, class_id="c"):
    dim = len(vectors[0])
    store = EmbeddingStore(dim, "report")
    for i, vec in enumerate(vectors):
        store.add(ids[i] if ids else f"slide{i}", vec)
    return ClassReportSet(class_id, store)


def test_worked_example():
    # rows sums (2, 2, 1); softmax weights frozen from direct arithmetic
    reps = representative_slides(report_set([(1, 0), (1, 0), (0, 1)]), n=2)
    assert reps.slide_ids == ["slide0", "slide1"]  # tie broken by id
    e2, e1 = math.exp(2.0), math.exp(1.0)
    total = 2 * e2 + e1
    assert abs(reps.scores[0] - e2 / total) < 1e-12
    assert abs(reps.scores[0] - 0.4223187982515182) < 1e-10
    assert abs(reps.scores[1] - 0.4223187982515182) < 1e-10


def test_single_report(rng):
    reps = representative_slides(report_set([rng.normal(size=4)]), n=5)
    assert reps.slide_ids == ["slide0"]
    assert reps.scores == [1.0]


def test_empty_class():
    store = EmbeddingStore(3, "report")
    with pytest.raises(EmptyReportSet):
        representative_slides(ClassReportSet("c", store), n=1)


def raw_row_sums(store):
    """Per-pair cosine oracle on the stored (float32) vectors, diagonal 1."""
    n = len(store)
    vecs = [store.get(i).astype(np.float64) for i in store.ids]
    norms = [np.linalg.norm(v) for v in vecs]
    cos = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            cos[i, j] = cos[j, i] = vecs[i] @ vecs[j] / (norms[i] * norms[j])
    return cos.sum(axis=1)


def test_ranking_matches_raw_rowsums(rng):
    for _ in range(50):
        n_reports = int(rng.integers(2, 12))
        dim = int(rng.integers(2, 6))
        vectors = rng.normal(size=(n_reports, dim))
        reports = report_set(vectors)
        reps = representative_slides(reports, n=3)

        row_sums = raw_row_sums(reports.reports)
        by_raw = sorted(range(n_reports), key=lambda i: (-row_sums[i], f"slide{i}"))
        assert set(reps.slide_ids) == {f"slide{i}" for i in by_raw[:3]}


def test_weights_sum_to_one_over_class(rng):
    vectors = rng.normal(size=(6, 4))
    reps = representative_slides(report_set(vectors), n=6)
    assert abs(sum(reps.scores) - 1.0) < 1e-12


def test_permutation_invariant_selection(rng):
    vectors = rng.normal(size=(8, 5))
    ids = [f"s{i}" for i in range(8)]
    order = rng.permutation(8)
    a = representative_slides(report_set(vectors, ids), n=4)
    b = representative_slides(
        report_set([vectors[i] for i in order], [ids[i] for i in order]), n=4)
    assert set(a.slide_ids) == set(b.slide_ids)
