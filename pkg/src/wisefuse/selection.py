"""Similarity scoring against class text vectors and two-stage top-k picking.

Half of the budget goes to patches scoring high on average across classes
(generally informative), the rest to the highest cross-class spread among
the remaining patches (class-discriminative). Ties always resolve to the
lower patch index so the selection is reproducible anywhere.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyMatrix, UnknownPatchId, ZeroNormVector
from .prompts import ClassTextEmbedding
from .raster import write_raster
from .store import EmbeddingStore
from .tiling import PatchGrid


@dataclass
class SimilarityMatrix:
    slide_id: str
    patch_ids: list[str]
    class_ids: list[str]
    scores: np.ndarray   # (N, C) cosine values
    s_mean: np.ndarray   # (N,) row means
    s_std: np.ndarray    # (N,) row population standard deviations


@dataclass
class SelectionResult:
    slide_id: str
    k: int
    stage1_ids: list[str]  # picked by mean
    stage2_ids: list[str]  # picked by spread
    selected_fine_ids: list[str]
    # selected coarse id -> its fine ids, in child order
    children: dict[str, list[str]]

    @property
    def selected_coarse_ids(self) -> list[str]:
        return self.stage1_ids + self.stage2_ids


def similarity_matrix(low_distilled: EmbeddingStore,
                      text: list[ClassTextEmbedding],
                      slide_id: str | None = None) -> SimilarityMatrix:
    """Cosine of every patch vector against every class text vector."""
    if not text:
        raise ValueError("need at least one class")
    patches = low_distilled.matrix().astype(np.float64)
    patch_norms = np.linalg.norm(patches, axis=1)
    if np.any(patch_norms == 0):
        raise ZeroNormVector("patch embedding with zero norm")
    classes = np.stack([np.asarray(t.e_text, dtype=np.float64) for t in text])
    class_norms = np.linalg.norm(classes, axis=1)
    if np.any(class_norms == 0):
        raise ZeroNormVector("class text embedding with zero norm")

    scores = (patches @ classes.T) / np.outer(patch_norms, class_norms)
    return SimilarityMatrix(
        slide_id=slide_id or (low_distilled.ids[0].split(":")[0] if low_distilled.ids else ""),
        patch_ids=list(low_distilled.ids),
        class_ids=[t.class_id for t in text],
        scores=scores,
        s_mean=scores.mean(axis=1),
        s_std=scores.std(axis=1),  # population: divide by C
    )


def _take_top(score: np.ndarray, available: np.ndarray, count: int) -> list[int]:
    """Indices of the `count` largest scores among `available`, low index first."""
    if count <= 0:
        return []
    # lexsort orders by the last key first: descending score, then index
    order = np.lexsort((available, -score[available]))
    return available[order[:count]].tolist()


def select_topk(sim: SimilarityMatrix, ratio: float,
                grid: PatchGrid | None = None) -> SelectionResult:
    """Two-stage pick of k = max(1, round(ratio * N)) patches.

    Stage 1 takes ceil(k/2) by mean score; stage 2 fills the rest by score
    spread among the remaining patches. When a grid is given, the children
    of every chosen coarse patch become the selected fine ids, in selection
    order then child order.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    n = len(sim.patch_ids)
    if n == 0:
        raise EmptyMatrix(sim.slide_id)

    k = min(n, max(1, int(math.floor(ratio * n + 0.5))))
    k1 = math.ceil(k / 2)
    stage1 = _take_top(sim.s_mean, np.arange(n), k1)
    taken = set(stage1)
    remaining = np.array([i for i in range(n) if i not in taken], dtype=np.int64)
    stage2 = _take_top(sim.s_std, remaining, k - len(stage1))

    fine_ids: list[str] = []
    children: dict[str, list[str]] = {}
    if grid is not None:
        coarse_by_id = {p.patch_id: p for p in grid.coarse}
        for idx in stage1 + stage2:
            patch_id = sim.patch_ids[idx]
            if patch_id not in coarse_by_id:
                raise UnknownPatchId(patch_id)
            coarse = coarse_by_id[patch_id]
            kids = grid.child_ids(coarse.row, coarse.col)
            children[patch_id] = kids
            fine_ids.extend(kids)

    return SelectionResult(
        slide_id=sim.slide_id,
        k=k,
        stage1_ids=[sim.patch_ids[i] for i in stage1],
        stage2_ids=[sim.patch_ids[i] for i in stage2],
        selected_fine_ids=fine_ids,
        children=children,
    )


def reference_topk(s_mean, s_std, ratio: float) -> tuple[list[int], list[int]]:
    """Independent oracle: stable full sorts with explicit (score, index) keys."""
    n = len(s_mean)
    k = min(n, max(1, int(math.floor(ratio * n + 0.5))))
    k1 = math.ceil(k / 2)
    by_mean = sorted(range(n), key=lambda i: (-s_mean[i], i))
    stage1 = by_mean[:k1]
    rest = [i for i in range(n) if i not in stage1]
    by_std = sorted(rest, key=lambda i: (-s_std[i], i))
    stage2 = by_std[: k - k1]
    return stage1, stage2


# -- persistence -----------------------------------------------------------------

def selection_to_json(result: SelectionResult) -> dict:
    return {
        "slide_id": result.slide_id,
        "k": result.k,
        "stage1_ids": result.stage1_ids,
        "stage2_ids": result.stage2_ids,
        "selected_fine_ids": result.selected_fine_ids,
        "children": result.children,
    }


def write_selection(result: SelectionResult, path) -> None:
    Path(path).write_text(json.dumps(selection_to_json(result), sort_keys=True, indent=1))


def read_selection(path) -> SelectionResult:
    doc = json.loads(Path(path).read_text())
    return SelectionResult(
        doc["slide_id"], doc["k"], doc["stage1_ids"], doc["stage2_ids"],
        doc["selected_fine_ids"], doc["children"],
    )


def export_heatmap(sim: SimilarityMatrix, grid: PatchGrid, out_prefix) -> tuple[Path, Path]:
    """Write per-patch scores as CSV plus a min-max scaled mean-score image.

    Image pixels cover the full coarse grid; cells without a kept patch stay
    black, and a constant score field renders mid-gray.
    """
    coarse_by_id = {p.patch_id: p for p in grid.coarse}
    cells = []
    for idx, patch_id in enumerate(sim.patch_ids):
        if patch_id not in coarse_by_id:
            raise UnknownPatchId(patch_id)
        cells.append((coarse_by_id[patch_id], idx))

    csv_path = Path(str(out_prefix) + ".csv")
    header = ["row", "col", "s_mean", "s_std"] + [f"S_{c}" for c in sim.class_ids]
    lines = [",".join(header)]
    for coarse, idx in cells:
        values = [str(coarse.row), str(coarse.col), repr(float(sim.s_mean[idx])),
                  repr(float(sim.s_std[idx]))]
        values += [repr(float(v)) for v in sim.scores[idx]]
        lines.append(",".join(values))
    csv_path.write_text("\n".join(lines) + "\n")

    rows = 1 + max(p.row for p in coarse_by_id.values())
    cols = 1 + max(p.col for p in coarse_by_id.values())
    image = np.zeros((rows, cols), dtype=np.uint8)
    lo, hi = float(sim.s_mean.min()), float(sim.s_mean.max())
    for coarse, idx in cells:
        if hi > lo:
            scaled = 255.0 * (sim.s_mean[idx] - lo) / (hi - lo)
            image[coarse.row, coarse.col] = np.uint8(math.floor(scaled + 0.5))
        else:
            image[coarse.row, coarse.col] = 128
    pgm_path = Path(str(out_prefix) + ".pgm")
    write_raster(pgm_path, image)
    return csv_path, pgm_path
