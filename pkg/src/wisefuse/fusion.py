"""Cross-modal fusion of selected patch embeddings with class text vectors.

Every selected fine patch gets its parent's similarity-weighted sum of the
class text embeddings appended to its visual vector; the weights are the
raw cosine scores, negatives included.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import LengthMismatch, MissingEmbedding, UnknownParent
from .prompts import ClassTextEmbedding
from .selection import SelectionResult, SimilarityMatrix
from .store import EmbeddingStore, write_store


def weighted_text_vector(sim_row, text: list[ClassTextEmbedding]) -> np.ndarray:
    """Sum of class text vectors weighted by this patch's similarity row."""
    row = np.asarray(sim_row, dtype=np.float64)
    if row.shape[0] != len(text):
        raise LengthMismatch(f"{row.shape[0]} weights for {len(text)} classes")
    stacked = np.stack([np.asarray(t.e_text, dtype=np.float64) for t in text])
    return row @ stacked


def fuse(selection: SelectionResult, sim: SimilarityMatrix, high: EmbeddingStore,
         text: list[ClassTextEmbedding]) -> EmbeddingStore:
    """Concatenate [visual ; weighted text] for every selected fine patch.

    Output order is selection order, then child order within each parent.
    Children of one parent share the same text segment byte-for-byte.
    """
    row_of = {pid: i for i, pid in enumerate(sim.patch_ids)}
    d_text = np.asarray(text[0].e_text).shape[0] if text else 0
    fused = EmbeddingStore(high.dim + d_text, "fused")
    for parent_id in selection.selected_coarse_ids:
        if parent_id not in row_of:
            raise UnknownParent(parent_id)
        segment = weighted_text_vector(sim.scores[row_of[parent_id]], text)
        segment32 = segment.astype(np.float32)
        for fine_id in selection.children.get(parent_id, []):
            if fine_id not in high:
                raise MissingEmbedding(fine_id)
            fused.add(fine_id, np.concatenate([high.get(fine_id), segment32]))
    return fused


def write_fused(store: EmbeddingStore, path, d_visual: int, d_text: int) -> None:
    """Persist with a sidecar recording the segment split."""
    write_store(store, path)
    sidecar_path = Path(str(path) + ".json")
    sidecar = json.loads(sidecar_path.read_text())
    sidecar["d_visual"] = d_visual
    sidecar["d_text"] = d_text
    sidecar_path.write_text(json.dumps(sidecar, sort_keys=True))
