"""Per-class text embeddings from class names and morphological sentences.

Every class contributes one name embedding and one description embedding
(the mean over its sentences, each encoded separately); the class text
vector is their midpoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import EncodeRequest, EncoderGateway
from .errors import EmptyDescriptions
from .store import EmbeddingStore


@dataclass(frozen=True)
class ClassPromptSpec:
    class_id: str
    class_name: str
    morph_descriptions: list[str]

    def validate(self) -> None:
        if not self.class_name.strip():
            raise ValueError(f"{self.class_id}: empty class name")
        if not self.morph_descriptions or any(not s.strip() for s in self.morph_descriptions):
            raise EmptyDescriptions(self.class_id)


@dataclass(frozen=True)
class ClassTextEmbedding:
    class_id: str
    e_class: np.ndarray
    e_morph: np.ndarray
    e_text: np.ndarray  # 0.5 * (e_class + e_morph)


def build_class_embedding(spec: ClassPromptSpec, gateway: EncoderGateway) -> ClassTextEmbedding:
    spec.validate()
    items = [(f"{spec.class_id}:name", spec.class_name)]
    items += [
        (f"{spec.class_id}:morph:{i}", sentence)
        for i, sentence in enumerate(spec.morph_descriptions)
    ]
    encoded = gateway.encode_batch(EncodeRequest(items, "text"), kind="text")
    e_class = encoded.get(items[0][0]).astype(np.float64)
    morph_rows = [encoded.get(item_id).astype(np.float64) for item_id, _ in items[1:]]
    e_morph = np.mean(morph_rows, axis=0)
    return ClassTextEmbedding(
        class_id=spec.class_id,
        e_class=e_class,
        e_morph=e_morph,
        e_text=0.5 * (e_class + e_morph),
    )


def build_text_store(specs: list[ClassPromptSpec], gateway: EncoderGateway) -> tuple[list[ClassTextEmbedding], EmbeddingStore]:
    """Encode every class; the returned store holds the final text vectors."""
    embeddings = [build_class_embedding(spec, gateway) for spec in specs]
    store = EmbeddingStore(gateway.info().dim, "text")
    for emb in embeddings:
        store.add(f"text:{emb.class_id}", emb.e_text.astype(np.float32))
    return embeddings, store


def text_embeddings_from_store(store: EmbeddingStore) -> list[ClassTextEmbedding]:
    """Rehydrate class vectors from a persisted text store (ids 'text:{class}').

    Only e_text survives persistence; the name/description components are
    set to the combined vector so the midpoint invariant still holds.
    """
    out = []
    for record_id in store.ids:
        class_id = record_id.split(":", 1)[1] if ":" in record_id else record_id
        vec = store.get(record_id).astype(np.float64)
        out.append(ClassTextEmbedding(class_id, vec, vec, vec))
    return out


def read_prompt_specs(path) -> list[ClassPromptSpec]:
    """Load class prompt specs from a JSON file or a directory of them.

    Each document is {class_id, class_name, descriptions: [...]}; a file may
    hold one document or a list.
    """
    path = Path(path)
    if path.is_dir():
        docs = []
        for child in sorted(path.glob("*.json")):
            loaded = json.loads(child.read_text())
            docs.extend(loaded if isinstance(loaded, list) else [loaded])
    else:
        loaded = json.loads(path.read_text())
        docs = loaded if isinstance(loaded, list) else [loaded]
    specs = [
        ClassPromptSpec(doc["class_id"], doc["class_name"], list(doc["descriptions"]))
        for doc in docs
    ]
    for spec in specs:
        spec.validate()
    return specs
