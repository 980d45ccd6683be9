"""Ordered float32 vector stores and their binary file format.

Layout (little-endian): magic "WFEB", u32 version=1, u32 dim, u64 count,
then per record u32 id_len, UTF-8 id bytes, dim x f32. A JSON sidecar
{path, dim, count, kind} rides along with every file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    DuplicateId,
    MissingChildEmbedding,
    Truncated,
    VersionMismatch,
    ZeroNormVector,
)
from .tiling import PatchGrid

MAGIC = b"WFEB"
VERSION = 1
KINDS = ("high_res", "low_res_raw", "low_res_distilled", "report", "text", "fused")


@dataclass
class EmbeddingStore:
    """Insertion-ordered id -> float32 vector map with a fixed dimension."""

    dim: int
    kind: str = "high_res"
    ids: list[str] = field(default_factory=list)
    _index: dict[str, int] = field(default_factory=dict)
    _rows: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown store kind {self.kind!r}")
        if self.dim <= 0:
            raise ValueError("dim must be positive")

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._index

    def add(self, record_id: str, vector) -> None:
        """Ingest one record; rejects duplicates, non-finite and zero vectors."""
        if record_id in self._index:
            raise DuplicateId(record_id)
        vec = np.asarray(vector, dtype=np.float32).reshape(-1)
        if vec.shape != (self.dim,):
            raise ValueError(f"{record_id}: expected dim {self.dim}, got {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise ZeroNormVector(f"{record_id}: non-finite entries")
        if not np.any(vec):
            raise ZeroNormVector(f"{record_id}: zero-norm vector")
        self._index[record_id] = len(self.ids)
        self.ids.append(record_id)
        self._rows.append(vec)

    def get(self, record_id: str) -> np.ndarray:
        return self._rows[self._index[record_id]]

    def matrix(self) -> np.ndarray:
        """All vectors stacked in insertion order, shape (n, dim) float32."""
        if not self._rows:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack(self._rows)

    def subset(self, record_ids, kind: str | None = None) -> "EmbeddingStore":
        out = EmbeddingStore(self.dim, kind or self.kind)
        for rid in record_ids:
            out.add(rid, self.get(rid))
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.ids == other.ids
            and all(np.array_equal(a, b) for a, b in zip(self._rows, other._rows))
        )


# -- low-level container IO --------------------------------------------------
# The same container also holds distillation checkpoints, whose parameter
# rows may legitimately be all-zero; `check_norms` gates the ingestion rule.

def write_wfeb(path, dim: int, ids, rows, *, check_norms: bool = True) -> int:
    """Write records to `path`; returns the byte count."""
    ids = list(ids)
    out = bytearray()
    out += MAGIC
    out += struct.pack("<IIQ", VERSION, dim, len(ids))
    for rid, row in zip(ids, rows):
        vec = np.asarray(row, dtype=np.float32).reshape(-1)
        if vec.shape != (dim,):
            raise ValueError(f"{rid}: expected dim {dim}, got {vec.shape}")
        if check_norms and (not np.all(np.isfinite(vec)) or not np.any(vec)):
            raise ZeroNormVector(rid)
        raw_id = rid.encode("utf-8")
        out += struct.pack("<I", len(raw_id))
        out += raw_id
        out += vec.tobytes()
    Path(path).write_bytes(out)
    return len(out)


def read_wfeb(path, *, check_norms: bool = True):
    """Read a container; returns (dim, ids, rows float32 (n, dim))."""
    blob = Path(path).read_bytes()
    if len(blob) < 20:
        raise Truncated(f"{path}: {len(blob)} bytes is shorter than the header")
    if blob[:4] != MAGIC:
        raise BadMagic(f"{path}: magic {blob[:4]!r}")
    version, dim, count = struct.unpack_from("<IIQ", blob, 4)
    if version != VERSION:
        raise VersionMismatch(f"{path}: version {version}")
    ids: list[str] = []
    rows = np.zeros((count, dim), dtype=np.float32)
    offset = 20
    vec_bytes = dim * 4
    for i in range(count):
        if offset + 4 > len(blob):
            raise Truncated(f"{path}: record {i} id length missing")
        (id_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + id_len + vec_bytes > len(blob):
            raise Truncated(f"{path}: record {i} ends past the file")
        ids.append(blob[offset: offset + id_len].decode("utf-8"))
        offset += id_len
        vec = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset)
        offset += vec_bytes
        if check_norms and (not np.all(np.isfinite(vec)) or not np.any(vec)):
            raise ZeroNormVector(f"{path}: record {ids[-1]}")
        rows[i] = vec
    return dim, ids, rows


def write_store(store: EmbeddingStore, path) -> int:
    """Persist a store plus its JSON sidecar; returns the byte count."""
    n = write_wfeb(path, store.dim, store.ids, store._rows)
    sidecar = {"path": Path(path).name, "dim": store.dim, "count": len(store), "kind": store.kind}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True))
    return n


def read_store(path, kind: str | None = None) -> EmbeddingStore:
    """Inverse of write_store; `kind` falls back to the sidecar, then 'high_res'."""
    if kind is None:
        sidecar = Path(str(path) + ".json")
        if sidecar.exists():
            kind = json.loads(sidecar.read_text()).get("kind", "high_res")
        else:
            kind = "high_res"
    dim, ids, rows = read_wfeb(path)
    store = EmbeddingStore(dim, kind)
    for rid, row in zip(ids, rows):
        store.add(rid, row)
    return store


# -- distillation targets ----------------------------------------------------

@dataclass(frozen=True)
class GlobalTarget:
    """Mean of the high-res child vectors inside one coarse patch."""

    parent_id: str
    vector: np.ndarray  # float64


def global_targets(high: EmbeddingStore, grid: PatchGrid) -> list[GlobalTarget]:
    """One target per coarse patch with children; mean taken in float64."""
    targets = []
    for coarse in grid.coarse:
        child_ids = grid.child_ids(coarse.row, coarse.col)
        if not child_ids:
            continue
        acc = np.zeros(high.dim, dtype=np.float64)
        for cid in child_ids:
            if cid not in high:
                raise MissingChildEmbedding(cid)
            acc += high.get(cid).astype(np.float64)
        targets.append(GlobalTarget(coarse.patch_id, acc / len(child_ids)))
    return targets
