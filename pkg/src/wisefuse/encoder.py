"""Embedding providers and the call-counting gateway in front of them.

Three providers share one interface: a deterministic synthetic provider for
tests, a lookup provider serving precomputed stores, and an HTTP client for
the sidecar service. The gateway counts every encoded item per pipeline
stage; those counters are the hardware-independent cost ledger.
"""

from __future__ import annotations

import base64
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import requests

from ._kernels import fnv1a64
from .errors import (
    DimensionMismatch,
    EmptyBatch,
    MissingEmbedding,
    ProviderUnreachable,
    UnsupportedModality,
)
from .store import EmbeddingStore

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15
_TWO53 = float(1 << 53)


@dataclass(frozen=True)
class ProviderInfo:
    provider_id: str
    dim: int
    modality: str  # "vision", "text" or "both"


@dataclass(frozen=True)
class EncodeRequest:
    """Ordered batch of (id, payload) items; payloads are bytes or text."""

    items: list[tuple[str, bytes | str]]
    modality: str

    def validate(self) -> None:
        if not self.items:
            raise EmptyBatch("request has no items")
        if self.modality not in ("vision", "text"):
            raise UnsupportedModality(f"unknown modality {self.modality!r}")
        ids = [item_id for item_id, _ in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("item ids must be unique within a request")


def _mix64(x: int) -> int:
    """SplitMix64 output function."""
    x &= _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


def synthetic_vector(payload: bytes, dim: int, seed: int) -> np.ndarray:
    """Unit-norm float32 vector derived deterministically from the payload.

    Construction (pinned; the sidecar's echo mode mirrors it exactly):
    the SplitMix64 stream is seeded with mix64(seed) XOR fnv1a64(payload),
    each uniform is ((u64 >> 11) + 0.5) / 2^53, Gaussians come from the
    Box-Muller pair (cos then sin), and the vector is normalized by the
    ordered sum of squares in float64 before the float32 cast.
    """
    if dim <= 0:
        raise ValueError("dim must be positive")
    state = _mix64(seed & _MASK64) ^ fnv1a64(payload)

    gauss: list[float] = []
    while len(gauss) < dim:
        state = (state + _GAMMA) & _MASK64
        u1 = ((_mix64(state) >> 11) + 0.5) / _TWO53
        state = (state + _GAMMA) & _MASK64
        u2 = ((_mix64(state) >> 11) + 0.5) / _TWO53
        radius = math.sqrt(-2.0 * math.log(u1))
        gauss.append(radius * math.cos(math.tau * u2))
        if len(gauss) < dim:
            gauss.append(radius * math.sin(math.tau * u2))

    acc = 0.0
    for value in gauss:
        acc += value * value
    norm = math.sqrt(acc)
    return np.array([value / norm for value in gauss], dtype=np.float32)


class SyntheticProvider:
    """Hash-seeded deterministic embeddings; stands in for a real encoder."""

    def __init__(self, dim: int, seed: int = 0):
        self._info = ProviderInfo("synthetic", dim, "both")
        self.seed = seed

    def info(self) -> ProviderInfo:
        return self._info

    def encode(self, items, modality: str) -> list[np.ndarray]:
        out = []
        for _, payload in items:
            data = payload.encode("utf-8") if isinstance(payload, str) else payload
            out.append(synthetic_vector(data, self._info.dim, self.seed))
        return out


class LookupProvider:
    """Serves precomputed vectors by item id; payloads are ignored."""

    def __init__(self, *stores: EmbeddingStore, provider_id: str = "lookup"):
        dims = {s.dim for s in stores}
        if len(dims) != 1:
            raise DimensionMismatch(f"stores disagree on dim: {sorted(dims)}")
        self._stores = stores
        self._info = ProviderInfo(provider_id, dims.pop(), "both")

    def info(self) -> ProviderInfo:
        return self._info

    def encode(self, items, modality: str) -> list[np.ndarray]:
        out = []
        for item_id, _ in items:
            for store in self._stores:
                if item_id in store:
                    out.append(store.get(item_id))
                    break
            else:
                raise MissingEmbedding(item_id)
        return out


class RemoteProvider:
    """Client for the sidecar wire protocol (GET /info, POST /embed)."""

    def __init__(self, url: str, batch_max: int = 64, timeout: float = 30.0):
        self.url = url.rstrip("/")
        self.batch_max = batch_max
        self.timeout = timeout
        self._info: ProviderInfo | None = None

    def info(self) -> ProviderInfo:
        if self._info is None:
            try:
                resp = requests.get(f"{self.url}/info", timeout=self.timeout)
                resp.raise_for_status()
                doc = resp.json()
            except requests.RequestException as exc:
                raise ProviderUnreachable(f"GET {self.url}/info: {exc}") from exc
            self._info = ProviderInfo(doc["provider_id"], int(doc["dim"]), doc["modality"])
        return self._info

    def encode(self, items, modality: str) -> list[np.ndarray]:
        dim = self.info().dim
        out: list[np.ndarray] = []
        for start in range(0, len(items), self.batch_max):
            chunk = items[start: start + self.batch_max]
            body_items = []
            for item_id, payload in chunk:
                if isinstance(payload, str):
                    body_items.append({"id": item_id, "text": payload})
                else:
                    body_items.append(
                        {"id": item_id, "image_b64": base64.b64encode(payload).decode("ascii")}
                    )
            try:
                resp = requests.post(
                    f"{self.url}/embed",
                    json={"modality": modality, "items": body_items},
                    timeout=self.timeout,
                )
            except requests.RequestException as exc:
                raise ProviderUnreachable(f"POST {self.url}/embed: {exc}") from exc
            if resp.status_code != 200:
                raise ProviderUnreachable(
                    f"POST {self.url}/embed -> {resp.status_code}: {resp.text[:200]}"
                )
            rows = resp.json()["embeddings"]
            if len(rows) != len(chunk):
                raise DimensionMismatch(
                    f"asked for {len(chunk)} embeddings, got {len(rows)}"
                )
            for row in rows:
                if len(row) != dim:
                    raise DimensionMismatch(f"row length {len(row)} != dim {dim}")
                out.append(np.asarray(row, dtype=np.float32))
        return out


@dataclass
class GatewayStats:
    total_calls: int = 0
    stage_calls: dict = field(default_factory=dict)
    stage_ids: dict = field(default_factory=dict)


class EncoderGateway:
    """Shareable provider wrapper; counts submitted items per stage."""

    def __init__(self, provider):
        self.provider = provider
        self._lock = threading.Lock()
        self._stats = GatewayStats()
        self._stage = "unassigned"

    def info(self) -> ProviderInfo:
        return self.provider.info()

    @contextmanager
    def stage(self, name: str):
        previous = self._stage
        self._stage = name
        try:
            yield self
        finally:
            self._stage = previous

    def encode_batch(self, request: EncodeRequest, kind: str = "high_res") -> EmbeddingStore:
        request.validate()
        info = self.provider.info()
        if info.modality != "both" and info.modality != request.modality:
            raise UnsupportedModality(
                f"provider {info.provider_id} is {info.modality}-only, "
                f"request is {request.modality}"
            )
        vectors = self.provider.encode(request.items, request.modality)
        if len(vectors) != len(request.items):
            raise DimensionMismatch(
                f"provider returned {len(vectors)} vectors for {len(request.items)} items"
            )
        store = EmbeddingStore(info.dim, kind)
        for (item_id, _), vec in zip(request.items, vectors):
            if vec.shape != (info.dim,):
                raise DimensionMismatch(f"{item_id}: got shape {vec.shape}")
            store.add(item_id, vec)
        with self._lock:
            self._stats.total_calls += len(request.items)
            self._stats.stage_calls[self._stage] = (
                self._stats.stage_calls.get(self._stage, 0) + len(request.items)
            )
            self._stats.stage_ids.setdefault(self._stage, []).extend(
                item_id for item_id, _ in request.items
            )
        return store

    @property
    def total_calls(self) -> int:
        return self._stats.total_calls

    def stage_calls(self, name: str) -> int:
        return self._stats.stage_calls.get(name, 0)

    def stage_ids(self, name: str) -> list[str]:
        return list(self._stats.stage_ids.get(name, []))

    def all_stage_calls(self) -> dict:
        return dict(self._stats.stage_calls)
