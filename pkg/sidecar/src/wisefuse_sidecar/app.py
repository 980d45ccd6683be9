"""FastAPI application exposing the encoder wire protocol.

GET /info reports the loaded model; POST /embed returns one embedding row
per item, order preserved. Request validation is done by hand so the
status codes stay exactly 400 (malformed), 413 (batch too large) and
422 (unsupported modality) regardless of framework defaults.
"""

from __future__ import annotations

import base64
import binascii
from dataclasses import dataclass

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .synth import echo_vector

KNOWN_MODELS = ("echo",)
MODALITIES = ("vision", "text")


@dataclass
class SidecarConfig:
    model_id: str = "echo"
    dim: int = 32
    seed: int = 0
    batch_max: int = 64
    port: int = 8077

    def validate(self) -> None:
        if self.model_id not in KNOWN_MODELS:
            raise ValueError(
                f"unknown model_id {self.model_id!r}; available: {KNOWN_MODELS}"
            )
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if self.batch_max < 1:
            raise ValueError("batch_max must be >= 1")


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def create_app(config: SidecarConfig) -> FastAPI:
    config.validate()  # unknown models never reach serving
    app = FastAPI(title="wisefuse-sidecar")
    app.state.config = config
    app.state.loaded = True

    @app.get("/info")
    def info():
        if not app.state.loaded:
            return _error(503, "model not loaded")
        return {
            "provider_id": config.model_id,
            "dim": config.dim,
            "modality": "both",
        }

    @app.post("/embed")
    async def embed(request: Request):
        try:
            doc = await request.json()
        except Exception:
            return _error(400, "body is not valid JSON")
        if not isinstance(doc, dict):
            return _error(400, "body must be a JSON object")

        modality = doc.get("modality")
        if not isinstance(modality, str) or modality not in MODALITIES:
            return _error(422, f"unsupported modality {modality!r}")

        items = doc.get("items")
        if not isinstance(items, list) or not items:
            return _error(400, "items must be a nonempty list")
        if len(items) > config.batch_max:
            return _error(413, f"batch of {len(items)} exceeds {config.batch_max}")

        rows = []
        for index, item in enumerate(items):
            if not isinstance(item, dict) or "id" not in item:
                return _error(400, f"item {index} is malformed")
            if modality == "text":
                text = item.get("text")
                if not isinstance(text, str):
                    return _error(400, f"item {index} has no text payload")
                payload = text.encode("utf-8")
            else:
                blob = item.get("image_b64")
                if not isinstance(blob, str):
                    return _error(400, f"item {index} has no image payload")
                try:
                    payload = base64.b64decode(blob, validate=True)
                except binascii.Error:
                    return _error(400, f"item {index} image_b64 is not base64")
            rows.append(echo_vector(payload, config.dim, config.seed))
        return {"embeddings": rows}

    return app
