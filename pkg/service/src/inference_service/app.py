"""FastAPI application exposing the /v1 segmentation wire protocol."""

from __future__ import annotations

import base64
import binascii
import threading

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt
from typing import Literal

from . import rle
from .cache import EmbeddingCache
from .config import ServiceConfig
from .predictor import BadImageError, load_predictor


class EmbedRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_id: str = Field(min_length=1)
    png_base64: str


class Point(BaseModel):
    model_config = ConfigDict(extra="forbid")

    x: NonNegativeInt
    y: NonNegativeInt
    label: Literal[0, 1]


class MaskInput(BaseModel):
    model_config = ConfigDict(extra="forbid")

    width: int = Field(ge=1)
    height: int = Field(ge=1)
    logits_base64: str


class PredictRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_id: str = Field(min_length=1)
    points: list[Point]
    box: tuple[NonNegativeInt, NonNegativeInt, NonNegativeInt, NonNegativeInt] | None
    mask_input: MaskInput | None
    multimask: bool


def _b64_bytes(payload: str, what: str) -> bytes:
    try:
        return base64.b64decode(payload, validate=True)
    except (binascii.Error, ValueError) as err:
        raise HTTPException(422, f"{what} is not valid base64: {err}") from err


def _decode_mask_input(spec: MaskInput) -> np.ndarray:
    raw = _b64_bytes(spec.logits_base64, "mask_input.logits_base64")
    expected = spec.width * spec.height * 4
    if len(raw) != expected:
        raise HTTPException(
            422,
            f"mask_input carries {len(raw)} bytes, "
            f"{spec.width}x{spec.height} float32 needs {expected}",
        )
    logits = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return logits.reshape(spec.height, spec.width)


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    """Application with its own predictor, embedding cache, and model lock."""
    config = config if config is not None else ServiceConfig()
    predictor = load_predictor(config)
    cache = EmbeddingCache(config.max_cached_embeddings)
    # one model, one request at a time; embeds and predicts share the lock
    model_lock = threading.Lock()

    app = FastAPI(title="inference-service")
    app.state.config = config
    app.state.predictor = predictor
    app.state.cache = cache

    @app.post("/v1/embed")
    def embed(req: EmbedRequest) -> dict:
        png = _b64_bytes(req.png_base64, "png_base64")
        with model_lock:
            try:
                pixels = predictor.embed(png)
            except BadImageError as err:
                raise HTTPException(422, str(err)) from err
            try:
                cache.put(req.image_id, pixels)
            except MemoryError as err:
                raise HTTPException(507, f"embedding cache refused the insert: {err}") from err
        return {"ok": True}

    @app.post("/v1/predict")
    def predict(req: PredictRequest) -> dict:
        pixels = cache.get(req.image_id)
        if pixels is None:
            raise HTTPException(404, f"no embedding for image_id {req.image_id!r}")
        height, width = pixels.shape
        for p in req.points:
            if p.x >= width or p.y >= height:
                raise HTTPException(
                    422, f"point ({p.x}, {p.y}) outside {width}x{height} image"
                )
        if req.box is not None:
            x0, y0, x1, y1 = req.box
            if x1 > width or y1 > height or x0 >= x1 or y0 >= y1:
                raise HTTPException(
                    422, f"box {list(req.box)} invalid for {width}x{height} image"
                )
        mask_arr = _decode_mask_input(req.mask_input) if req.mask_input is not None else None
        points = [(p.x, p.y, p.label) for p in req.points]
        with model_lock:
            results = predictor.predict(pixels, points, req.box, mask_arr, req.multimask)
        return {
            "masks": [
                {
                    "rle": rle.encode(r.mask),
                    "predicted_iou": min(1.0, max(0.0, float(r.predicted_iou))),
                    "stability": min(1.0, max(0.0, float(r.stability))),
                }
                for r in results
            ]
        }

    @app.get("/healthz")
    def healthz() -> dict:
        return {"model_loaded": bool(getattr(predictor, "model_loaded", False))}

    return app
