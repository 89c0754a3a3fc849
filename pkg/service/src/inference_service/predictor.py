"""Predictors: the deterministic stub and the real-checkpoint adapter.

A predictor owns two steps: embed() turns PNG bytes into a reusable
per-image state, predict() answers one prompt against that state with
a list of (mask, predicted_iou, stability) triples.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .config import ServiceConfig

# logit scale: 1 logit unit = 0.04 intensity, so the stability probe at
# cutoff +-1 measures a 4%-intensity band around the region edge
_LOGIT_SCALE = 25.0
_OUTSIDE_LOGIT = -1e6
_SINGLE_TOL = 0.12
_MULTI_TOLS = (0.2, 0.12, 0.06)  # coarse-to-fine, mirroring whole/part/subpart


class BadImageError(ValueError):
    """The embed payload does not decode to an image."""


@dataclass(frozen=True)
class PredictedMask:
    mask: np.ndarray  # 2-d bool
    predicted_iou: float
    stability: float


def decode_png_gray(png_bytes: bytes) -> np.ndarray:
    """Grayscale [0,1] float array from PNG bytes."""
    try:
        with Image.open(io.BytesIO(png_bytes)) as img:
            arr = np.asarray(img.convert("L"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, ValueError) as err:
        raise BadImageError(f"payload is not a decodable image: {err}") from err
    return arr / 255.0


def stability_from_logits(logits: np.ndarray, delta: float = 1.0) -> float:
    """IoU between the binarizations at cutoff +delta and -delta."""
    upper = logits >= delta
    lower = logits >= -delta
    union = int(lower.sum())
    if union == 0:
        return 0.0
    return int((upper & lower).sum()) / union


def _scored(logits: np.ndarray) -> PredictedMask:
    mask = logits >= 0.0
    stability = stability_from_logits(logits)
    predicted_iou = min(1.0, 0.5 + 0.5 * stability)
    return PredictedMask(mask=mask, predicted_iou=predicted_iou, stability=stability)


class StubPredictor:
    """Checkpoint-free predictor: grows an intensity-similar connected
    region around the prompt.  Deterministic given the image bytes."""

    model_loaded = True

    def embed(self, png_bytes: bytes) -> np.ndarray:
        return decode_png_gray(png_bytes)

    def predict(
        self,
        pixels: np.ndarray,
        points: list[tuple[int, int, int]],
        box: tuple[int, int, int, int] | None,
        mask_input: np.ndarray | None,
        multimask: bool,
    ) -> list[PredictedMask]:
        if points and any(label == 1 for _, _, label in points):
            seed = next((x, y) for x, y, label in points if label == 1)
            make = lambda tol: self._region_logits(pixels, seed, tol, None)
        elif box is not None:
            x0, y0, x1, y1 = box
            seed = ((x0 + x1) // 2, (y0 + y1) // 2)
            make = lambda tol: self._region_logits(pixels, seed, tol, box)
        elif mask_input is not None:
            up = self._upsample(mask_input, pixels.shape)
            # cutoff shifts stand in for tolerance levels
            return [_scored(up - shift) for shift in ((-1.0, 0.0, 1.0) if multimask else (0.0,))]
        else:
            return []
        tols = _MULTI_TOLS if multimask else (_SINGLE_TOL,)
        return [_scored(make(tol)) for tol in tols]

    @staticmethod
    def _region_logits(
        pixels: np.ndarray,
        seed: tuple[int, int],
        tol: float,
        box: tuple[int, int, int, int] | None,
    ) -> np.ndarray:
        sx, sy = seed
        similar = np.abs(pixels - pixels[sy, sx]) <= tol
        if box is not None:
            window = np.zeros_like(similar)
            window[box[1] : box[3], box[0] : box[2]] = True
            similar &= window
            similar[sy, sx] = True  # degenerate boxes still own their seed
        labels, _ = ndimage.label(similar)
        region = labels == labels[sy, sx]
        logits = np.full(pixels.shape, _OUTSIDE_LOGIT)
        logits[region] = (tol - np.abs(pixels - pixels[sy, sx])[region]) * _LOGIT_SCALE
        return logits

    @staticmethod
    def _upsample(logits: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
        lh, lw = logits.shape
        h, w = shape
        ys = np.minimum((np.arange(h) * lh) // h, lh - 1)
        xs = np.minimum((np.arange(w) * lw) // w, lw - 1)
        return logits[np.ix_(ys, xs)]


class TorchSamPredictor:
    """Adapter for a real segment-anything checkpoint.

    Imports torch lazily so the stub path never needs it; raises at
    construction when the runtime dependencies are missing.
    """

    model_loaded = True

    def __init__(self, checkpoint: str, device: str):
        try:
            import torch  # noqa: F401
            from segment_anything import SamPredictor, sam_model_registry
        except ImportError as err:
            raise RuntimeError(
                "checkpoint serving needs the torch and segment_anything packages"
            ) from err
        model = sam_model_registry["vit_h"](checkpoint=checkpoint)
        model.to(device)
        self._predictor = SamPredictor(model)

    def embed(self, png_bytes: bytes) -> np.ndarray:
        pixels = decode_png_gray(png_bytes)
        rgb = np.repeat((pixels[:, :, None] * 255.0).astype(np.uint8), 3, axis=2)
        self._predictor.set_image(rgb)
        return pixels

    def predict(self, pixels, points, box, mask_input, multimask) -> list[PredictedMask]:
        import numpy as np  # local alias keeps the signature torch-free

        coords = np.array([[x, y] for x, y, _ in points]) if points else None
        labels = np.array([label for _, _, label in points]) if points else None
        box_arr = np.array(box, dtype=np.float64) if box is not None else None
        mask_arr = mask_input[None, :, :] if mask_input is not None else None
        masks, scores, logits = self._predictor.predict(
            point_coords=coords,
            point_labels=labels,
            box=box_arr,
            mask_input=mask_arr,
            multimask_output=multimask,
        )
        out = []
        for k in range(masks.shape[0]):
            up = StubPredictor._upsample(logits[k], pixels.shape)
            out.append(
                PredictedMask(
                    mask=masks[k].astype(bool),
                    predicted_iou=float(np.clip(scores[k], 0.0, 1.0)),
                    stability=stability_from_logits(up),
                )
            )
        return out


def load_predictor(config: ServiceConfig):
    if config.checkpoint is None:
        return StubPredictor()
    return TorchSamPredictor(config.checkpoint, config.device)
