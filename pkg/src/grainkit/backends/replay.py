"""Record/replay cache for backend predictions.

The cache is an append-only directory of JSON records, one per
(image, prompt) pair, each carrying a content digest.  Replay-only mode
serves hits with no live backend at all; record mode fills misses from
an inner backend and persists the response before returning it.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from pathlib import Path

from ..errors import CacheCorruptError, DataMismatchError, IoError
from ..geometry import ImageGray, rle_decode, rle_encode, RleMask
from .base import (
    Backend,
    Box,
    Prompt,
    ScoredMask,
    crop_handle,
    crop_image,
    image_digest,
    prompt_digest,
)

RECORD_SCHEMA = "grainkit-replay/1"

_MISS = object()


def _canonical(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _content_digest(record: dict) -> str:
    body = {k: v for k, v in record.items() if k != "content_digest"}
    return hashlib.sha256(_canonical(body)).hexdigest()


def replay_lookup(cache_dir, img_digest: str, prm_digest: str):
    """Return the recorded response payload, or a miss sentinel.

    The payload is the parsed record dict; use `is_miss` to test the result.
    """
    path = Path(cache_dir) / img_digest / f"{prm_digest}.json"
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        return _MISS
    except OSError as exc:
        raise IoError(f"cannot read cache entry {path}: {exc}") from exc
    try:
        record = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CacheCorruptError(f"cache entry {path} is not valid JSON: {exc}") from exc
    if not isinstance(record, dict) or record.get("schema") != RECORD_SCHEMA:
        raise CacheCorruptError(f"cache entry {path} has unknown schema")
    if record.get("content_digest") != _content_digest(record):
        raise CacheCorruptError(f"cache entry {path} fails its content digest")
    if record.get("image_digest") != img_digest or record.get("prompt_digest") != prm_digest:
        raise CacheCorruptError(f"cache entry {path} is filed under the wrong key")
    return record


def is_miss(result) -> bool:
    return result is _MISS


class ReplayBackend(Backend):
    """Cache layer over an optional inner backend.

    With `inner=None` the backend is replay-only: a miss raises instead of
    reaching a live model, and no network activity can occur.
    """

    def __init__(self, cache_dir, inner: Backend | None = None):
        self.cache_dir = Path(cache_dir)
        self.inner = inner
        self.backend_id = f"replay({inner.backend_id})" if inner else "replay"
        self._digests: dict[str, str] = {}  # handle -> image digest
        self._write_lock = threading.Lock()

    def open(self, image_id: str, image: ImageGray, crop: Box | None = None) -> str:
        digest = image_digest(crop_image(image, crop))
        handle = crop_handle(image_id, crop)
        if self.inner is not None:
            handle = self.inner.open(image_id, image, crop)
        self._digests[handle] = digest
        return handle

    def predict(self, handle: str, prompt: Prompt) -> list[ScoredMask]:
        img_digest = self._digests.get(handle)
        if img_digest is None:
            raise DataMismatchError(f"unknown image handle {handle!r}")
        prm_digest = prompt_digest(prompt)
        record = replay_lookup(self.cache_dir, img_digest, prm_digest)
        if not is_miss(record):
            return self._decode(record, prm_digest, handle)
        if self.inner is None:
            raise DataMismatchError(
                f"replay-only cache has no entry for image {img_digest[:12]} "
                f"prompt {prm_digest[:12]}"
            )
        masks = self.inner.predict(handle, prompt)
        self._persist(img_digest, prm_digest, masks)
        return [
            ScoredMask(
                mask=m.mask,
                predicted_iou=m.predicted_iou,
                stability=m.stability,
                provenance=(prm_digest, handle, self.backend_id),
            )
            for m in masks
        ]

    def _decode(self, record: dict, prm_digest: str, handle: str) -> list[ScoredMask]:
        out = []
        for entry in record["masks"]:
            mask = rle_decode(RleMask.from_json_dict(entry["rle"]))
            out.append(
                ScoredMask(
                    mask=mask,
                    predicted_iou=float(entry["predicted_iou"]),
                    stability=float(entry["stability"]),
                    provenance=(prm_digest, handle, self.backend_id),
                )
            )
        return out

    def _persist(self, img_digest: str, prm_digest: str, masks: list[ScoredMask]) -> None:
        record = {
            "schema": RECORD_SCHEMA,
            "image_digest": img_digest,
            "prompt_digest": prm_digest,
            "backend_id": self.inner.backend_id,
            "masks": [
                {
                    "rle": rle_encode(m.mask).to_json_dict(),
                    "predicted_iou": m.predicted_iou,
                    "stability": m.stability,
                }
                for m in masks
            ],
        }
        record["content_digest"] = _content_digest(record)
        path = self.cache_dir / img_digest / f"{prm_digest}.json"
        with self._write_lock:
            if path.exists():  # append-only: first writer wins
                return
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                tmp = path.with_suffix(".tmp")
                tmp.write_bytes(_canonical(record))
                os.replace(tmp, path)
            except OSError as exc:
                raise IoError(f"cannot write cache entry {path}: {exc}") from exc
