"""Client backend speaking the /v1 wire protocol to an inference service."""

from __future__ import annotations

import base64
import io
import json
import threading
import time
from importlib import resources

import httpx
import numpy as np
from PIL import Image

import jsonschema

from ..errors import (
    BackendUnavailableError,
    DataMismatchError,
    InvalidPromptError,
)
from ..geometry import ImageGray, RleMask, rle_decode
from .base import (
    Backend,
    Box,
    Prompt,
    ScoredMask,
    crop_handle,
    crop_image,
    prompt_digest,
    validate_prompt,
)

DEFAULT_TIMEOUT = 30.0
DEFAULT_RETRIES = 2
DEFAULT_MAX_IN_FLIGHT = 8
_BACKOFF_BASE = 0.5  # seconds; doubles per retry


def wire_schema() -> dict:
    """The packaged wire-protocol JSON schema."""
    raw = resources.files("grainkit.backends").joinpath("wire_schema.json").read_text()
    return json.loads(raw)


def png_base64_gray(image: ImageGray) -> str:
    """8-bit grayscale PNG of the image, base64-encoded."""
    arr = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def prompt_to_wire(image_id: str, prompt: Prompt) -> dict:
    """Wire-protocol predict body; point coordinates must be integral."""
    points = []
    for x, y, label in prompt.points:
        if x != int(x) or y != int(y):
            raise InvalidPromptError(
                f"wire protocol carries integer point coordinates, got ({x}, {y})"
            )
        points.append({"x": int(x), "y": int(y), "label": label})
    body: dict = {
        "image_id": image_id,
        "points": points,
        "box": list(prompt.box) if prompt.box is not None else None,
        "multimask": prompt.multimask,
    }
    if prompt.mask_input is None:
        body["mask_input"] = None
    else:
        body["mask_input"] = {
            "width": prompt.mask_input.width,
            "height": prompt.mask_input.height,
            "logits_base64": base64.b64encode(
                prompt.mask_input.logits.astype("<f4").tobytes()
            ).decode("ascii"),
        }
    return body


class HttpBackend(Backend):
    """Remote promptable segmenter behind the /v1 endpoints.

    Transport failures and 5xx responses are retried with exponential
    backoff; concurrent predict calls are capped by a semaphore.
    """

    backend_id = "http"

    def __init__(
        self,
        endpoint: str,
        client: httpx.Client | None = None,
        timeout: float = DEFAULT_TIMEOUT,
        retries: int = DEFAULT_RETRIES,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
        sleep=time.sleep,
    ):
        self.endpoint = endpoint.rstrip("/")
        self._client = client if client is not None else httpx.Client(timeout=timeout)
        self._retries = retries
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._dims: dict[str, tuple[int, int]] = {}
        schema = wire_schema()
        self._response_validator = jsonschema.Draft202012Validator(
            {"$ref": "#/$defs/PredictResponse", "$defs": schema["$defs"]}
        )

    def open(self, image_id: str, image: ImageGray, crop: Box | None = None) -> str:
        view = crop_image(image, crop)
        handle = crop_handle(image_id, crop)
        payload = {"image_id": handle, "png_base64": png_base64_gray(view)}
        reply = self._post("/v1/embed", payload)
        if reply.get("ok") is not True:
            raise DataMismatchError(f"embed of {handle!r} not acknowledged: {reply}")
        self._dims[handle] = (view.width, view.height)
        return handle

    def predict(self, handle: str, prompt: Prompt) -> list[ScoredMask]:
        dims = self._dims.get(handle)
        if dims is None:
            raise DataMismatchError(f"unknown image handle {handle!r}")
        width, height = dims
        validate_prompt(prompt, width, height)
        body = prompt_to_wire(handle, prompt)
        with self._slots:
            reply = self._post("/v1/predict", body)
        errors = sorted(self._response_validator.iter_errors(reply), key=str)
        if errors:
            raise DataMismatchError(f"malformed predict response: {errors[0].message}")
        digest = prompt_digest(prompt)
        out = []
        for entry in reply["masks"]:
            mask = rle_decode(RleMask.from_json_dict(entry["rle"]))
            if (mask.width, mask.height) != (width, height):
                raise DataMismatchError(
                    f"mask {mask.width}x{mask.height} for {width}x{height} view"
                )
            out.append(
                ScoredMask(
                    mask=mask,
                    predicted_iou=float(entry["predicted_iou"]),
                    stability=float(entry["stability"]),
                    provenance=(digest, handle, self.backend_id),
                )
            )
        return out

    def _post(self, path: str, body: dict) -> dict:
        url = self.endpoint + path
        last = "no attempt made"
        for attempt in range(self._retries + 1):
            if attempt:
                self._sleep(_BACKOFF_BASE * 2 ** (attempt - 1))
            try:
                resp = self._client.post(url, json=body)
            except httpx.HTTPError as exc:
                last = f"transport error: {exc}"
                continue
            if resp.status_code == 200:
                try:
                    return resp.json()
                except json.JSONDecodeError as exc:
                    raise DataMismatchError(f"{url} returned non-JSON body: {exc}") from exc
            if resp.status_code == 404:
                raise DataMismatchError(f"{url}: unknown image_id ({resp.text})")
            if resp.status_code == 422:
                raise InvalidPromptError(f"{url}: prompt rejected ({resp.text})")
            last = f"HTTP {resp.status_code}"
            if resp.status_code < 500 and resp.status_code != 503:
                break  # other 4xx will not improve on retry
        raise BackendUnavailableError(f"{url} unavailable after {self._retries + 1} attempts: {last}")
