"""The promptable-segmentation contract shared by every backend."""

from __future__ import annotations

import base64
import hashlib
import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from math import floor, isfinite

from ..errors import InvalidConfigError, InvalidPromptError
from ..geometry import BitMask, ImageGray, SoftMask, binarize

FOREGROUND = 1
BACKGROUND = 0

Box = tuple[int, int, int, int]  # half-open (x0, y0, x1, y1)


@dataclass(frozen=True)
class Prompt:
    """Any combination of labeled points, a box, and a low-resolution mask."""

    points: tuple[tuple[float, float, int], ...] = ()
    box: Box | None = None
    mask_input: SoftMask | None = None
    multimask: bool = True

    def __post_init__(self):
        points = tuple((float(x), float(y), int(label)) for x, y, label in self.points)
        object.__setattr__(self, "points", points)
        if not points and self.box is None and self.mask_input is None:
            raise InvalidPromptError("prompt needs points, a box, or a mask input")
        for x, y, label in points:
            if not (isfinite(x) and isfinite(y)):
                raise InvalidPromptError(f"non-finite point ({x}, {y})")
            if label not in (FOREGROUND, BACKGROUND):
                raise InvalidPromptError(f"point label must be 0 or 1, got {label}")
        if self.box is not None:
            box = tuple(int(v) for v in self.box)
            x0, y0, x1, y1 = box
            if x0 >= x1 or y0 >= y1:
                raise InvalidPromptError(f"box must be nonempty half-open, got {box}")
            object.__setattr__(self, "box", box)

    def foreground_points(self) -> tuple[tuple[float, float], ...]:
        return tuple((x, y) for x, y, label in self.points if label == FOREGROUND)


def validate_prompt(prompt: Prompt, width: int, height: int) -> None:
    """Check the prompt against image bounds."""
    for x, y, _ in prompt.points:
        if not (0 <= x < width and 0 <= y < height):
            raise InvalidPromptError(
                f"point ({x}, {y}) outside {width}x{height} image"
            )
    if prompt.box is not None:
        x0, y0, x1, y1 = prompt.box
        if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
            raise InvalidPromptError(
                f"box {prompt.box} outside {width}x{height} image"
            )


def point_pixel(x: float, y: float) -> tuple[int, int]:
    """The pixel containing a point coordinate (pixel i spans [i, i+1))."""
    return floor(x), floor(y)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def prompt_digest(prompt: Prompt) -> str:
    """Canonical 256-bit digest of a prompt, stable across platforms."""
    obj: dict = {
        "points": [[_fmt(x), _fmt(y), label] for x, y, label in prompt.points],
        "box": list(prompt.box) if prompt.box is not None else None,
        "multimask": prompt.multimask,
    }
    if prompt.mask_input is None:
        obj["mask_input"] = None
    else:
        obj["mask_input"] = {
            "width": prompt.mask_input.width,
            "height": prompt.mask_input.height,
            "tau": _fmt(prompt.mask_input.tau),
            "logits_b64": base64.b64encode(
                prompt.mask_input.logits.astype("<f4").tobytes()
            ).decode("ascii"),
        }
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def image_digest(image: ImageGray) -> str:
    """Content digest of an image's pixel grid."""
    h = hashlib.sha256(b"grainkit-image/1")
    h.update(image.width.to_bytes(4, "little"))
    h.update(image.height.to_bytes(4, "little"))
    h.update(image.pixels.astype("<f8").tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class ScoredMask:
    """A predicted mask with its quality scores and origin."""

    mask: BitMask
    predicted_iou: float
    stability: float
    provenance: tuple[str, str, str]  # (prompt digest, crop id, backend id)
    soft: SoftMask | None = None

    def __post_init__(self):
        if not (0.0 <= self.predicted_iou <= 1.0):
            raise ValueError(f"predicted_iou outside [0,1]: {self.predicted_iou}")
        if not (0.0 <= self.stability <= 1.0):
            raise ValueError(f"stability outside [0,1]: {self.stability}")
        if self.soft is not None and binarize(self.soft, self.soft.tau) != self.mask:
            raise ValueError("soft mask does not binarize to the hard mask")


@dataclass(frozen=True)
class CorruptionConfig:
    """Knobs emulating the failure modes of a real promptable segmenter."""

    p_miss: float = 0.0
    p_merge_low_contrast: float = 0.0
    p_split_texture: float = 0.0
    boundary_jitter: float = 0.0
    asymmetric_merge: bool = False
    predicted_iou_noise: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("p_miss", "p_merge_low_contrast", "p_split_texture"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise InvalidConfigError(f"{name} must be in [0,1], got {v}")
        if self.boundary_jitter < 0:
            raise InvalidConfigError(
                f"boundary_jitter must be >= 0, got {self.boundary_jitter}"
            )
        if self.predicted_iou_noise < 0:
            raise InvalidConfigError(
                f"predicted_iou_noise must be >= 0, got {self.predicted_iou_noise}"
            )
        if not (0 <= int(self.rng_seed) < 2**64):
            raise InvalidConfigError(f"rng_seed must fit in 64 bits, got {self.rng_seed}")


class Backend(ABC):
    """A promptable segmenter.

    `open` prepares a (possibly cropped) view of an image and returns the
    handle later passed to `predict`; masks come back in the view's own
    coordinate frame.  Implementations must be deterministic given
    (backend id, seed, image, prompt) and tolerate concurrent predict calls.
    """

    backend_id: str = "backend"

    @abstractmethod
    def open(self, image_id: str, image: ImageGray, crop: Box | None = None) -> str:
        raise NotImplementedError

    @abstractmethod
    def predict(self, handle: str, prompt: Prompt) -> list[ScoredMask]:
        raise NotImplementedError


def crop_handle(image_id: str, crop: Box | None) -> str:
    if crop is None:
        return image_id
    x0, y0, x1, y1 = crop
    return f"{image_id}@{x0},{y0},{x1},{y1}"


def crop_image(image: ImageGray, crop: Box | None) -> ImageGray:
    if crop is None:
        return image
    x0, y0, x1, y1 = crop
    if not (0 <= x0 < x1 <= image.width and 0 <= y0 < y1 <= image.height):
        raise InvalidPromptError(f"crop {crop} outside {image.width}x{image.height}")
    return ImageGray(image.pixels[y0:y1, x0:x1])
