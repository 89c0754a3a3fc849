"""Promptable-segmentation backends: contract, oracle, replay cache, HTTP client."""

from .base import (
    BACKGROUND,
    Backend,
    Box,
    CorruptionConfig,
    FOREGROUND,
    Prompt,
    ScoredMask,
    crop_handle,
    crop_image,
    image_digest,
    prompt_digest,
    validate_prompt,
)
from .http import HttpBackend, png_base64_gray, prompt_to_wire, wire_schema
from .oracle import OracleBackend
from .replay import ReplayBackend, is_miss, replay_lookup

__all__ = [
    "BACKGROUND",
    "Backend",
    "Box",
    "CorruptionConfig",
    "FOREGROUND",
    "HttpBackend",
    "OracleBackend",
    "Prompt",
    "ReplayBackend",
    "ScoredMask",
    "crop_handle",
    "crop_image",
    "image_digest",
    "is_miss",
    "png_base64_gray",
    "prompt_digest",
    "prompt_to_wire",
    "replay_lookup",
    "validate_prompt",
    "wire_schema",
]
