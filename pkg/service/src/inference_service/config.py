"""Service configuration."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ServiceConfig:
    """Runtime knobs for the inference service.

    checkpoint None selects the deterministic stub predictor; a path
    selects a real segmentation checkpoint loaded on that device.
    """

    checkpoint: str | None = None
    device: str = "cpu"
    max_cached_embeddings: int = 8
    port: int = 8571

    def __post_init__(self):
        if self.max_cached_embeddings < 1:
            raise ValueError(
                f"max_cached_embeddings must be >= 1, got {self.max_cached_embeddings}"
            )
        if not (1 <= self.port <= 65535):
            raise ValueError(f"port must be in [1, 65535], got {self.port}")
