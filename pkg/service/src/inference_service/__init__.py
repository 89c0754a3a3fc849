"""HTTP inference service for promptable segmentation.

Serves the /v1 wire protocol: embed an image once, then answer point,
box, and mask prompts with RLE-encoded masks.  A deterministic stub
predictor stands in when no model checkpoint is configured.
"""

from .app import create_app
from .config import ServiceConfig

__all__ = ["ServiceConfig", "create_app"]
