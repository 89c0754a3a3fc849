"""Command-line entry point: serve the app with uvicorn."""

from __future__ import annotations

import argparse

from .app import create_app
from .config import ServiceConfig


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(prog="inference-service")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=ServiceConfig.port)
    parser.add_argument("--checkpoint", default=None, help="model weights; omit for the stub")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--max-cached-embeddings", type=int, default=8)
    args = parser.parse_args(argv)
    config = ServiceConfig(
        checkpoint=args.checkpoint,
        device=args.device,
        max_cached_embeddings=args.max_cached_embeddings,
        port=args.port,
    )
    try:
        import uvicorn
    except ImportError as err:  # pragma: no cover - serve extra not installed
        raise SystemExit("serving needs uvicorn: pip install inference-service[serve]") from err
    uvicorn.run(create_app(config), host=args.host, port=config.port)


if __name__ == "__main__":
    main()
