"""Artifact persistence: images, label maps, mask sets, and run manifests."""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataMismatchError, IoError
from .geometry import BitMask, ImageGray, LabelMap, RleMask, rle_decode, rle_encode
from .pipeline import SegmentationResult
from .backends.base import ScoredMask

MASKS_SCHEMA = "grainkit-masks/1"
MANIFEST_SCHEMA = "grainkit-manifest/1"
MAX_LABEL_VALUE = 65535

_SVG_DATA = re.compile(rb"<!--data\n(.*?)-->", re.S)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj) -> str:
    """Deterministic human-readable JSON rendering."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_text(path: Path, text: str) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    except OSError as err:
        raise IoError(f"cannot write {path}: {err}") from err


def read_text(path: Path) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise IoError(f"cannot read {path}: {err}") from err


def write_json(path: Path, obj) -> None:
    write_text(path, canonical_json(obj))


def read_json(path: Path):
    text = read_text(path)
    try:
        return json.loads(text)
    except json.JSONDecodeError as err:
        raise DataMismatchError(f"{path} is not valid JSON: {err}") from err


def save_image_png(path: Path, image: ImageGray) -> None:
    levels = np.rint(np.asarray(image.pixels) * 255.0).astype(np.uint8)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(levels, mode="L").save(path, format="PNG")
    except OSError as err:
        raise IoError(f"cannot write {path}: {err}") from err


def load_image_png(path: Path) -> ImageGray:
    try:
        with Image.open(path) as img:
            levels = np.asarray(img.convert("L"), dtype=np.float64)
    except (OSError, UnidentifiedImageError) as err:
        raise IoError(f"cannot read image {path}: {err}") from err
    return ImageGray(levels / 255.0)


def save_labels_png(path: Path, lm: LabelMap) -> None:
    if lm.n_grains > MAX_LABEL_VALUE:
        raise DataMismatchError(
            f"{lm.n_grains} grains exceed the 16-bit label limit {MAX_LABEL_VALUE}"
        )
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(lm.labels.astype(np.uint16)).save(path, format="PNG")
    except OSError as err:
        raise IoError(f"cannot write {path}: {err}") from err


def load_labels_png(path: Path) -> LabelMap:
    try:
        with Image.open(path) as img:
            labels = np.asarray(img, dtype=np.int32)
    except (OSError, UnidentifiedImageError) as err:
        raise IoError(f"cannot read labels {path}: {err}") from err
    return LabelMap(labels)


def _mask_record(m: ScoredMask) -> dict:
    rle = rle_encode(m.mask)
    return {
        "rle": {"width": rle.width, "height": rle.height, "counts": list(rle.counts)},
        "predicted_iou": m.predicted_iou,
        "stability": m.stability,
        "provenance": list(m.provenance),
    }


def _record_mask(obj: dict) -> ScoredMask:
    try:
        rle = obj["rle"]
        mask = rle_decode(
            RleMask(width=rle["width"], height=rle["height"],
                    counts=tuple(rle["counts"]))
        )
        return ScoredMask(
            mask=mask,
            predicted_iou=float(obj["predicted_iou"]),
            stability=float(obj["stability"]),
            provenance=tuple(obj["provenance"]),
        )
    except (KeyError, TypeError, ValueError) as err:
        raise DataMismatchError(f"malformed mask record: {err}") from err


def masks_to_json(result: SegmentationResult) -> dict:
    return {
        "schema": MASKS_SCHEMA,
        "config_digest": result.config_digest,
        "partial": result.partial,
        "prompts_used": [list(p) for p in result.prompts_used],
        "masks": [_mask_record(m) for m in result.masks],
        "prefilter_masks": [_mask_record(m) for m in result.prefilter_masks],
    }


def json_to_masks(obj: dict) -> SegmentationResult:
    if not isinstance(obj, dict) or obj.get("schema") != MASKS_SCHEMA:
        raise DataMismatchError(f"not a {MASKS_SCHEMA} document")
    try:
        return SegmentationResult(
            masks=[_record_mask(m) for m in obj["masks"]],
            prefilter_masks=[_record_mask(m) for m in obj["prefilter_masks"]],
            prompts_used=[(int(x), int(y)) for x, y in obj["prompts_used"]],
            config_digest=str(obj["config_digest"]),
            partial=bool(obj["partial"]),
        )
    except (KeyError, TypeError, ValueError) as err:
        raise DataMismatchError(f"malformed masks document: {err}") from err


def save_masks(path: Path, result: SegmentationResult) -> None:
    write_json(path, masks_to_json(result))


def load_masks(path: Path) -> SegmentationResult:
    return json_to_masks(read_json(path))


def save_coverage_png(path: Path, cov: BitMask) -> None:
    save_image_png(path, ImageGray(cov.to_array().astype(np.float64)))


def pixel_digest(path: Path) -> str:
    """Content digest of a raster file's decoded pixels, not its bytes."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img)
            header = f"{img.mode}:{img.width}x{img.height}:".encode()
    except (OSError, UnidentifiedImageError) as err:
        raise IoError(f"cannot read raster {path}: {err}") from err
    return sha256_hex(header + arr.tobytes())


def svg_data_digest(path: Path) -> str:
    """Content digest of an SVG's embedded data table, or its bytes."""
    try:
        blob = Path(path).read_bytes()
    except OSError as err:
        raise IoError(f"cannot read {path}: {err}") from err
    found = _SVG_DATA.search(blob)
    return sha256_hex(found.group(1) if found else blob)


def artifact_entry(path: Path) -> dict:
    """Kind plus content digest for one output file."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        return {"kind": "png", "digest": pixel_digest(path)}
    if suffix == ".svg":
        return {"kind": "svg", "digest": svg_data_digest(path)}
    kind = "csv" if suffix == ".csv" else "json"
    try:
        return {"kind": kind, "digest": sha256_hex(path.read_bytes())}
    except OSError as err:
        raise IoError(f"cannot read {path}: {err}") from err


def write_manifest(
    out_dir: Path,
    command: str,
    parameters: dict,
    inputs: dict[str, str],
    artifacts: list[str],
    timings: dict[str, float],
    volatile: tuple[str, ...] = ("timing.json",),
) -> Path:
    """Manifest of a run: parameters, input digests, artifact digests.

    Volatile files (timings) are listed without digests so re-runs stay
    digest-identical.
    """
    out_dir = Path(out_dir)
    table = {}
    for name in sorted(artifacts):
        if name in volatile:
            continue
        table[name] = artifact_entry(out_dir / name)
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "command": command,
        "parameters": parameters,
        "inputs": inputs,
        "artifacts": table,
        "volatile": sorted(n for n in artifacts if n in volatile),
        "timings": timings,
    }
    path = out_dir / "manifest.json"
    write_json(path, manifest)
    return path


def manifest_stable_view(manifest: dict) -> dict:
    """The manifest minus its wall-clock fields, for byte comparisons."""
    return {k: v for k, v in manifest.items() if k != "timings"}
