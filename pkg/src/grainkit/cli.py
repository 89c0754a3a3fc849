"""Command-line surface tying the modules into reproducible experiments."""

from __future__ import annotations

import functools
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import click
import numpy as np

from . import io
from .backends import CorruptionConfig, HttpBackend, OracleBackend, ReplayBackend
from .errors import (
    GrainkitError,
    GrainSetMismatchError,
    InvalidConfigError,
    IoError,
)
from .evaluation import (
    PROPERTY_NAMES,
    comparison_report,
    histogram_to_csv,
    ks_statistic,
    match,
    miou,
    paired_bootstrap_ci,
    property_histograms,
    triage,
    triage_to_csv,
)
from .geometry import ImageGray, grain_properties, labelmap_to_masks
from .pipeline import (
    SCORER_EDGE_ALIGNMENT,
    SCORER_PREDICTED_IOU,
    IterativeConfig,
    PipelineConfig,
    amg_generate,
    config_digest,
    coverage,
    default_boundary,
    iterative_segment,
)
from .svg import histogram_svg
from .synth import SynthConfig, generate

EVAL_SCHEMA = "grainkit-eval/1"
TRIAGE_SCHEMA = "grainkit-triage/1"
DEFAULT_BINS = 20
SCORER_FLAGS = {"pred-iou": SCORER_PREDICTED_IOU, "edge-align": SCORER_EDGE_ALIGNMENT}


def forward_errors(fn):
    """Map toolkit exceptions onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except GrainkitError as err:
            click.echo(f"error: {err}", err=True)
            sys.exit(err.exit_code)
        except OSError as err:
            click.echo(f"error: {err}", err=True)
            sys.exit(IoError.exit_code)

    return wrapper


def parse_thresholds(text: str) -> list[float]:
    """A single value, or an inclusive start:stop:step sweep."""
    parts = text.split(":")
    try:
        if len(parts) == 1:
            values = [float(parts[0])]
        elif len(parts) == 3:
            start, stop, step = (float(p) for p in parts)
            if step <= 0:
                raise InvalidConfigError(f"threshold step must be > 0, got {step}")
            if stop < start:
                raise InvalidConfigError(f"threshold stop {stop} below start {start}")
            values = []
            k = 0
            while start + k * step <= stop + 1e-9:
                values.append(round(start + k * step, 10))
                k += 1
        else:
            raise InvalidConfigError(
                f"thresholds must be VALUE or START:STOP:STEP, got {text!r}"
            )
    except ValueError as err:
        raise InvalidConfigError(f"bad threshold syntax {text!r}: {err}") from err
    if any(not 0.0 < v < 1.0 for v in values):
        raise InvalidConfigError(f"thresholds must lie in (0, 1), got {values}")
    return values


def _dataclass_from(cls, fields: dict, what: str):
    try:
        return cls(**fields)
    except TypeError as err:
        raise InvalidConfigError(f"bad {what} config: {err}") from err


def load_synth_config(path: str | None, seed: int | None) -> SynthConfig:
    fields = dict(io.read_json(path)) if path else {}
    if "size_mixture" in fields:
        fields["size_mixture"] = tuple(tuple(c) for c in fields["size_mixture"])
    if seed is not None:
        fields["rng_seed"] = seed
    return _dataclass_from(SynthConfig, fields, "synth")


def load_pipeline_configs(path: str | None) -> tuple[PipelineConfig, IterativeConfig]:
    obj = io.read_json(path) if path else {}
    if not isinstance(obj, dict) or set(obj) - {"pipeline", "iterative"}:
        raise InvalidConfigError(
            'pipeline config must be an object with keys "pipeline" and/or "iterative"'
        )
    return (
        _dataclass_from(PipelineConfig, obj.get("pipeline", {}), "pipeline"),
        _dataclass_from(IterativeConfig, obj.get("iterative", {}), "iterative"),
    )


def build_backend(
    name: str,
    endpoint: str | None,
    cache: str | None,
    corruption: str | None,
    seed: int,
):
    """Backend instance per the flag combination; oracle is unregistered."""
    if name == "oracle":
        fields = dict(io.read_json(corruption)) if corruption else {}
        fields.setdefault("rng_seed", seed)
        inner = OracleBackend(_dataclass_from(CorruptionConfig, fields, "corruption"))
    elif name == "http":
        if not endpoint:
            raise InvalidConfigError(
                "--backend http needs --endpoint or GRAINKIT_HTTP_ENDPOINT"
            )
        inner = HttpBackend(endpoint)
    elif name == "replay":
        inner = None
    else:
        raise InvalidConfigError(f"unknown backend {name!r}")
    if cache is not None:
        return ReplayBackend(Path(cache), inner=inner)
    if inner is None:
        raise InvalidConfigError("--backend replay needs --cache")
    return inner


def _register_oracle(backend, image_id, labels) -> None:
    target = backend.inner if isinstance(backend, ReplayBackend) else backend
    if isinstance(target, OracleBackend):
        if labels is None:
            raise InvalidConfigError("the oracle backend requires --labels")
        target.register(image_id, labels)


backend_options = [
    click.option("--backend", "backend_name",
                 type=click.Choice(["oracle", "http", "replay"]), default="oracle",
                 show_default=True, help="Prediction backend."),
    click.option("--endpoint", envvar="GRAINKIT_HTTP_ENDPOINT", default=None,
                 help="HTTP backend URL (env GRAINKIT_HTTP_ENDPOINT)."),
    click.option("--cache", type=click.Path(), default=None,
                 help="Replay cache directory; wraps the chosen backend."),
    click.option("--corruption", type=click.Path(exists=False), default=None,
                 help="Oracle corruption config JSON."),
]


def with_backend_options(fn):
    for option in reversed(backend_options):
        fn = option(fn)
    return fn


@click.group()
def main():
    """Grain micrograph segmentation toolkit."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="SynthConfig JSON.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--count", type=int, default=1, show_default=True,
              help="Images to generate at consecutive seeds.")
@forward_errors
def gen(config_path, out_dir, seed, count):
    """Generate synthetic micrographs with ground-truth labels."""
    if count < 1:
        raise InvalidConfigError(f"--count must be >= 1, got {count}")
    t0 = time.perf_counter()
    base = load_synth_config(config_path, seed)
    out = Path(out_dir)
    artifacts = []
    for k in range(count):
        cfg = replace(base, rng_seed=base.rng_seed + k)
        lm, image = generate(cfg)
        member = Path(str(cfg.rng_seed))
        io.save_image_png(out / member / "image.png", image)
        io.save_labels_png(out / member / "labels.png", lm)
        io.write_json(out / member / "config.json", asdict(cfg))
        artifacts += [str(member / n) for n in ("image.png", "labels.png", "config.json")]
        click.echo(f"seed {cfg.rng_seed}: {lm.n_grains} grains -> {out / member}")
    timings = {"generate": time.perf_counter() - t0}
    io.write_json(out / "timing.json", timings)
    io.write_manifest(
        out, "gen",
        parameters={"seed": base.rng_seed, "count": count,
                    "config_digest": config_digest(base)},
        inputs={}, artifacts=artifacts + ["timing.json"], timings=timings,
    )
    click.echo(f"wrote {out / 'manifest.json'}")


@main.command()
@click.argument("image_path", type=click.Path())
@with_backend_options
@click.option("--labels", "labels_path", type=click.Path(), default=None,
              help="Ground-truth labels PNG (oracle backend).")
@click.option("--prompt-mode", type=click.Choice(["grid", "iterative"]),
              default="grid", show_default=True)
@click.option("--nms-score", type=click.Choice(sorted(SCORER_FLAGS)),
              default="pred-iou", show_default=True)
@click.option("--config", "config_path", type=click.Path(), default=None,
              help='JSON with "pipeline" and/or "iterative" sections.')
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@forward_errors
def segment(image_path, backend_name, endpoint, cache, corruption, labels_path,
            prompt_mode, nms_score, config_path, seed, workers, out_dir):
    """Segment one micrograph into grain masks."""
    image = io.load_image_png(image_path)
    labels = io.load_labels_png(labels_path) if labels_path else None
    image_id = Path(image_path).stem
    backend = build_backend(backend_name, endpoint, cache, corruption, seed)
    _register_oracle(backend, image_id, labels)
    pcfg, icfg = load_pipeline_configs(config_path)
    pcfg = replace(pcfg, nms_scorer=SCORER_FLAGS[nms_score])
    out = Path(out_dir)
    artifacts = ["masks.json", "coverage.png", "timing.json"]
    boundary = None
    if pcfg.nms_scorer == SCORER_EDGE_ALIGNMENT:
        boundary = default_boundary(image)
        io.save_coverage_png(out / "boundary.png", boundary.mask)
        artifacts.append("boundary.png")
    run = amg_generate if prompt_mode == "grid" else iterative_segment
    kwargs = dict(image_id=image_id, boundary=boundary, workers=workers)
    if prompt_mode == "iterative":
        kwargs["it"] = icfg
    try:
        result = run(image, backend, pcfg, **kwargs)
    except GrainkitError as err:
        partial = getattr(err, "partial_result", None)
        if partial is not None:
            io.save_masks(out / "masks.json", partial)
            click.echo(f"wrote partial {out / 'masks.json'}", err=True)
        raise
    io.save_masks(out / "masks.json", result)
    cov = coverage([m.mask for m in result.masks], image.width, image.height)
    io.save_coverage_png(out / "coverage.png", cov)
    io.write_json(out / "timing.json", result.timing)
    inputs = {Path(image_path).name: io.pixel_digest(image_path)}
    if labels_path:
        inputs[Path(labels_path).name] = io.pixel_digest(labels_path)
    io.write_manifest(
        out, "segment",
        parameters={
            "backend": backend.backend_id, "prompt_mode": prompt_mode,
            "nms_score": nms_score, "seed": seed, "workers": workers,
            "pipeline_digest": config_digest(pcfg),
            "iterative_digest": config_digest(icfg),
        },
        inputs=inputs, artifacts=artifacts, timings=result.timing,
    )
    click.echo(
        f"{len(result.masks)} masks from {len(result.prompts_used)} prompts "
        f"({cov.area / (image.width * image.height):.1%} coverage) -> {out}"
    )


def _shared_edges(gt_values, pred_values, n_bins) -> list[float]:
    pool = list(gt_values) + list(pred_values)
    lo, hi = float(min(pool)), float(max(pool))
    if hi <= lo:
        hi = lo + 1.0
    return [lo + (hi - lo) * k / n_bins for k in range(n_bins + 1)]


@main.command("eval")
@click.argument("labels_path", type=click.Path())
@click.argument("masks_path", type=click.Path())
@click.option("--bins", type=int, default=DEFAULT_BINS, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@forward_errors
def cmd_eval(labels_path, masks_path, bins, out_dir):
    """Score predictions against ground truth and plot property densities."""
    if bins < 1:
        raise InvalidConfigError(f"--bins must be >= 1, got {bins}")
    t0 = time.perf_counter()
    lm = io.load_labels_png(labels_path)
    result = io.load_masks(masks_path)
    preds = [m.mask for m in result.masks]
    matched = match(lm, preds)
    score = miou(matched)
    gt_props = [grain_properties(mask, gid) for gid, mask in labelmap_to_masks(lm)]
    pred_props = [grain_properties(mask, i) for i, mask in enumerate(preds) if mask.area]
    out = Path(out_dir)
    artifacts = ["report.json", "timing.json"]
    ks = {}
    for prop in PROPERTY_NAMES:
        gt_values = [getattr(p, prop) for p in gt_props]
        pred_values = [getattr(p, prop) for p in pred_props]
        edges = _shared_edges(gt_values, pred_values, bins)
        gt_hist = property_histograms(gt_props, prop, edges)
        pred_hist = property_histograms(pred_props, prop, edges)
        io.write_text(out / f"hist_{prop}.csv", histogram_to_csv(gt_hist, pred_hist))
        io.write_text(out / f"hist_{prop}.svg", histogram_svg(gt_hist, pred_hist))
        artifacts += [f"hist_{prop}.csv", f"hist_{prop}.svg"]
        ks[prop] = ks_statistic(gt_values, pred_values) if pred_values else None
    report = {
        "schema": EVAL_SCHEMA,
        "miou": score,
        "n_grains": lm.n_grains,
        "n_masks": len(preds),
        "per_grain_iou": {str(g): v for g, v in sorted(matched.per_grain_iou.items())},
        "ks": ks,
        "config_digest": result.config_digest,
        "partial": result.partial,
    }
    io.write_json(out / "report.json", report)
    timings = {"eval": time.perf_counter() - t0}
    io.write_json(out / "timing.json", timings)
    io.write_manifest(
        out, "eval", parameters={"bins": bins},
        inputs={Path(labels_path).name: io.pixel_digest(labels_path),
                Path(masks_path).name: io.artifact_entry(Path(masks_path))["digest"]},
        artifacts=artifacts, timings=timings,
    )
    click.echo(f"mIoU {score:.4f} over {lm.n_grains} grains -> {out / 'report.json'}")


@main.command("triage")
@click.argument("labels_path", type=click.Path())
@click.argument("run_dir", type=click.Path())
@with_backend_options
@click.option("--image", "image_path", type=click.Path(), default=None,
              help="Micrograph for backend prompting; defaults to a flat frame.")
@click.option("--thresholds", default="0.5:0.9:0.05", show_default=True)
@click.option("--points", "n_points", type=int, default=50, show_default=True,
              help="Random in-grain prompts per grain.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@forward_errors
def cmd_triage(labels_path, run_dir, backend_name, endpoint, cache, corruption,
               image_path, thresholds, n_points, seed, workers, out_dir):
    """Attribute each missed grain to a failure category per threshold."""
    t0 = time.perf_counter()
    lm = io.load_labels_png(labels_path)
    result = io.load_masks(Path(run_dir) / "masks.json")
    values = parse_thresholds(thresholds)
    if image_path:
        image = io.load_image_png(image_path)
        image_id = Path(image_path).stem
    else:
        image = ImageGray(np.full((lm.height, lm.width), 0.5))
        image_id = Path(labels_path).stem
    backend = build_backend(backend_name, endpoint, cache, corruption, seed)
    _register_oracle(backend, image_id, lm)
    report = triage(lm, result, backend, values, n_random_points=n_points,
                    seed=seed, image=image, image_id=image_id, workers=workers)
    out = Path(out_dir)
    io.write_text(out / "triage.csv", triage_to_csv(report))
    summary = {
        "schema": TRIAGE_SCHEMA,
        "thresholds": values,
        "n_grains": lm.n_grains,
        "category_percentages": {
            str(t): report.category_percentages[t] for t in values
        },
        "recoverable_fraction": {
            str(t): v for t, v in report.recoverable_fractions().items()
        },
    }
    io.write_json(out / "summary.json", summary)
    timings = {"triage": time.perf_counter() - t0}
    io.write_json(out / "timing.json", timings)
    io.write_manifest(
        out, "triage",
        parameters={"backend": backend.backend_id, "thresholds": thresholds,
                    "points": n_points, "seed": seed, "workers": workers},
        inputs={Path(labels_path).name: io.pixel_digest(labels_path),
                "masks.json": io.artifact_entry(Path(run_dir) / "masks.json")["digest"]},
        artifacts=["triage.csv", "summary.json", "timing.json"], timings=timings,
    )
    captured = report.category_percentages[values[0]]["Captured"]
    click.echo(
        f"{lm.n_grains} grains, captured {captured:.1%} at t={values[0]} "
        f"-> {out / 'triage.csv'}"
    )


@main.command("compare")
@click.argument("eval_a", type=click.Path())
@click.argument("eval_b", type=click.Path())
@click.option("--resamples", type=int, default=10000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@forward_errors
def cmd_compare(eval_a, eval_b, resamples, seed, out_dir):
    """Paired bootstrap comparison of two eval reports."""
    t0 = time.perf_counter()
    reports = []
    for path in (eval_a, eval_b):
        obj = io.read_json(path)
        if not isinstance(obj, dict) or obj.get("schema") != EVAL_SCHEMA:
            raise InvalidConfigError(f"{path} is not a {EVAL_SCHEMA} report")
        reports.append(obj)
    grains_a = {int(g) for g in reports[0]["per_grain_iou"]}
    grains_b = {int(g) for g in reports[1]["per_grain_iou"]}
    if grains_a != grains_b:
        raise GrainSetMismatchError(
            f"evals cover different grain sets "
            f"({len(grains_a)} vs {len(grains_b)} grains, "
            f"symmetric difference {sorted(grains_a ^ grains_b)[:8]})"
        )
    a = [reports[0]["per_grain_iou"][str(g)] for g in sorted(grains_a)]
    b = [reports[1]["per_grain_iou"][str(g)] for g in sorted(grains_b)]
    comp = paired_bootstrap_ci(a, b, n_resamples=resamples, seed=seed)
    payload = comparison_report(eval_a, eval_b, reports[0]["miou"], reports[1]["miou"],
                                comp)
    out = Path(out_dir)
    io.write_json(out / "comparison.json", payload)
    timings = {"compare": time.perf_counter() - t0}
    io.write_json(out / "timing.json", timings)
    io.write_manifest(
        out, "compare",
        parameters={"resamples": resamples, "seed": seed,
                    "method_a": eval_a, "method_b": eval_b},
        inputs={"eval_a": io.sha256_hex(io.read_text(eval_a).encode()),
                "eval_b": io.sha256_hex(io.read_text(eval_b).encode())},
        artifacts=["comparison.json", "timing.json"], timings=timings,
    )
    click.echo(
        f"diff {comp.diff:+.4f} CI ({comp.ci_low:.4f}, {comp.ci_high:.4f}) "
        f"-> {out / 'comparison.json'}"
    )


if __name__ == "__main__":
    main()
