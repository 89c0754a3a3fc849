import numpy as np
import pytest
from scipy import stats

import grainkit.synth as synth
from grainkit.errors import CannotPlaceError, InvalidConfigError
from grainkit.geometry import BitMask, iou
from grainkit.synth import (
    SynthConfig,
    boundary_mask_true,
    generate,
    render_image,
    render_labelmap,
    sample_grain_centers,
)
from grainkit.valley import boundary_mask, dilate_by_disc, sato_response


def small_cfg(**kw):
    base = dict(width=128, height=128, n_grains_target=40, noise_sigma=0.0)
    base.update(kw)
    return SynthConfig(**base)


def test_config_validation():
    with pytest.raises(InvalidConfigError):
        SynthConfig(width=16)
    with pytest.raises(InvalidConfigError):
        SynthConfig(n_grains_target=1)
    with pytest.raises(InvalidConfigError):
        SynthConfig(size_mixture=())
    with pytest.raises(InvalidConfigError):
        SynthConfig(size_mixture=((1.0, -2.0),))
    with pytest.raises(InvalidConfigError):
        SynthConfig(boundary_thickness=0.5)
    with pytest.raises(InvalidConfigError):
        SynthConfig(boundary_darkness=1.5)
    with pytest.raises(InvalidConfigError):
        SynthConfig(noise_sigma=-0.1)


def test_exact_center_count_and_separation():
    for n in (2, 25, 80):
        cfg = small_cfg(n_grains_target=n)
        pts = np.array(sample_grain_centers(cfg))
        assert len(pts) == n
        assert pts[:, 0].min() >= 0 and pts[:, 0].max() < cfg.width
        assert pts[:, 1].min() >= 0 and pts[:, 1].max() < cfg.height
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        np.fill_diagonal(dist, np.inf)
        assert dist.min() >= synth.MIN_CENTER_SEPARATION


def test_centers_deterministic():
    cfg = small_cfg(rng_seed=17)
    assert sample_grain_centers(cfg) == sample_grain_centers(cfg)
    other = sample_grain_centers(small_cfg(rng_seed=18))
    assert other != sample_grain_centers(cfg)


def test_single_component_uniform_chi_square():
    bins = 5
    counts = np.zeros((bins, bins))
    for seed in range(20):
        cfg = SynthConfig(
            width=256, height=256, n_grains_target=150,
            size_mixture=((1.0, 1.0),), rng_seed=seed,
        )
        pts = np.array(sample_grain_centers(cfg))
        hist, _, _ = np.histogram2d(
            pts[:, 0], pts[:, 1], bins=bins, range=[[0, 256], [0, 256]]
        )
        counts += hist
    result = stats.chisquare(counts.ravel())
    assert result.pvalue > 0.01


def test_two_component_mixture_long_tailed():
    for seed in (0, 1, 2):
        cfg = SynthConfig(
            width=256, height=256, n_grains_target=120,
            size_mixture=((0.8, 1.0), (0.2, 10.0)), rng_seed=seed,
        )
        lm = render_labelmap(sample_grain_centers(cfg), cfg)
        areas = np.bincount(lm.labels.ravel())[1:]
        assert stats.skew(areas) > 1.0


def test_labelmap_matches_brute_force_two_centers():
    cfg = SynthConfig(width=48, height=40, n_grains_target=2, boundary_thickness=2.0)
    centers = [(12.3, 20.1), (33.7, 18.4)]
    lm = render_labelmap(centers, cfg)
    a, b = np.array(centers[0]), np.array(centers[1])
    span = np.hypot(*(a - b))
    want = np.zeros((40, 48), dtype=np.int32)
    for y in range(40):
        for x in range(48):
            d1 = (x - a[0]) ** 2 + (y - a[1]) ** 2
            d2 = (x - b[0]) ** 2 + (y - b[1]) ** 2
            lo, hi = min(d1, d2), max(d1, d2)
            if (hi - lo) / (2 * span) <= 1.0:
                want[y, x] = 0
            else:
                want[y, x] = 1 if d1 < d2 else 2
    assert np.array_equal(lm.labels, want)


def test_labelmap_invariants_fuzz():
    for seed in range(30):
        cfg = small_cfg(rng_seed=seed)
        lm = render_labelmap(sample_grain_centers(cfg), cfg)
        assert lm.n_grains >= 2
        lm.check_connectivity()
        areas = np.bincount(lm.labels.ravel(), minlength=lm.n_grains + 1)[1:]
        assert areas.min() >= 1


def test_boundary_fraction_under_ten_percent():
    cfg = SynthConfig(width=512, height=512, n_grains_target=150, boundary_thickness=1.0)
    lm = render_labelmap(sample_grain_centers(cfg), cfg)
    fraction = float((lm.labels == 0).mean())
    assert fraction < 0.10


def test_generate_bit_reproducible():
    cfg = small_cfg(noise_sigma=0.03, rng_seed=9)
    lm1, img1 = generate(cfg)
    lm2, img2 = generate(cfg)
    assert np.array_equal(lm1.labels, lm2.labels)
    assert np.array_equal(img1.pixels, img2.pixels)


def test_full_darkness_boundary_is_zero():
    cfg = small_cfg(boundary_darkness=1.0)
    lm, img = generate(cfg)
    boundary = lm.labels == 0
    assert boundary.any()
    assert np.all(img.pixels[boundary] == 0.0)
    assert np.all(img.pixels[~boundary] > 0.0)


def test_grains_flat_without_noise():
    cfg = small_cfg()
    lm, img = generate(cfg)
    for gid in range(1, lm.n_grains + 1):
        vals = img.pixels[lm.labels == gid]
        assert vals.max() - vals.min() == 0.0


def test_valley_property():
    cfg = SynthConfig(width=256, height=256, n_grains_target=60,
                      boundary_darkness=0.2, noise_sigma=0.05, rng_seed=4)
    lm, img = generate(cfg)
    boundary = lm.labels == 0
    assert img.pixels[boundary].mean() < img.pixels[~boundary].mean()
    # spot-check single grains against their own surrounding band
    areas = np.bincount(lm.labels.ravel())[1:]
    for gid in np.argsort(areas)[-8:] + 1:
        grain = lm.labels == gid
        ring = dilate_by_disc(BitMask.from_array(grain), 2.0).to_array() & boundary
        if ring.any():
            assert img.pixels[ring].mean() < img.pixels[grain].mean()


def test_contamination_blobs_darken():
    base_cfg = small_cfg(rng_seed=3)
    blob_cfg = small_cfg(rng_seed=3, n_contamination_blobs=3)
    lm, clean = generate(base_cfg)
    lm2, dark = generate(blob_cfg)
    assert np.array_equal(lm.labels, lm2.labels)
    assert np.all(dark.pixels <= clean.pixels + 1e-12)
    assert (dark.pixels < clean.pixels - 1e-6).sum() > 20


def test_illumination_gradient():
    flat_cfg = small_cfg(rng_seed=5)
    lit_cfg = small_cfg(rng_seed=5, illumination_amplitude=0.2,
                        illumination_wavelength=64.0)
    _, flat = generate(flat_cfg)
    _, lit = generate(lit_cfg)
    ratio = lit.pixels[:, 0:64].mean(axis=0) / np.maximum(flat.pixels[:, 0:64].mean(axis=0), 1e-9)
    assert ratio.max() > 1.1
    assert ratio.min() < 0.9


def test_sato_boundary_recall_on_defaults():
    cfg = SynthConfig(rng_seed=0)
    lm, img = generate(cfg)
    resp = sato_response(img, (1.0, 2.0, 3.0))
    bm = boundary_mask(resp, method="otsu", dilation_radius=1.0)
    true_boundary = boundary_mask_true(lm)
    hit = bm.mask.intersection_area(true_boundary)
    assert hit / true_boundary.area >= 0.80


def test_cannot_place(monkeypatch):
    monkeypatch.setattr(synth, "_PLACEMENT_ATTEMPTS_PER_CENTER", 10)
    cfg = SynthConfig(width=32, height=32, n_grains_target=600)
    with pytest.raises(CannotPlaceError):
        sample_grain_centers(cfg)


def test_boundary_mask_true_matches_labels():
    cfg = small_cfg(rng_seed=1)
    lm, _ = generate(cfg)
    bm = boundary_mask_true(lm)
    assert bm.to_array().sum() == (lm.labels == 0).sum()
    assert iou(bm, BitMask.from_array(lm.labels == 0)) == 1.0
