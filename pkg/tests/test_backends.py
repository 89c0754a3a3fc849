import json

import httpx
import jsonschema
import numpy as np
import pytest

from grainkit.backends import (
    CorruptionConfig,
    HttpBackend,
    OracleBackend,
    Prompt,
    ReplayBackend,
    ScoredMask,
    image_digest,
    is_miss,
    png_base64_gray,
    prompt_digest,
    prompt_to_wire,
    replay_lookup,
    validate_prompt,
    wire_schema,
)
from grainkit.errors import (
    BackendUnavailableError,
    CacheCorruptError,
    DataMismatchError,
    InvalidConfigError,
    InvalidPromptError,
)
from grainkit.geometry import (
    BitMask,
    ImageGray,
    LabelMap,
    SoftMask,
    iou,
    labelmap_to_masks,
    rle_encode,
)
from grainkit.valley import dilate_by_disc, erode_by_disc


def two_grain_map():
    """12x10: grain 1 cols 0-4 (50 px), boundary col 5, grain 2 cols 6-11 (60 px)."""
    lab = np.zeros((10, 12), dtype=np.int32)
    lab[:, :5] = 1
    lab[:, 6:] = 2
    return LabelMap(lab)


def quad_map():
    """16x12 with 4 grains separated by a cross-shaped boundary band."""
    lab = np.zeros((12, 16), dtype=np.int32)
    lab[:5, :7] = 1
    lab[:5, 9:] = 2
    lab[7:, :7] = 3
    lab[7:, 9:] = 4
    return LabelMap(lab)


def flat_image(lm):
    return ImageGray(np.full((lm.height, lm.width), 0.5))


def make_oracle(lm, **cfg):
    backend = OracleBackend(CorruptionConfig(**cfg)) if cfg else OracleBackend()
    backend.register("img", lm)
    handle = backend.open("img", flat_image(lm))
    return backend, handle


def fg(x, y, multimask=False):
    return Prompt(points=((x, y, 1),), multimask=multimask)


def grain_mask(lm, gid):
    return dict(labelmap_to_masks(lm))[gid]


def test_prompt_requires_content():
    with pytest.raises(InvalidPromptError):
        Prompt()
    with pytest.raises(InvalidPromptError):
        Prompt(points=((1, 1, 2),))
    with pytest.raises(InvalidPromptError):
        Prompt(box=(5, 5, 5, 9))


def test_validate_prompt_bounds():
    validate_prompt(fg(0, 0), 4, 4)
    validate_prompt(fg(3.9, 3.9), 4, 4)
    with pytest.raises(InvalidPromptError):
        validate_prompt(fg(4, 0), 4, 4)
    with pytest.raises(InvalidPromptError):
        validate_prompt(Prompt(box=(0, 0, 5, 4)), 4, 4)


def test_prompt_digest_stability():
    a = Prompt(points=((3, 4, 1), (5.0, 6.0, 0)), box=(0, 0, 8, 8))
    b = Prompt(points=((3.0, 4.0, 1), (5, 6, 0)), box=(0, 0, 8, 8))
    assert prompt_digest(a) == prompt_digest(b)
    assert prompt_digest(a) != prompt_digest(Prompt(points=((3, 4, 1),)))
    single = Prompt(points=((3, 4, 1),), multimask=False)
    multi = Prompt(points=((3, 4, 1),), multimask=True)
    assert prompt_digest(single) != prompt_digest(multi)
    with_mask = Prompt(mask_input=SoftMask(np.zeros((4, 4)), tau=0.0))
    assert len(prompt_digest(with_mask)) == 64


def test_scored_mask_invariants():
    mask = BitMask.from_array(np.ones((2, 2), dtype=bool))
    soft = SoftMask(np.ones((2, 2)), tau=0.0)
    ScoredMask(mask, 0.9, 0.95, ("d", "c", "b"), soft=soft)
    with pytest.raises(ValueError):
        ScoredMask(mask, 1.5, 0.9, ("d", "c", "b"))
    with pytest.raises(ValueError):
        bad_soft = SoftMask(-np.ones((2, 2)), tau=0.0)
        ScoredMask(mask, 0.9, 0.9, ("d", "c", "b"), soft=bad_soft)


def test_corruption_config_validation():
    CorruptionConfig(p_miss=0.5, boundary_jitter=2.0, predicted_iou_noise=0.1)
    with pytest.raises(InvalidConfigError):
        CorruptionConfig(p_miss=1.5)
    with pytest.raises(InvalidConfigError):
        CorruptionConfig(boundary_jitter=-1)
    with pytest.raises(InvalidConfigError):
        CorruptionConfig(predicted_iou_noise=-0.1)


def test_oracle_zero_corruption_exact():
    lm = two_grain_map()
    backend, handle = make_oracle(lm)
    got = backend.predict(handle, fg(2, 3))
    assert len(got) == 1
    assert got[0].mask == grain_mask(lm, 1)
    assert got[0].predicted_iou == 1.0
    assert got[0].stability == 1.0
    assert got[0].provenance == (prompt_digest(fg(2, 3)), "img", "oracle")


def test_oracle_multimask_three_results():
    lm = two_grain_map()
    backend, handle = make_oracle(lm)
    got = backend.predict(handle, fg(8, 3, multimask=True))
    assert len(got) == 3
    assert got[0].mask == grain_mask(lm, 2)
    assert got[0].predicted_iou == 1.0
    # alternates are honestly scored below the base result
    assert all(m.predicted_iou <= 1.0 for m in got[1:])


def test_oracle_exhaustive_every_pixel():
    lm = quad_map()
    backend, handle = make_oracle(lm)
    masks = dict(labelmap_to_masks(lm))
    for y in range(lm.height):
        for x in range(lm.width):
            gid = lm.label_at(x, y)
            if gid == 0:
                continue
            got = backend.predict(handle, fg(x, y))
            assert len(got) == 1
            assert got[0].mask == masks[gid]
            assert got[0].predicted_iou == 1.0


def test_oracle_boundary_ambiguity_multimask():
    lm = two_grain_map()
    backend, handle = make_oracle(lm)
    got = backend.predict(handle, fg(5, 4, multimask=True))
    assert len(got) == 3
    g1, g2 = grain_mask(lm, 1), grain_mask(lm, 2)
    assert got[0].mask == g1
    assert got[1].mask == g2
    assert got[2].mask == g1.union(g2)
    assert [m.predicted_iou for m in got] == [0.5, 0.5, 0.5]


def test_oracle_boundary_ambiguity_single_returns_larger():
    lm = two_grain_map()
    backend, handle = make_oracle(lm)
    got = backend.predict(handle, fg(5, 4))
    assert len(got) == 1
    assert got[0].mask == grain_mask(lm, 2)  # 60 px > 50 px
    assert got[0].predicted_iou == 0.5


def test_oracle_miss():
    lm = two_grain_map()
    backend, handle = make_oracle(lm, p_miss=1.0)
    got = backend.predict(handle, fg(2, 2))
    assert got[0].mask.area == 0
    assert got[0].predicted_iou < 0.1
    assert got[0].stability == 0.0
    multi = backend.predict(handle, fg(2, 2, multimask=True))
    assert len(multi) == 3 and all(m.mask.area == 0 for m in multi)


def test_oracle_merge_symmetric():
    lm = two_grain_map()
    backend, handle = make_oracle(lm, p_merge_low_contrast=1.0)
    g1, g2 = grain_mask(lm, 1), grain_mask(lm, 2)
    union = g1.union(g2)
    for x, base in ((2, g1), (8, g2)):
        got = backend.predict(handle, fg(x, 3))
        assert got[0].mask == union
        assert got[0].predicted_iou == pytest.approx(base.area / union.area)


def test_oracle_merge_asymmetric():
    lm = two_grain_map()
    backend, handle = make_oracle(lm, p_merge_low_contrast=1.0, asymmetric_merge=True)
    # grain 1 (50 px) is the smaller of the pair: no merge
    got_small = backend.predict(handle, fg(2, 3))
    assert got_small[0].mask == grain_mask(lm, 1)
    assert got_small[0].predicted_iou == 1.0
    # grain 2 (60 px) is the larger: merge fires
    got_large = backend.predict(handle, fg(8, 3))
    assert got_large[0].mask == grain_mask(lm, 1).union(grain_mask(lm, 2))


def test_oracle_split():
    lm = two_grain_map()
    backend, handle = make_oracle(lm, p_split_texture=1.0)
    g1 = grain_mask(lm, 1)
    got = backend.predict(handle, fg(2, 3))
    m = got[0].mask
    assert 0 < m.area < g1.area
    assert m.intersection_area(g1) == m.area  # strict subset
    assert got[0].predicted_iou == pytest.approx(iou(m, g1))


def test_oracle_jitter_bounds():
    lm = two_grain_map()
    backend, handle = make_oracle(lm, boundary_jitter=2.0, rng_seed=5)
    g1 = grain_mask(lm, 1)
    lo, hi = erode_by_disc(g1, 2.0), dilate_by_disc(g1, 2.0)
    for y in range(10):
        m = backend.predict(handle, fg(2, y))[0].mask
        assert m.intersection_area(lo) == lo.area  # eroded core always kept
        assert m.intersection_area(hi) == m.area  # never beyond the dilation
        assert backend.predict(handle, fg(2, y))[0].predicted_iou == pytest.approx(
            iou(m, g1)
        )


def test_oracle_noise_clamped():
    lm = two_grain_map()
    backend, handle = make_oracle(lm, predicted_iou_noise=0.5, rng_seed=3)
    scores = [backend.predict(handle, fg(2, y))[0].predicted_iou for y in range(10)]
    assert all(0.0 <= s <= 1.0 for s in scores)
    assert len(set(scores)) > 1


def test_oracle_determinism_and_order_independence():
    lm = quad_map()
    cfg = dict(
        p_miss=0.2, p_merge_low_contrast=0.4, p_split_texture=0.4,
        boundary_jitter=1.5, predicted_iou_noise=0.1, rng_seed=11,
    )
    prompts = [fg(x, y, multimask=True) for x, y in ((2, 2), (12, 2), (2, 9), (12, 9))]
    b1, h1 = make_oracle(lm, **cfg)
    b2, h2 = make_oracle(lm, **cfg)
    first = [b1.predict(h1, p) for p in prompts]
    second = [b2.predict(h2, p) for p in reversed(prompts)]
    for got, want in zip(reversed(second), first):
        assert len(got) == len(want)
        for g, w in zip(got, want):
            assert g.mask == w.mask
            assert g.predicted_iou == w.predicted_iou


def brute_adjacency(lm, band=3.0):
    pixels = {gid: np.argwhere(lm.labels == gid) for gid in range(1, lm.n_grains + 1)}
    out = {gid: set() for gid in pixels}
    for a in pixels:
        for b in pixels:
            if a >= b:
                continue
            da = pixels[a][:, None, :] - pixels[b][None, :, :]
            if np.sqrt((da**2).sum(axis=2)).min() <= band:
                out[a].add(b)
                out[b].add(a)
    return out


def test_oracle_corruption_stays_local():
    lm = quad_map()
    adj = brute_adjacency(lm)
    jitter = 1.5
    backend, handle = make_oracle(
        lm, p_merge_low_contrast=0.6, p_split_texture=0.5, boundary_jitter=jitter,
        rng_seed=7,
    )
    masks = dict(labelmap_to_masks(lm))
    for y in range(lm.height):
        for x in range(0, lm.width, 2):
            gid = lm.label_at(x, y)
            if gid == 0:
                continue
            envelope = masks[gid]
            for nb in adj[gid]:
                envelope = envelope.union(masks[nb])
            envelope = dilate_by_disc(envelope, jitter)
            for m in backend.predict(handle, fg(x, y, multimask=True)):
                assert m.mask.intersection_area(envelope) == m.mask.area


def test_oracle_box_prompt():
    lm = two_grain_map()
    backend, handle = make_oracle(lm)
    g2 = grain_mask(lm, 2)
    exact = Prompt(box=g2.bbox)
    assert backend.predict(handle, exact)[0].mask == g2
    shifted = Prompt(box=(5, 0, 11, 9))
    assert backend.predict(handle, shifted)[0].mask == g2
    with pytest.raises(InvalidPromptError):
        backend.predict(handle, Prompt(box=(5, 4, 6, 6)))


def test_oracle_mask_only_prompt_rejected():
    lm = two_grain_map()
    backend, handle = make_oracle(lm)
    with pytest.raises(InvalidPromptError):
        backend.predict(handle, Prompt(mask_input=SoftMask(np.zeros((4, 4)))))


def test_oracle_crop_frames():
    lm = two_grain_map()
    backend = OracleBackend()
    backend.register("img", lm)
    img = flat_image(lm)
    left = backend.open("img", img, crop=(0, 0, 6, 10))
    got = backend.predict(left, fg(2, 2))
    assert got[0].mask.width == 6 and got[0].mask.height == 10
    assert got[0].mask == grain_mask(lm, 1).translate(0, 0, 6, 10)
    assert got[0].predicted_iou == 1.0
    shifted = backend.open("img", img, crop=(3, 0, 12, 10))
    got2 = backend.predict(shifted, fg(5, 2))  # full-frame (8, 2), grain 2
    assert got2[0].mask == grain_mask(lm, 2).translate(-3, 0, 9, 10)
    assert got2[0].predicted_iou == 1.0
    # a crop that cuts grain 2: the visible sliver is the honest reference
    cut = backend.open("img", img, crop=(0, 0, 8, 10))
    got3 = backend.predict(cut, fg(7, 2))
    assert got3[0].mask == grain_mask(lm, 2).translate(0, 0, 8, 10)
    assert got3[0].predicted_iou == 1.0
    with pytest.raises(InvalidPromptError):
        backend.predict(left, fg(7, 2))  # outside the 6-wide crop


def test_oracle_registration_errors():
    lm = two_grain_map()
    backend = OracleBackend()
    with pytest.raises(DataMismatchError):
        backend.open("missing", flat_image(lm))
    backend.register("img", lm)
    with pytest.raises(DataMismatchError):
        backend.open("img", ImageGray(np.zeros((4, 4))))
    with pytest.raises(DataMismatchError):
        backend.predict("unopened", fg(1, 1))


class ExplodingBackend:
    backend_id = "exploding"

    def open(self, image_id, image, crop=None):
        return image_id

    def predict(self, handle, prompt):
        raise AssertionError("live call escaped the cache")


def test_replay_record_then_replay(tmp_path):
    lm = quad_map()
    img = flat_image(lm)
    oracle = OracleBackend(CorruptionConfig(p_split_texture=0.5, rng_seed=2))
    oracle.register("img", lm)
    recorder = ReplayBackend(tmp_path, inner=oracle)
    handle = recorder.open("img", img)
    prompts = [fg(2, 2, multimask=True), fg(12, 9)]
    recorded = [recorder.predict(handle, p) for p in prompts]
    # a second call on the same recorder is a cache hit with equal content
    again = [recorder.predict(handle, p) for p in prompts]
    for a, b in zip(recorded, again):
        assert [(m.mask, m.predicted_iou, m.stability) for m in a] == [
            (m.mask, m.predicted_iou, m.stability) for m in b
        ]
    # replay-only mode serves the same answers with no inner backend
    replayer = ReplayBackend(tmp_path)
    h2 = replayer.open("img", img)
    for p, want in zip(prompts, recorded):
        got = replayer.predict(h2, p)
        assert [(m.mask, m.predicted_iou, m.stability) for m in got] == [
            (m.mask, m.predicted_iou, m.stability) for m in want
        ]


def test_replay_hit_never_calls_inner(tmp_path):
    lm = two_grain_map()
    img = flat_image(lm)
    oracle = OracleBackend()
    oracle.register("img", lm)
    recorder = ReplayBackend(tmp_path, inner=oracle)
    handle = recorder.open("img", img)
    recorder.predict(handle, fg(2, 2))
    cached = ReplayBackend(tmp_path, inner=ExplodingBackend())
    h2 = cached.open("img", img)
    got = cached.predict(h2, fg(2, 2))
    assert got[0].mask == grain_mask(lm, 1)


def test_replay_only_miss(tmp_path):
    lm = two_grain_map()
    replayer = ReplayBackend(tmp_path)
    handle = replayer.open("img", flat_image(lm))
    with pytest.raises(DataMismatchError):
        replayer.predict(handle, fg(1, 1))
    assert is_miss(replay_lookup(tmp_path, "a" * 64, "b" * 64))


def test_replay_tamper_detection(tmp_path):
    lm = two_grain_map()
    img = flat_image(lm)
    oracle = OracleBackend()
    oracle.register("img", lm)
    recorder = ReplayBackend(tmp_path, inner=oracle)
    handle = recorder.open("img", img)
    recorder.predict(handle, fg(2, 2))
    entries = list(tmp_path.rglob("*.json"))
    assert len(entries) == 1
    record = json.loads(entries[0].read_text())
    record["masks"][0]["predicted_iou"] = 0.123
    entries[0].write_text(json.dumps(record))
    replayer = ReplayBackend(tmp_path)
    h2 = replayer.open("img", img)
    with pytest.raises(CacheCorruptError):
        replayer.predict(h2, fg(2, 2))


def test_replay_wrong_key_detection(tmp_path):
    lm = two_grain_map()
    img = flat_image(lm)
    oracle = OracleBackend()
    oracle.register("img", lm)
    recorder = ReplayBackend(tmp_path, inner=oracle)
    handle = recorder.open("img", img)
    recorder.predict(handle, fg(2, 2))
    entry = next(tmp_path.rglob("*.json"))
    moved = entry.with_name(prompt_digest(fg(3, 3)) + ".json")
    entry.rename(moved)
    replayer = ReplayBackend(tmp_path)
    h2 = replayer.open("img", img)
    with pytest.raises(CacheCorruptError):
        replayer.predict(h2, fg(3, 3))


def test_image_digest_distinguishes_crops():
    lm = two_grain_map()
    img = flat_image(lm)
    full = image_digest(img)
    assert full == image_digest(flat_image(lm))
    crop = ImageGray(img.pixels[:5, :5])
    assert image_digest(crop) != full


def make_http(handler, sleeps=None, retries=2):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    record = sleeps if sleeps is not None else []
    return HttpBackend(
        "http://svc", client=client, retries=retries, sleep=record.append
    ), record


def fake_service_handler(images):
    """Minimal protocol server: every predict returns one fixed 2x2 mask."""
    schema = wire_schema()
    embed_v = jsonschema.Draft202012Validator(
        {"$ref": "#/$defs/EmbedRequest", "$defs": schema["$defs"]}
    )
    predict_v = jsonschema.Draft202012Validator(
        {"$ref": "#/$defs/PredictRequest", "$defs": schema["$defs"]}
    )

    def handler(request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        if request.url.path == "/v1/embed":
            embed_v.validate(body)
            images[body["image_id"]] = True
            return httpx.Response(200, json={"ok": True})
        predict_v.validate(body)
        if body["image_id"] not in images:
            return httpx.Response(404, json={"detail": "unknown image_id"})
        arr = np.zeros((3, 4), dtype=bool)
        arr[1:3, 1:3] = True
        rle = rle_encode(BitMask.from_array(arr)).to_json_dict()
        return httpx.Response(
            200,
            json={"masks": [{"rle": rle, "predicted_iou": 0.9, "stability": 0.96}]},
        )

    return handler


def test_http_happy_path():
    images = {}
    backend, _ = make_http(fake_service_handler(images))
    img = ImageGray(np.full((3, 4), 0.25))
    handle = backend.open("demo", img)
    assert handle == "demo"
    got = backend.predict(handle, fg(1, 1))
    assert len(got) == 1
    assert got[0].mask.area == 4
    assert got[0].predicted_iou == 0.9
    assert got[0].provenance == (prompt_digest(fg(1, 1)), "demo", "http")


def test_http_404_maps_to_data_mismatch():
    def handler(request):
        if request.url.path == "/v1/embed":
            return httpx.Response(200, json={"ok": True})
        return httpx.Response(404, json={"detail": "unknown image_id"})

    backend, _ = make_http(handler)
    handle = backend.open("demo", ImageGray(np.zeros((3, 4))))
    with pytest.raises(DataMismatchError):
        backend.predict(handle, fg(1, 1))


def test_http_422_maps_to_invalid_prompt():
    def handler(request):
        if request.url.path == "/v1/embed":
            return httpx.Response(200, json={"ok": True})
        return httpx.Response(422, json={"detail": "bad prompt"})

    backend, _ = make_http(handler)
    handle = backend.open("demo", ImageGray(np.zeros((3, 4))))
    with pytest.raises(InvalidPromptError):
        backend.predict(handle, fg(1, 1))


def test_http_503_retries_then_unavailable():
    calls = []

    def handler(request):
        calls.append(request.url.path)
        return httpx.Response(503, json={"detail": "model not loaded"})

    backend, sleeps = make_http(handler)
    with pytest.raises(BackendUnavailableError):
        backend.open("demo", ImageGray(np.zeros((3, 4))))
    assert len(calls) == 3  # initial try plus 2 retries
    assert sleeps == [0.5, 1.0]  # exponential backoff


def test_http_transient_transport_error_recovers():
    state = {"n": 0}

    def handler(request):
        state["n"] += 1
        if state["n"] < 3:
            raise httpx.ConnectError("refused")
        return httpx.Response(200, json={"ok": True})

    backend, sleeps = make_http(handler)
    assert backend.open("demo", ImageGray(np.zeros((3, 4)))) == "demo"
    assert sleeps == [0.5, 1.0]


def test_http_malformed_response_rejected():
    def handler(request):
        if request.url.path == "/v1/embed":
            return httpx.Response(200, json={"ok": True})
        return httpx.Response(200, json={"masks": [{"predicted_iou": 0.9}]})

    backend, _ = make_http(handler)
    handle = backend.open("demo", ImageGray(np.zeros((3, 4))))
    with pytest.raises(DataMismatchError):
        backend.predict(handle, fg(1, 1))


def test_http_wrong_mask_dims_rejected():
    def handler(request):
        if request.url.path == "/v1/embed":
            return httpx.Response(200, json={"ok": True})
        rle = rle_encode(BitMask.full(5, 5)).to_json_dict()
        return httpx.Response(
            200, json={"masks": [{"rle": rle, "predicted_iou": 0.9, "stability": 0.9}]}
        )

    backend, _ = make_http(handler)
    handle = backend.open("demo", ImageGray(np.zeros((3, 4))))
    with pytest.raises(DataMismatchError):
        backend.predict(handle, fg(1, 1))


def test_http_non_integral_point_rejected():
    backend, _ = make_http(lambda request: httpx.Response(200, json={"ok": True}))
    backend.open("demo", ImageGray(np.zeros((3, 4))))
    with pytest.raises(InvalidPromptError):
        prompt_to_wire("demo", fg(1.5, 1))


def test_png_base64_round_trip():
    import base64
    import io

    from PIL import Image

    rng = np.random.default_rng(6)
    img = ImageGray(rng.random((7, 9)))
    raw = base64.b64decode(png_base64_gray(img))
    back = np.asarray(Image.open(io.BytesIO(raw)))
    assert back.shape == (7, 9)
    assert np.array_equal(back, np.rint(img.pixels * 255).astype(np.uint8))


def test_wire_schema_is_valid_and_crop_handles_are_stable():
    schema = wire_schema()
    jsonschema.Draft202012Validator.check_schema(schema)
    from grainkit.backends import crop_handle

    assert crop_handle("img", None) == "img"
    assert crop_handle("img", (1, 2, 3, 4)) == "img@1,2,3,4"
