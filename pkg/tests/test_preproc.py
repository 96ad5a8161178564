import hashlib
import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest

from drtriage import preproc as pp
from drtriage.dataset import SynthParams, read_png, sample_rng, synth_image
from drtriage.preproc import Circle, PreprocConfig, PreprocessError

GOLDEN = Path(__file__).parent / "golden"


def _disk(side, r, cx=None, cy=None, value=180):
    cx = (side - 1) / 2 if cx is None else cx
    cy = (side - 1) / 2 if cy is None else cy
    yy, xx = np.mgrid[0:side, 0:side]
    img = np.zeros((side, side, 3), np.uint8)
    img[np.hypot(xx - cx, yy - cy) <= r] = value
    return img


def test_retina_mask_examples():
    assert not pp.retina_mask(np.zeros((5, 5, 3), np.uint8), 10).any()
    assert pp.retina_mask(np.full((5, 5, 3), 200, np.uint8), 10).all()
    img = np.zeros((4, 6, 3), np.uint8)
    img[:, 3:] = 255
    expected = np.zeros((4, 6), bool)
    expected[:, 3:] = True
    np.testing.assert_array_equal(pp.retina_mask(img, 10), expected)


def test_luma_is_exact_integer_rounding():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(50, 50, 3), dtype=np.uint8)
    ref = np.floor(img @ np.array([0.299, 0.587, 0.114]) + 0.5 + 1e-9)
    np.testing.assert_array_equal(pp.luma(img), ref.astype(np.int64))


def test_largest_component_examples():
    m = np.zeros((8, 10), bool)
    m[0:3, 0:3] = True
    m[5:6, 4:9] = True
    pts = pp.largest_component(m)
    assert len(pts) == 9 and set(map(tuple, pts)) == {(r, c) for r in range(3) for c in range(3)}
    single = np.zeros((3, 3), bool)
    single[1, 2] = True
    np.testing.assert_array_equal(pp.largest_component(single), [[1, 2]])
    diag = np.eye(3, dtype=bool)
    assert len(pp.largest_component(diag)) == 1
    with pytest.raises(pp.NoRetinaError):
        pp.largest_component(np.zeros((3, 3), bool))


def test_mec_examples():
    assert pp.min_enclosing_circle([(0, 0)]) == Circle(0, 0, 0)
    c = pp.min_enclosing_circle([(0, 0), (2, 0)])
    assert (c.cx, c.cy, c.r) == pytest.approx((1, 0, 1))
    c = pp.min_enclosing_circle([(0, 0), (1, 0), (0, 1), (1, 1)])
    assert (c.cx, c.cy, c.r) == pytest.approx((0.5, 0.5, math.sqrt(2) / 2))
    with pytest.raises(pp.GeometryError):
        pp.min_enclosing_circle(np.zeros((0, 2)))


def mec_oracle(pts):
    """O(n^4) brute force: smallest candidate circle (pairs as diameters,
    triples as circumcircles) that contains every point."""
    pts = [tuple(map(float, p)) for p in pts]
    if len(pts) == 1:
        return pts[0][0], pts[0][1], 0.0
    cands = []
    for a, b in itertools.combinations(pts, 2):
        cands.append(((a[0] + b[0]) / 2, (a[1] + b[1]) / 2, math.dist(a, b) / 2))
    for a, b, c in itertools.combinations(pts, 3):
        d = 2 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
        if abs(d) < 1e-12:
            continue
        ux = ((a[0] ** 2 + a[1] ** 2) * (b[1] - c[1]) + (b[0] ** 2 + b[1] ** 2) * (c[1] - a[1]) + (c[0] ** 2 + c[1] ** 2) * (a[1] - b[1])) / d
        uy = ((a[0] ** 2 + a[1] ** 2) * (c[0] - b[0]) + (b[0] ** 2 + b[1] ** 2) * (a[0] - c[0]) + (c[0] ** 2 + c[1] ** 2) * (b[0] - a[0])) / d
        cands.append((ux, uy, math.dist((ux, uy), a)))
    best = None
    for cx, cy, r in cands:
        if all(math.dist((cx, cy), p) <= r * (1 + 1e-12) + 1e-12 for p in pts):
            if best is None or r < best[2]:
                best = (cx, cy, r)
    return best


def test_mec_matches_brute_force_oracle():
    rng = np.random.default_rng(1)
    for i in range(200):
        n = int(rng.integers(1, 13))
        if i % 4 == 0:
            pts = rng.integers(-5, 6, size=(n, 2)).astype(float)  # duplicates and collinear runs
        else:
            pts = rng.uniform(-100, 100, size=(n, 2))
        c = pp.min_enclosing_circle(pts)
        ref = mec_oracle(pts)
        assert abs(c.r - ref[2]) <= 1e-9
        d = np.hypot(pts[:, 0] - c.cx, pts[:, 1] - c.cy)
        assert np.all(d <= c.r + 1e-9)


def test_circular_crop_of_centred_disk():
    img = _disk(400, 100)
    pts = pp.largest_component(pp.retina_mask(img))
    circle = pp.min_enclosing_circle(pts[:, ::-1])
    assert circle.r == pytest.approx(100, abs=0.5)
    out = pp.circular_crop(img, circle, 0.075)
    # rasterized radius is just under 100, so side = 2 * round(107.4) = 214
    assert out.shape[0] == 2 * math.floor(circle.r * 1.075 + 0.5) == 214
    mask = pp.retina_mask(out)
    ys, xs = np.nonzero(mask)
    assert abs(ys.mean() - 106.5) < 0.5 and abs(xs.mean() - 106.5) < 0.5


def test_circular_crop_pads_truncated_side():
    c = Circle(30.0, 60.0, 50.0)
    out = pp.circular_crop(np.full((120, 120, 3), 90, np.uint8), c, 0.0)
    assert out.shape[0] == 100
    # the crop window starts at column -19 of the source
    assert not out[:, :19].any()
    assert out[50, 19:99].all()


def test_crop_is_idempotent_on_synthetic_disks():
    for seed in range(5):
        img, _ = synth_image(2, SynthParams(image_side=128), sample_rng(seed, 0))
        c1 = pp.min_enclosing_circle(pp.largest_component(pp.retina_mask(img))[:, ::-1])
        once = pp.circular_crop(img, c1, 0.075)
        c2 = pp.min_enclosing_circle(pp.largest_component(pp.retina_mask(once))[:, ::-1])
        twice = pp.circular_crop(once, c2, 0.075)
        assert abs(twice.shape[0] - once.shape[0]) <= 2


def test_gaussian_blur_examples():
    const = np.full((9, 11), 77.0)
    np.testing.assert_allclose(pp.gaussian_blur(const, 2.0), const, rtol=1e-12)
    imp = np.zeros((41, 41))
    imp[20, 20] = 1
    out = pp.gaussian_blur(imp, 2.5)
    assert abs(out.sum() - 1) <= 1e-6
    x = np.arange(-8, 9)  # radius ceil(3 * 2.5)
    g = np.exp(-0.5 * (x / 2.5) ** 2)
    g /= g.sum()
    np.testing.assert_allclose(out[12:29, 12:29], np.outer(g, g), rtol=1e-12)
    assert out[:12].sum() == 0 and out[29:].sum() == 0


def test_gaussian_blur_large_sigma_approaches_mean():
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 255, size=(12, 12))
    out = pp.gaussian_blur(img, 10 * 12)
    assert np.all(np.abs(out - img.mean()) <= 0.01 * img.mean())


def test_ben_graham_examples():
    for v in (0, 60, 255):
        out = pp.ben_graham(np.full((30, 30, 3), v, np.uint8))
        assert np.all(out == 128)
    img = np.full((61, 61, 3), 20, np.uint8)
    img[30, 30] = 200
    out = pp.ben_graham(img)
    assert out[30, 30, 0] == 255
    assert abs(int(out[5, 5, 0]) - 128) <= 1
    np.testing.assert_array_equal(pp.ben_graham(img), out)


def test_clahe_leaves_red_and_blue():
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, size=(40, 48, 3), dtype=np.uint8)
    out = pp.clahe_green(img, 8, 2.0)
    np.testing.assert_array_equal(out[..., 0], img[..., 0])
    np.testing.assert_array_equal(out[..., 2], img[..., 2])


def test_clahe_single_tile_matches_direct_cdf():
    img = np.zeros((20, 20, 3), np.uint8)
    g = np.full((20, 20), 200, np.uint8)
    g.ravel()[:100] = 50
    img[..., 1] = g
    out = pp.clahe_green(img, 1, math.inf)[..., 1]
    values, counts = np.unique(g, return_counts=True)
    cdf = np.cumsum(counts) / g.size
    expected = {int(v): int(math.floor(255 * c + 0.5)) for v, c in zip(values, cdf)}
    assert expected == {50: 64, 200: 255}
    for v, e in expected.items():
        assert np.all(out[g == v] == e)


def test_clahe_tile_luts_are_monotone():
    rng = np.random.default_rng(4)
    ch = rng.integers(0, 256, size=(64, 64), dtype=np.uint8)
    ch[:32] //= 4
    luts, _, _ = pp.clahe_luts(ch, 8, 2.0)
    assert np.all(np.diff(luts, axis=-1) >= 0)


def test_clahe_small_image_falls_back_to_one_tile():
    rng = np.random.default_rng(5)
    img = rng.integers(0, 256, size=(5, 5, 3), dtype=np.uint8)
    np.testing.assert_array_equal(pp.clahe_green(img, 8, 2.0), pp.clahe_green(img, 1, 2.0))


def test_resize_examples():
    rng = np.random.default_rng(6)
    img = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    np.testing.assert_array_equal(pp.resize_bilinear(img, 16), img)
    const = np.full((13, 13, 3), 99, np.uint8)
    for side in (1, 5, 20, 64):
        assert np.all(pp.resize_bilinear(const, side) == 99)
    checker = np.array([[0, 255], [255, 0]], np.uint8)[..., None].repeat(3, axis=2)
    assert pp.resize_bilinear(checker, 1)[0, 0, 0] == 128


def test_to_tensor_normalized_examples():
    one = pp.to_tensor_normalized(np.full((1, 1, 3), 255, np.uint8), [0.5] * 3, [0.5] * 3)
    np.testing.assert_allclose(one.ravel(), 1.0)
    zero = pp.to_tensor_normalized(np.zeros((1, 1, 3), np.uint8), [0.0] * 3, [1.0] * 3)
    np.testing.assert_array_equal(zero.ravel(), 0.0)
    grey = pp.to_tensor_normalized(np.full((2, 2, 3), 128, np.uint8)).reshape(3, -1)[:, 0]
    direct = [(128 / 255 - m) / s for m, s in zip(pp.IMAGENET_MEAN, pp.IMAGENET_STD)]
    np.testing.assert_allclose(grey, direct, rtol=1e-6)
    np.testing.assert_allclose(grey, [0.0742, 0.2036, 0.4254], atol=2e-3)


def test_preprocess_contract():
    img, _ = synth_image(3, SynthParams(image_side=96), sample_rng(9, 0))
    stages = pp.Stages()
    t1 = pp.preprocess(img, PreprocConfig(), stages)
    t2 = pp.preprocess(img, PreprocConfig())
    assert t1.shape == (3, 64, 64) and t1.dtype == np.float32
    assert t1.tobytes() == t2.tobytes()
    assert set(stages.images) == {"mask", "crop", "ben_graham", "clahe", "resize"}
    with pytest.raises(PreprocessError) as exc:
        pp.preprocess(np.zeros((40, 40, 3), np.uint8))
    assert exc.value.stage == "localize"


def test_preproc_config_validation():
    assert PreprocConfig.from_dict(PreprocConfig().to_dict()) == PreprocConfig()
    with pytest.raises(ValueError):
        PreprocConfig(strict_margin=True, margin_frac=0.2)
    with pytest.raises(ValueError):
        PreprocConfig.from_dict({"blur": 3})


def test_golden_corpus_is_byte_exact():
    manifest = json.loads((GOLDEN / "manifest.json").read_text())
    assert manifest
    for entry in manifest:
        src = read_png(GOLDEN / entry["input"])
        cfg = PreprocConfig.from_dict(entry["config"])
        out = pp.preprocess_image(src, cfg)
        expected = read_png(GOLDEN / entry["output"])
        assert out.tobytes() == expected.tobytes(), entry["input"]
        assert hashlib.sha256(out.tobytes()).hexdigest() == entry["sha256"]
