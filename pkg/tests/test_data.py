import math

import numpy as np
import pytest

from oracles import balance_resimulate
from wsss.data import (DEFAULT_VAL_FRACTION, SHAPES, AugmentationConfig, DatasetManifest,
                       ImageRecord, ManifestError, augment, balance_downsample, exclude_class,
                       generate_synthetic_shapes, load_gt_masks, load_label_png, load_manifest,
                       save_label_png, save_manifest, shape_mask, split_train_val)


def _manifest(label_sets, names=("dog", "cat", "person")):
    recs = [ImageRecord(f"r{i}", f"img/r{i}.png", frozenset(ls)) for i, ls in enumerate(label_sets)]
    return DatasetManifest(recs, list(names))


def test_load_fixture_manifest(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("classes: dog,cat,person\n"
                 "a\timages/a.png\t1\tmasks/a.png\n"
                 "b\timages/b.png\t2,3\n"
                 "c\t/abs/c.png\t3\t\n")
    m = load_manifest(p)
    assert m.num_classes == 3
    assert m.ids() == ["a", "b", "c"]
    assert [set(r.labels) for r in m.records] == [{1}, {2, 3}, {3}]
    assert m.records[0].mask_uri == "masks/a.png" and m.records[2].mask_uri is None
    assert m.resolve("images/a.png") == tmp_path / "images/a.png"
    save_manifest(m, tmp_path / "m2.tsv")
    assert load_manifest(tmp_path / "m2.tsv").records == m.records


def test_empty_manifest(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("classes: a,b\n")
    m = load_manifest(p)
    assert len(m) == 0 and m.num_classes == 2


@pytest.mark.parametrize("body,msg", [
    ("a\tx.png\t4\n", "'a' has label id 4"),
    ("a\tx.png\t1\na\ty.png\t2\n", "duplicate"),
    ("a\tx.png\n", ":2:"),
    ("a\tx.png\tq\n", "bad label"),
])
def test_manifest_errors(tmp_path, body, msg):
    p = tmp_path / "m.tsv"
    p.write_text("classes: a,b,c\n" + body)
    with pytest.raises(ManifestError, match=msg):
        load_manifest(p)


def test_exclude_class_cases():
    m = _manifest([{1, 3}, {3}, {2}])
    out = exclude_class(m, 3)
    assert [set(r.labels) for r in out.records] == [{1}, {2}]
    assert out.excluded_classes == {3}
    assert exclude_class(out, 3).records == out.records
    none = exclude_class(_manifest([{1}]), 2)
    assert none.records == _manifest([{1}]).records and none.excluded_classes == {2}
    with pytest.raises(ValueError):
        exclude_class(m, 4)


def test_balance_single_label_cap():
    m = _manifest([{1}] * 10 + [{2}] * 3)
    out = balance_downsample(m, 4, seed=0)
    assert out.class_counts() == {1: 4, 2: 3, 3: 0}
    kept = [int(r.image_id[1:]) for r in out.records]
    assert kept == balance_resimulate([set(r.labels) for r in m.records], m.class_counts(), 4, 0)


def test_balance_matches_resimulation_and_is_deterministic():
    rng = np.random.default_rng(0)
    for case in range(100):
        sets = [set(int(c) for c in rng.choice([1, 2, 3], size=int(rng.integers(1, 4)),
                                               replace=False, p=[0.6, 0.3, 0.1]))
                for _ in range(int(rng.integers(2, 40)))]
        m = _manifest(sets)
        cap = int(rng.integers(1, 10))
        out = balance_downsample(m, cap, case)
        kept = [int(r.image_id[1:]) for r in out.records]
        assert kept == balance_resimulate(sets, m.class_counts(), cap, case)
        assert set(r.image_id for r in out.records) <= set(m.ids())
        assert balance_downsample(m, cap, case).records == out.records
        counts = out.class_counts()
        for c, n in m.class_counts().items():
            # never pushed below the cap, never loses its last exemplar
            assert counts[c] >= min(n, cap)


def test_balance_non_binding_cap():
    m = _manifest([{1}, {2}, {1, 3}])
    assert balance_downsample(m, 10, 1).records == m.records
    with pytest.raises(ValueError):
        balance_downsample(m, 0, 1)


def test_split_sizes_and_determinism():
    m = _manifest([{1}] * 100)
    tr, va = split_train_val(m, 0.15, seed=3)
    assert (len(tr), len(va)) == (85, 15)
    assert set(tr.ids()).isdisjoint(va.ids())
    tr2, va2 = split_train_val(m, 0.15, seed=3)
    assert tr2.ids() == tr.ids() and va2.ids() == va.ids()
    assert DEFAULT_VAL_FRACTION == pytest.approx(12873 / 85819)
    with pytest.raises(ValueError):
        split_train_val(_manifest([{1}]), 0.5)
    with pytest.raises(ValueError):
        split_train_val(m, 1.0)


def test_split_keeps_classes_on_both_sides():
    rng = np.random.default_rng(2)
    for case in range(100):
        sets = [{int(rng.integers(1, 4))} for _ in range(int(rng.integers(6, 30)))]
        m = _manifest(sets)
        tr, va = split_train_val(m, 0.2, case)
        assert len(tr) + len(va) == len(m)
        for c, n in m.class_counts().items():
            if n >= 2:
                assert tr.class_counts()[c] >= 1 and va.class_counts()[c] >= 1


@pytest.mark.criterion(6)
def test_augment_identity_and_flip_involution():
    rng = np.random.default_rng(0)
    ident = AugmentationConfig.disabled()
    flip = AugmentationConfig.flip_only(1.0)
    for _ in range(120):
        h, w = rng.integers(1, 20, size=2)
        img = rng.random((h, w, 3)).astype(np.float32)
        mask = rng.integers(0, 5, (h, w)).astype(np.uint8)
        out, m = augment(img, ident, np.random.default_rng(1), mask=mask)
        assert np.array_equal(out, img) and np.array_equal(m, mask)
        g = np.random.default_rng(2)
        once, m1 = augment(img, flip, g, mask=mask)
        twice, m2 = augment(once, flip, g, mask=m1)
        assert np.array_equal(twice, img) and np.array_equal(m2, mask)


def test_augment_full_config_range_and_determinism():
    cfg = AugmentationConfig(blur_prob=1.0)
    img = np.random.default_rng(0).random((24, 24, 3)).astype(np.float32)
    mask = np.ones((24, 24), np.uint8)
    a, ma = augment(img, cfg, np.random.default_rng(5), mask=mask)
    b, mb = augment(img, cfg, np.random.default_rng(5), mask=mask)
    assert np.array_equal(a, b) and np.array_equal(ma, mb)
    assert a.min() >= 0 and a.max() <= 1
    assert set(np.unique(ma)) <= {1, 255}


def _inside(kind, y, x, cy, cx, r):
    # per-pixel scalar geometry, written independently of the vectorized raster
    dy, dx = y - cy, x - cx
    if kind == "disk":
        return math.hypot(dy, dx) <= r
    if kind == "square":
        return max(abs(dy), abs(dx)) <= 0.85 * r
    if kind == "triangle":
        if not -r <= dy <= 0.7 * r:
            return False
        half = (dy + r) / 1.7        # widens linearly from the apex to r at the base
        return abs(dx) <= half
    if kind == "diamond":
        return abs(dy) + abs(dx) <= r
    if kind == "cross":
        arm = 0.35 * r
        return (abs(dy) <= r and abs(dx) <= arm) or (abs(dx) <= r and abs(dy) <= arm)
    if kind == "ring":
        return 0.55 * r <= math.hypot(dy, dx) <= r
    if kind == "hbar":
        return abs(dy) <= 0.4 * r and abs(dx) <= r
    if kind == "star":
        return math.hypot(dy, dx) <= r * (0.6 + 0.4 * math.cos(5 * math.atan2(dy, dx)))
    raise AssertionError(kind)


def test_shape_raster_matches_analytic_geometry():
    rng = np.random.default_rng(0)
    for case in range(100):
        kind = SHAPES[case % len(SHAPES)]
        cy, cx = rng.uniform(5, 15, size=2)
        r = rng.uniform(2, 6)
        m = shape_mask(kind, cy, cx, r, 20)
        ref = np.array([[_inside(kind, y, x, cy, cx, r) for x in range(20)] for y in range(20)])
        # a pixel exactly on the edge may round either way
        assert (m != ref).sum() <= 1, kind


def test_single_shape_image(tmp_path):
    import colorsys
    from scipy import ndimage
    from wsss.data import load_images
    m = generate_synthetic_shapes(1, 4, 48, seed=3, out_dir=tmp_path, min_shapes=1, max_shapes=1)
    assert len(m) == 1 and len(m.records[0].labels) == 1
    (c,) = m.records[0].labels
    mask = load_gt_masks(m)["img00000"]
    assert set(np.unique(mask)) == {0, c}
    # one connected shape whose pixels carry the class hue band
    assert ndimage.label(mask == c)[1] == 1
    img = load_images(m)["img00000"]
    hue = colorsys.rgb_to_hsv(*img[mask == c].mean(0))[0]
    centre = (c - 1) / 4
    assert min(abs(hue - centre), 1 - abs(hue - centre)) <= 0.06


def test_generator_deterministic_and_class_coverage(tmp_path):
    a = generate_synthetic_shapes(200, 4, 32, seed=11, out_dir=tmp_path / "a")
    b = generate_synthetic_shapes(200, 4, 32, seed=11, out_dir=tmp_path / "b")
    for r in a.records[:20]:
        assert (tmp_path / "a" / r.image_uri).read_bytes() == (tmp_path / "b" / r.image_uri).read_bytes()
    counts = a.class_counts()
    assert all(counts[c] >= 20 for c in range(1, 5))
    masks = load_gt_masks(a)
    for r in a.records:
        assert set(r.labels) == set(np.unique(masks[r.image_id])) - {0}
        assert 1 <= len(r.labels) <= 3


def test_generator_errors(tmp_path):
    with pytest.raises(ValueError):
        generate_synthetic_shapes(1, 9, 32, 0, tmp_path)
    with pytest.raises(ValueError):
        generate_synthetic_shapes(1, 4, 16, 0, tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_synthetic_shapes(1, 4, 32, 0, blocker / "sub")


def test_label_png_round_trip(tmp_path):
    lab = np.array([[0, 1, 255], [3, 3, 2]], np.uint8)
    save_label_png(lab, tmp_path / "l.png")
    assert np.array_equal(load_label_png(tmp_path / "l.png"), lab)
    with pytest.raises(ValueError):
        save_label_png(np.full((2, 2), 300), tmp_path / "bad.png")
