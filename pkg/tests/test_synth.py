import json

import numpy as np
import pytest

from ctxseg.netpbm import NetpbmError, read_image, read_mask, write_image, write_mask
from ctxseg.rng import make_rng
from ctxseg.synth import (ConfusablePair, DatasetError, PlacementError, SceneConfig, augment, crop,
                          generate_dataset, generate_sample, hflip, load_split, noise_field, render)
from oracles import flood_fill_components

CFG = SceneConfig()


def test_generation_is_deterministic(tmp_path):
    generate_dataset(CFG, 6, 3, tmp_path / "a")
    generate_dataset(CFG, 6, 3, tmp_path / "b")
    for f in sorted((tmp_path / "a").rglob("*")):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()
    c = generate_sample(CFG, 4, 0)
    assert not np.array_equal(c.image, generate_sample(CFG, 3, 0).image)


def test_zero_objects_is_background_only():
    cfg = SceneConfig(objects_min=0, objects_max=0)
    s = generate_sample(cfg, 0, 0)
    assert s.objects == [] and not s.mask.any()


def test_confusable_pixels_identical_given_context():
    """Swapping the person class changes the mask but not one image pixel,
    and removing the context object leaves the person's pixels untouched."""
    swap = {"doctor": "pedestrian", "pedestrian": "doctor"}
    checked = 0
    for i in range(100):
        s = generate_sample(CFG, 9, i)
        persons = [o for o in s.objects if o["class"] in swap]
        if not persons:
            continue
        noise = noise_field(CFG, 9, i)
        swapped = [dict(o, **{"class": swap.get(o["class"], o["class"])}) for o in s.objects]
        img2, mask2 = render(swapped, CFG, noise)
        assert np.array_equal(img2, s.image)
        diff = mask2 != s.mask
        person_px = np.isin(s.mask, [1, 2])
        assert np.array_equal(diff, person_px)
        no_ctx = [o for o in swapped if o["class"] not in ("hospital", "street")]
        img3, _ = render(no_ctx, CFG, noise)
        assert np.array_equal(img3[person_px], s.image[person_px])
        checked += 1
    assert checked > 50


def test_each_person_has_its_context_nearby():
    pair = CFG.confusable[0]
    for i in range(100):
        s = generate_sample(CFG, 5, i)
        names = [o["class"] for o in s.objects]
        for person, ctx in zip(pair.classes, pair.contexts):
            if person in names:
                assert ctx in names
                a = s.objects[names.index(person)]["box"]
                b = s.objects[names.index(ctx)]["box"]
                ca = np.array([a[0] + a[2] / 2, a[1] + a[3] / 2]) / 64
                cb = np.array([b[0] + b[2] / 2, b[1] + b[3] / 2]) / 64
                assert np.hypot(*(ca - cb)) <= CFG.context_max_dist


def test_manifest_objects_match_mask_components(tmp_path):
    generate_dataset(CFG, 30, 2, tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    vocab = CFG.vocabulary()
    for entry in doc["samples"]:
        mask = read_mask(tmp_path / entry["mask"])
        comps = sorted(c for c, _ in flood_fill_components(mask))
        assert comps == sorted(vocab.class_id(o["class"]) for o in entry["objects"])
    assert doc["similarity_pairs"] == [["doctor", "pedestrian"]]


def test_load_split(tmp_path):
    generate_dataset(CFG, 4, 0, tmp_path)
    sp = load_split(tmp_path)
    assert sp.images.shape == (4, 64, 64, 3) and sp.masks.shape == (4, 64, 64)
    assert sp.confusable_ids == [1, 2]
    with pytest.raises(DatasetError):
        load_split(tmp_path / "nope")


def test_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(confusable=[ConfusablePair(("doctor", "car"), ("hospital", "street"))])
    with pytest.raises(ValueError):
        SceneConfig(objects_min=3, objects_max=2)
    with pytest.raises(PlacementError):
        generate_sample(SceneConfig(height=16, width=16, snap=1), 0, 0)


def test_augment_properties(rng):
    img = rng.integers(0, 256, size=(8, 10, 3), dtype=np.uint8)
    mask = rng.integers(0, 4, size=(8, 10)).astype(np.uint8)
    a, b = hflip(*hflip(img, mask))
    assert np.array_equal(a, img) and np.array_equal(b, mask)
    a, b = crop(img, mask, 0, 0, (8, 10))
    assert np.array_equal(a, img) and np.array_equal(b, mask)
    _, fm = hflip(img, mask)
    assert np.array_equal(np.bincount(fm.ravel(), minlength=4), np.bincount(mask.ravel(), minlength=4))
    a1 = augment(img, mask, make_rng(1), crop_size=(4, 4))
    a2 = augment(img, mask, make_rng(1), crop_size=(4, 4))
    assert all(np.array_equal(x, y) for x, y in zip(a1, a2))
    assert a1[0].shape == (4, 4, 3) and a1[1].shape == (4, 4)
    with pytest.raises(ValueError):
        augment(img, mask, make_rng(0), crop_size=(9, 4))


def test_augment_moves_image_and_mask_together(rng):
    img = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    mask = img[..., 0].copy()
    for seed in range(10):
        a, b = augment(img, mask, make_rng(seed), crop_size=(5, 6))
        assert np.array_equal(a[..., 0], b)


# -- netpbm -------------------------------------------------------------------

def test_ppm_pgm_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    m = rng.integers(0, 256, size=(5, 7), dtype=np.uint8)
    write_image(tmp_path / "a.ppm", img)
    write_mask(tmp_path / "a.pgm", m)
    assert np.array_equal(read_image(tmp_path / "a.ppm"), img)
    assert np.array_equal(read_mask(tmp_path / "a.pgm"), m)
    raw = (tmp_path / "a.ppm").read_bytes()
    assert raw.startswith(b"P6\n7 5\n255\n") and len(raw) == 11 + 105
    write_image(tmp_path / "b.ppm", read_image(tmp_path / "a.ppm"))
    assert (tmp_path / "b.ppm").read_bytes() == raw


def test_known_header_with_comment(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n3 2\n255\n" + bytes(range(6)))
    assert read_mask(p).tolist() == [[0, 1, 2], [3, 4, 5]]


@pytest.mark.parametrize("data,match", [
    (b"P3\n1 1\n255\n0 0 0\n", "unsupported format"),
    (b"P5\n1 1\n255\n\x00", "unsupported format"),
    (b"XX\n1 1\n255\n", "malformed"),
    (b"P6\n2 2\n255\n\x00\x00", "truncated"),
    (b"P6\n2 2\n65535\n", "maxval"),
    (b"P6\n2", "malformed"),
])
def test_netpbm_errors(tmp_path, data, match):
    p = tmp_path / "x.ppm"
    p.write_bytes(data)
    with pytest.raises(NetpbmError, match=match):
        read_image(p)
