from dataclasses import replace

import numpy as np
import pytest

from app.synthworld import (
    PALETTE_NAMES,
    PALETTE_RGB,
    GarmentSpec,
    PersonSpec,
    composite_swap,
    render,
    render_flat_garment,
    sample_specs,
)
from common.errors import ConfigError, ValidationError
from common.imageio import load_mask, load_rgb
from common.jsonl import read_records
from worker.synth_gen import MANIFEST_NAME, generate_dataset, read_manifest

RED = PALETTE_NAMES.index("red")


def _colors(image: np.ndarray, mask: np.ndarray) -> set[tuple[int, ...]]:
    px = np.round(image[mask.astype(bool)] * 255).astype(np.uint8)
    return {tuple(int(c) for c in row) for row in px}


def test_sample_specs_deterministic():
    assert sample_specs(0) == sample_specs(0)
    assert sample_specs(0) != sample_specs(1)


def test_sample_specs_ranges():
    patterns = set()
    for seed in range(1000):
        person, garment = sample_specs(seed)
        y0, y1, x0, x1 = person.torso_rect.pixel_bounds(64, 48)
        assert 0 <= y0 < y1 <= 64 and 0 <= x0 < x1 <= 48
        patterns.add(garment.pattern)
    assert len(patterns) >= 2


def test_render_is_pure():
    person, garment = sample_specs(3)
    a = render(person, garment)
    b = render(person, garment)
    assert a.image.dtype == np.float32 and a.image.shape == (64, 48, 3)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.garment_mask, b.garment_mask)
    assert 0.0 <= a.image.min() and a.image.max() <= 1.0


def test_mask_area_fraction():
    for seed in range(200):
        rp = render(*sample_specs(seed))
        assert 0.06 <= rp.garment_mask.mean() <= 0.24


def test_identity_preserved_outside_garment():
    person, garment = sample_specs(4)
    other = GarmentSpec(pattern="checker", color_a=(garment.color_a + 1) % 12, color_b=(garment.color_a + 2) % 12)
    a = render(person, garment)
    b = render(person, other)
    outside = a.garment_mask == 0
    assert np.array_equal(a.image[outside], b.image[outside])
    assert np.array_equal(a.garment_mask, b.garment_mask)


def test_solid_red_garment():
    person, _ = sample_specs(5)
    rp = render(person, GarmentSpec(pattern="solid", color_a=RED, color_b=RED))
    assert _colors(rp.image, rp.garment_mask) == {tuple(int(c) for c in PALETTE_RGB[RED])}


def test_pattern_uses_only_garment_colors():
    person, _ = sample_specs(6)
    g = GarmentSpec(pattern="hstripe", color_a=1, color_b=4, stripe_period=4)
    rp = render(person, g)
    assert _colors(rp.image, rp.garment_mask) == {tuple(int(c) for c in PALETTE_RGB[i]) for i in (1, 4)}


def test_held_item_visible_and_outside_garment():
    held = 0
    for seed in range(300):
        person, garment = sample_specs(seed)
        assert person.item_color not in (person.background_color, person.head_color, person.pants_color)
        if not person.held_item:
            continue
        held += 1
        without = replace(person, held_item=False)
        a = render(person, garment)
        b = render(without, garment)
        item_px = np.any(a.image != b.image, axis=-1)
        assert int(item_px.sum()) == 9  # the whole 3×3 item square
        assert not np.any(item_px & a.garment_mask.astype(bool))
    assert held > 100


def test_render_rejects_bad_dims():
    person, garment = sample_specs(0)
    with pytest.raises(ConfigError):
        render(person, garment, 62, 48)


def test_spec_validation():
    with pytest.raises(ValidationError):
        GarmentSpec(pattern="vstripe", color_a=3, color_b=3)
    with pytest.raises(ValidationError):
        GarmentSpec(pattern="plaid", color_a=1, color_b=2)
    person, _ = sample_specs(0)
    with pytest.raises(ValidationError):
        replace(person, arm_angles=(0.0, 75.0))


def test_spec_dict_round_trip():
    person, garment = sample_specs(9)
    assert PersonSpec.from_dict(person.to_dict()) == person
    assert GarmentSpec.from_dict(garment.to_dict()) == garment


def test_composite_swap(person_pair):
    pm, pn = person_pair
    same = composite_swap(pm, pm.garment_spec)
    assert same.same_pixels(pm)

    p_nm = composite_swap(pn, pm.garment_spec)
    assert np.array_equal(p_nm.garment_mask, pn.garment_mask)
    assert p_nm.person_spec == pn.person_spec and p_nm.garment_spec == pm.garment_spec

    back = composite_swap(p_nm, pn.garment_spec)
    assert back.same_pixels(pn)


def test_flat_garment():
    g = GarmentSpec(pattern="solid", color_a=RED, color_b=RED)
    flat = render_flat_garment(g)
    assert flat.is_flat and flat.garment_mask.sum() == 32 * 24
    assert flat.image[~flat.garment_mask.astype(bool)].max() == 0.0
    assert composite_swap(flat, GarmentSpec(pattern="solid", color_a=3, color_b=3)).is_flat


def test_generate_dataset(tmp_path):
    m = generate_dataset(5, seed=7, out_dir=tmp_path / "a")
    assert len(m.records) == 5
    assert len(list((tmp_path / "a" / "images").iterdir())) == 5
    assert len(list((tmp_path / "a" / "masks").iterdir())) == 5

    rows = read_records(tmp_path / "a" / MANIFEST_NAME)
    assert rows[0]["kind"] == "header" and rows[0]["n_pairs"] == 5
    assert set(rows[1]) >= {"id", "image_path", "mask_path", "spec"}

    rec = m.records[2]
    rp = render(rec.person, rec.garment)
    assert np.array_equal(load_rgb(tmp_path / "a" / rec.image_path), rp.image)
    assert np.array_equal(load_mask(tmp_path / "a" / rec.mask_path), rp.garment_mask)

    again = read_manifest(tmp_path / "a")
    assert [r.to_dict() for r in again.records] == [r.to_dict() for r in m.records]


def test_generate_dataset_is_byte_identical(tmp_path):
    first = {}
    for run in range(2):
        generate_dataset(10, seed=7, out_dir=tmp_path / "same")
        files = sorted(p for p in (tmp_path / "same").rglob("*") if p.is_file())
        snapshot = {p.relative_to(tmp_path): p.read_bytes() for p in files}
        if run == 0:
            first = snapshot
    assert snapshot == first
    assert len(first) == 21


def test_generate_empty_dataset(tmp_path):
    m = generate_dataset(0, seed=1, out_dir=tmp_path / "empty")
    assert m.records == []
    assert not (tmp_path / "empty" / "images").exists()
    assert len(read_records(tmp_path / "empty" / MANIFEST_NAME)) == 1


def test_generate_dataset_ppm(tmp_path):
    m = generate_dataset(2, seed=1, out_dir=tmp_path / "ppm", image_format="ppm")
    assert m.records[0].image_path.endswith(".ppm") and m.records[0].mask_path.endswith(".pgm")
    rp = render(m.records[0].person, m.records[0].garment)
    assert np.array_equal(load_rgb(tmp_path / "ppm" / m.records[0].image_path), rp.image)
