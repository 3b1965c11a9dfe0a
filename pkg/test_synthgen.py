"""Tests for the synthetic tile generator and dataset writer."""

import os
import tempfile

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from errors import ConfigError
from evaluation import load_sets_config
from file_formats import Label, read_manifest
from image_io import load_tile, to_gray
from segmentation import SegConfig, segment_nuclei
from synthgen import DatasetPlan, SynthClass, SynthSpec, default_spec, generate, mst_mean_edges, write_dataset


def test_generate():
    """Labels, determinism and planted nuclei."""
    print("Testing generate")
    print("=" * 40)

    print("1. Labels and planted counts")
    crib = generate(default_spec(SynthClass.CRIBRIFORM_LIKE, 10, "P01"))
    plain = generate(default_spec(SynthClass.NON_CRIBRIFORM_LIKE, 10, "P01"))
    assert crib.label is Label.CRIBRIFORM and plain.label is Label.NON_CRIBRIFORM, "Class labels"
    assert crib.nucleus_count == 40 and plain.nucleus_count == 42, "Planted counts"
    assert crib.tile.pixels.shape == (256, 256, 3) and crib.tile.patient_id == "P01", "Tile shape and patient"
    assert 0 < crib.mask_fraction < 0.2, f"Mask fraction {crib.mask_fraction}"
    print("   PASSED\n")

    print("2. Identical specs give identical bytes")
    again = generate(default_spec(SynthClass.CRIBRIFORM_LIKE, 10, "P01"))
    assert again.tile.pixels.tobytes() == crib.tile.pixels.tobytes(), "Tile bytes differ"
    assert np.array_equal(again.mask, crib.mask), "Mask differs"
    other = generate(default_spec(SynthClass.CRIBRIFORM_LIKE, 11, "P01"))
    assert other.tile.pixels.tobytes() != crib.tile.pixels.tobytes(), "Different seeds should differ"
    print("   PASSED\n")

    print("3. Segmentation recovers every planted nucleus")
    for seed in range(3):
        for synth_class in SynthClass:
            result = generate(default_spec(synth_class, 100 + seed))
            seg = segment_nuclei(to_gray(result.tile), SegConfig().scaled_for(256))
            assert len(seg.objects) == result.nucleus_count, f"{synth_class.value} seed {seed}: {len(seg.objects)}"
            found = np.array([obj.centroid for obj in seg.objects])
            nearest = cdist(np.array(result.centers), found).min(axis=1)
            assert nearest.max() < 1.0, f"A centroid lies {nearest.max():.2f} px from its planted centre"
    print("   PASSED\n")

    print("4. Larger tiles scale the geometry")
    big = generate(default_spec(SynthClass.NON_CRIBRIFORM_LIKE, 3, side=512))
    seg = segment_nuclei(to_gray(big.tile), SegConfig().scaled_for(512))
    assert big.tile.width == 512 and len(seg.objects) == big.nucleus_count, "512 px tile"
    print("   PASSED\n")

    print("5. Invalid specs")
    with pytest.raises(ConfigError):
        SynthSpec(1, SynthClass.CRIBRIFORM_LIKE, lumina_per_gland=1)
    with pytest.raises(ConfigError):
        SynthSpec(1, SynthClass.NON_CRIBRIFORM_LIKE, lumina_per_gland=3)
    with pytest.raises(ConfigError):
        SynthSpec(1, SynthClass.CRIBRIFORM_LIKE, side=8)
    print("   PASSED\n")


def test_class_separation():
    """Mean MST edge separates the classes over 200 tiles each."""
    print("Testing class separation")
    print("=" * 40)
    crib = mst_mean_edges([generate(default_spec(SynthClass.CRIBRIFORM_LIKE, s)) for s in range(200)])
    plain = mst_mean_edges([generate(default_spec(SynthClass.NON_CRIBRIFORM_LIKE, s)) for s in range(200)])
    assert crib.min() >= 12.0, f"Cribriform nuclei closer than the placement spacing: {crib.min():.2f}"
    gap = abs(crib.mean() - plain.mean())
    pooled = np.sqrt((crib.var(ddof=1) + plain.var(ddof=1)) / 2.0)
    assert gap > pooled, f"Mean gap {gap:.2f} does not exceed the pooled std {pooled:.2f}"
    print("   PASSED\n")


def test_write_dataset():
    """Tiles, masks, manifest and patient sets on disk."""
    print("Testing write_dataset")
    print("=" * 40)
    plan = DatasetPlan(patients_per_set=1, tiles_per_class=2, seed=7)
    with tempfile.TemporaryDirectory() as tmp:
        rows = write_dataset(tmp, plan, workers=2)
        assert len(rows) == 12, f"{len(rows)} tiles written"
        manifest = read_manifest(os.path.join(tmp, "manifest.csv"))
        assert [r.tile_id for r in manifest] == [r.tile_id for r in rows], "Manifest order"
        assert {r.patient_id for r in manifest} == {"P01", "P02", "P03"}, "Patients"
        assert sum(r.label is Label.CRIBRIFORM for r in manifest) == 6, "Balanced classes"
        assert load_sets_config(os.path.join(tmp, "sets.env")) == [["P01"], ["P02"], ["P03"]], "sets.env"
        first = manifest[0]
        tile = load_tile(first.tile_path, first)
        assert tile.pixels.shape == (256, 256, 3), "Tile shape on disk"
        assert os.path.exists(os.path.join(tmp, "masks", f"{first.tile_id}.png")), "Mask missing"
    print("   PASSED\n")


def main():
    """Run all synthgen tests."""
    print("cribra - synthgen tests")
    print("=" * 60)
    print()

    try:
        test_generate()
        test_class_separation()
        test_write_dataset()

        print("=" * 60)
        print("All synthgen tests PASSED!")

    except AssertionError as e:
        print(f"Test failed: {e}")


if __name__ == "__main__":
    main()
