"""Tests for the translation/rotation grid and blank-region rejection."""

import numpy as np
import pytest

from augmentation import (
    AugmentationGrid,
    RejectionPolicy,
    blank_fraction,
    enumerate_variants,
    sample_augmented,
    variant_tile_id,
)
from errors import ConfigError
from file_formats import Label
from image_io import Tile, extract_region

SMALL_GRID = AugmentationGrid(delta=10, k_max=2, thetas=(0, 60, 120), side=64)


def _tissue_disk(side: int = 300, radius: int = 60) -> Tile:
    rows, cols = np.mgrid[0:side, 0:side]
    pixels = np.full((side, side, 3), 250, dtype=np.uint8)
    inside = (rows - side // 2) ** 2 + (cols - side // 2) ** 2 <= radius ** 2
    pixels[inside] = (180, 120, 170)
    return Tile(pixels, id="ctx", patient_id="P01", label=Label.CRIBRIFORM)


def test_enumerate_variants():
    """Variant counts and order."""
    print("Testing enumerate_variants")
    print("=" * 40)
    assert len(enumerate_variants(AugmentationGrid(), (500, 500))) == 75, "Default grid gives 75 variants"
    assert AugmentationGrid().variant_count == 75, "variant_count disagrees"

    single = enumerate_variants(AugmentationGrid(k_max=0, thetas=(0,)), (12.5, 40))
    assert len(single) == 1 and single[0].center == (12.5, 40) and single[0].theta == 0.0, "Identity grid"

    small = enumerate_variants(AugmentationGrid(k_max=1, thetas=(0, 60)), (0, 0))
    assert len(small) == 18, "3 x 3 x 2 variants"
    assert [v.index for v in small] == list(range(18)), "Indices follow enumeration order"
    assert (small[0].dx, small[0].dy, small[0].theta) == (-50, -50, 0.0), "x offsets vary slowest"

    with pytest.raises(ConfigError):
        AugmentationGrid(thetas=(400,))
    with pytest.raises(ConfigError):
        AugmentationGrid(side=8)
    print("   PASSED\n")


def test_sample_augmented():
    """Acceptance, out-of-bounds rejection and provenance."""
    print("Testing sample_augmented")
    print("=" * 40)

    print("1. Mid-gray context, centred origin")
    gray = Tile(np.full((300, 300, 3), 128, dtype=np.uint8), id="gray", patient_id="P02", label=Label.NON_CRIBRIFORM)
    result = sample_augmented(gray, SMALL_GRID, (150, 150), workers=2)
    assert len(result.accepted) == 75 and not result.rejections, "Everything should be accepted"
    ids = [t.id for t in result.accepted]
    assert len(set(ids)) == 75, "Variant ids must be unique"
    first = result.accepted[0]
    assert first.id == variant_tile_id("gray", -20, -20, 0) == "gray_dx-20_dy-20_r0", f"Id {first.id}"
    assert first.transform == (-20, -20, 0.0) and first.source_id == "gray", "Lineage recorded"
    assert first.patient_id == "P02" and first.label is Label.NON_CRIBRIFORM, "Metadata inherited"
    print("   PASSED\n")

    print("2. Corner origin")
    result = sample_augmented(gray, SMALL_GRID, (0, 0), workers=2)
    assert not result.accepted and len(result.rejections) == 75, "Corner variants fall outside"
    assert {r.reason for r in result.rejections} == {"OutOfBounds"}, "Reason should be OutOfBounds"
    print("   PASSED\n")

    print("3. Identity variant equals direct cropping")
    identity = AugmentationGrid(delta=10, k_max=0, thetas=(0,), side=64)
    context = _tissue_disk()
    tile = sample_augmented(context, identity, (150, 150), workers=1).accepted[0]
    assert np.array_equal(tile.pixels, context.pixels[118:182, 118:182]), "Identity variant changed pixels"
    print("   PASSED\n")


def test_blank_rejection():
    """Blank fractions against a direct pixel scan, and monotonicity."""
    print("Testing blank rejection")
    print("=" * 40)
    context = _tissue_disk(radius=20)
    grid = AugmentationGrid(delta=15, k_max=2, thetas=(0, 60, 120), side=96)
    origin = (150, 150)

    expected = set()
    for variant in enumerate_variants(grid, origin):
        region = extract_region(context, variant.center, grid.side, variant.theta, grid.thetas)
        fraction = float(np.mean(np.all(region.pixels >= 240, axis=2)))
        assert abs(fraction - blank_fraction(region)) < 1e-12, "blank_fraction disagrees with the scan"
        if fraction <= 0.9:
            expected.add(variant_tile_id("ctx", variant.dx, variant.dy, variant.theta))

    loose = sample_augmented(context, grid, origin, RejectionPolicy(0.9), workers=2)
    assert {t.id for t in loose.accepted} == expected, "Accepted set differs from the direct scan"
    assert len(loose.accepted) + len(loose.rejections) == 75, "Every variant is accepted or rejected"
    assert {r.reason for r in loose.rejections} <= {"Blank"}, "Only blank rejections expected"

    strict = sample_augmented(context, grid, origin, RejectionPolicy(0.88), workers=2)
    assert {t.id for t in strict.accepted} <= {t.id for t in loose.accepted}, "Lower threshold accepted more"
    print("   PASSED\n")


def main():
    """Run all augmentation tests."""
    print("cribra - augmentation tests")
    print("=" * 60)
    print()

    try:
        test_enumerate_variants()
        test_sample_augmented()
        test_blank_rejection()

        print("=" * 60)
        print("All augmentation tests PASSED!")

    except AssertionError as e:
        print(f"Test failed: {e}")


if __name__ == "__main__":
    main()
