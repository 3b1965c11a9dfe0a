"""Tests for the Delaunay triangulation, the Kruskal MST and the 57-value vector."""

import itertools
import math

import numpy as np
import pytest
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial import ConvexHull, Delaunay
from scipy.spatial.distance import cdist

from errors import DegenerateCollinear, TooFewPoints
from features_local import aggregate
from features_spatial import (
    DELAUNAY_SLICE,
    FEATURE_COLUMNS,
    LOCAL_SLICE,
    MST_SLICE,
    assemble_features,
    delaunay,
    mst,
    tile_features,
)
from image_io import GrayImage, Tile, to_gray
from segmentation import SegConfig, SegmentationResult, segment_nuclei
from synthgen import SynthClass, default_spec, generate


def _triangle_set(tri) -> set:
    return {tuple(sorted(map(tuple, tri.points[t].tolist()))) for t in tri.triangles}


def _prufer_tree(sequence, n):
    degree = [1] * n
    for v in sequence:
        degree[v] += 1
    edges = []
    for v in sequence:
        leaf = min(i for i in range(n) if degree[i] == 1)
        edges.append((leaf, v))
        degree[leaf] -= 1
        degree[v] -= 1
    u, w = [i for i in range(n) if degree[i] == 1]
    edges.append((u, w))
    return edges


def _brute_mst_weight(points) -> float:
    n = len(points)
    dist = cdist(points, points)
    if n == 2:
        return float(dist[0, 1])
    return min(
        sum(dist[a, b] for a, b in _prufer_tree(seq, n))
        for seq in itertools.product(range(n), repeat=n - 2)
    )


def test_delaunay():
    """Hand examples, random sets and insertion-order independence."""
    print("Testing delaunay")
    print("=" * 40)

    print("1. One triangle and the unit square")
    tri = delaunay([(0, 0), (1, 0), (0, 1)])
    assert len(tri.triangles) == 1, "Expected one triangle"
    assert abs(tri.areas()[0] - 0.5) < 1e-12, "Area should be 0.5"
    assert abs(tri.perimeters()[0] - (2 + math.sqrt(2))) < 1e-12, "Perimeter should be 2 + sqrt(2)"
    square = delaunay([(0, 0), (1, 0), (1, 1), (0, 1)])
    assert len(square.triangles) == 2 and abs(square.areas().sum() - 1.0) < 1e-12, "Square splits in two"
    print("   PASSED\n")

    print("2. 100 seeded random sets: empty circumcircles and 2n - 2 - h triangles")
    rng = np.random.default_rng(2024)
    for _ in range(100):
        n = int(rng.integers(3, 51))
        points = rng.uniform(0, 100, size=(n, 2))
        tri = delaunay(points)
        hull = len(ConvexHull(tri.points).vertices)
        assert len(tri.triangles) == 2 * n - 2 - hull, f"n={n}: {len(tri.triangles)} triangles, hull {hull}"
        for a, b, c in tri.points[tri.triangles]:
            d = 2 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
            ux = ((a @ a) * (b[1] - c[1]) + (b @ b) * (c[1] - a[1]) + (c @ c) * (a[1] - b[1])) / d
            uy = ((a @ a) * (c[0] - b[0]) + (b @ b) * (a[0] - c[0]) + (c @ c) * (b[0] - a[0])) / d
            radius = math.hypot(a[0] - ux, a[1] - uy)
            dist = np.hypot(tri.points[:, 0] - ux, tri.points[:, 1] - uy)
            assert np.all(dist >= radius * (1 - 1e-9)), "A point lies inside a circumcircle"
    print("   PASSED\n")

    print("3. Shuffled input gives the same triangles")
    points = rng.uniform(0, 50, size=(40, 2))
    reference = _triangle_set(delaunay(points))
    for _ in range(5):
        assert _triangle_set(delaunay(rng.permutation(points))) == reference, "Insertion order changed the result"
    grid = [(x, y) for x in range(4) for y in range(4)]
    grid_reference = _triangle_set(delaunay(grid))
    assert _triangle_set(delaunay(grid[::-1])) == grid_reference, "Cocircular grid depends on order"
    print("   PASSED\n")

    print("4. Degenerate input")
    with pytest.raises(TooFewPoints):
        delaunay([(0, 0), (1, 1)])
    with pytest.raises(TooFewPoints):
        delaunay([(0, 0), (0, 0), (1, 1)])
    with pytest.raises(DegenerateCollinear):
        delaunay([(0, 0), (1, 1), (2, 2), (3, 3)])
    print("   PASSED\n")


def test_mst():
    """Hand examples, the Pruefer oracle and the Delaunay subgraph property."""
    print("Testing mst")
    print("=" * 40)

    print("1. Hand examples")
    assert mst([(0, 0), (3, 4)]).total_weight == 5.0, "Two points at distance 5"
    chain = mst([(2 * k, 0) for k in range(5)])
    assert chain.total_weight == 8.0 and list(chain.weights) == [2.0] * 4, "Collinear chain"
    with pytest.raises(TooFewPoints):
        mst([(1, 1)])
    print("   PASSED\n")

    print("2. Pruefer enumeration oracle")
    rng = np.random.default_rng(77)
    for n in [2, 3, 4, 5, 6, 7] * 3 + [7, 7]:
        points = rng.uniform(0, 10, size=(n, 2))
        tree = mst(points)
        assert len(tree.edges) == n - 1, "Spanning tree needs n - 1 edges"
        assert abs(tree.total_weight - _brute_mst_weight(points)) <= 1e-9, f"n={n}: not minimal"
    print("   PASSED\n")

    print("3. MST edges lie on the Delaunay graph")
    for _ in range(10):
        tri = delaunay(rng.uniform(0, 100, size=(int(rng.integers(5, 60)), 2)))
        pts = tri.points
        edges = {tuple(sorted(e)) for t in tri.triangles for e in itertools.combinations(t.tolist(), 2)}
        i, j = np.array(sorted(edges)).T
        weights = np.hypot(*(pts[i] - pts[j]).T)
        graph = coo_matrix((weights, (i, j)), shape=(len(pts), len(pts)))
        restricted = minimum_spanning_tree(graph).sum()
        assert abs(mst(pts).total_weight - restricted) < 1e-9, "Euclidean MST left the Delaunay graph"
    print("   PASSED\n")


def test_spatial_invariances():
    """Translation and power-of-two scaling of centroid sets."""
    print("Testing spatial invariances")
    print("=" * 40)
    rng = np.random.default_rng(13)
    points = rng.integers(0, 2 ** 20, size=(30, 2)) / 2.0 ** 14

    def block(pts):
        tri = delaunay(pts)
        return (
            list(aggregate(mst(pts).weights))
            + list(aggregate(tri.areas()))
            + list(aggregate(tri.perimeters()))
        )

    base = block(points)
    moved = block(points + np.array([17.0, -5.0]))
    assert np.allclose(moved, base, rtol=1e-12, atol=0), "Translation changed the spatial block"
    scaled = np.array(block(points * 2.0))
    factors = np.array([2, 2, 1, 1, 4, 4, 1, 1, 2, 2, 1, 1], dtype=float)
    assert np.allclose(scaled, factors * np.array(base), rtol=1e-12, atol=0), "Scaling rule violated"
    for k in (2, 3, 6, 7, 10, 11):
        assert abs(scaled[k] - base[k]) < 1e-12, f"Ratio statistic {k} changed under scaling"
    print("   PASSED\n")


def _squares_image(centres, side=80) -> GrayImage:
    values = np.full((side, side), 250.0)
    for r, c in centres:
        values[r - 2:r + 3, c - 2:c + 3] = 20.0
    return GrayImage(values)


def test_assemble_features():
    """Zero, two, collinear and full nuclei sets."""
    print("Testing assemble_features")
    print("=" * 40)
    assert len(FEATURE_COLUMNS) == 57 and len(set(FEATURE_COLUMNS)) == 57, "57 distinct columns"

    print("1. No nuclei")
    blank = GrayImage(np.full((32, 32), 200.0))
    empty = SegmentationResult((), float("nan"), "blank", (32, 32))
    fv = assemble_features(empty, blank)
    assert not fv.valid and not fv.values.any() and len(fv.values) == 57, "Blank tile gives invalid zeros"
    flat_tile = Tile(np.full((64, 64, 3), 200, dtype=np.uint8))
    fv, _ = tile_features(flat_tile, scale=0)
    assert not fv.valid and not fv.values.any(), "Constant tile gives invalid zeros"
    print("   PASSED\n")

    print("2. Two nuclei")
    img = _squares_image([(20, 20), (20, 50)])
    seg = segment_nuclei(img, SegConfig(4, 100))
    fv = assemble_features(seg, img)
    assert list(fv.values[MST_SLICE]) == [30.0, 0.0, 1.0, 1.0], f"MST block {fv.values[MST_SLICE]}"
    assert not fv.values[DELAUNAY_SLICE].any() and not fv.valid, "Delaunay block is zero and flagged"
    print("   PASSED\n")

    print("3. Three collinear nuclei")
    img = _squares_image([(20, 10), (20, 30), (20, 50)])
    fv = assemble_features(segment_nuclei(img, SegConfig(4, 100)), img)
    assert fv.values[MST_SLICE][0] == 20.0 and not fv.values[DELAUNAY_SLICE].any(), "Collinear centroids"
    assert not fv.valid, "Collinear tile is flagged"
    print("   PASSED\n")

    print("4. Planted tile against scipy")
    result = generate(default_spec(SynthClass.CRIBRIFORM_LIKE, 21))
    gray = to_gray(result.tile)
    fv, seg = tile_features(result.tile, scale=0)
    assert fv.valid and np.all(np.isfinite(fv.values)), "Planted tile should be valid"
    assert fv.values[0] == result.nucleus_count, "Count should match the planted nuclei"
    centroids = np.array([obj.centroid for obj in seg.objects])

    spanning = minimum_spanning_tree(cdist(centroids, centroids)).tocoo()
    expected_mst = aggregate(spanning.data)
    assert np.allclose(fv.values[MST_SLICE], expected_mst, rtol=1e-9, atol=1e-9), "MST block differs"

    simplices = Delaunay(centroids).simplices
    a, b, c = (centroids[simplices[:, k]] for k in range(3))
    areas = np.abs((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])) / 2
    perimeters = np.hypot(*(b - a).T) + np.hypot(*(c - b).T) + np.hypot(*(a - c).T)
    expected_delaunay = list(aggregate(areas)) + list(aggregate(perimeters))
    assert np.allclose(fv.values[DELAUNAY_SLICE], expected_delaunay, rtol=1e-9, atol=1e-9), "Delaunay block differs"
    assert fv.values[LOCAL_SLICE].shape == (45,) and gray.width == 256, "Local block width"
    print("   PASSED\n")


def main():
    """Run all spatial feature tests."""
    print("cribra - features_spatial tests")
    print("=" * 60)
    print()

    try:
        test_delaunay()
        test_mst()
        test_spatial_invariances()
        test_assemble_features()

        print("=" * 60)
        print("All features_spatial tests PASSED!")

    except AssertionError as e:
        print(f"Test failed: {e}")


if __name__ == "__main__":
    main()
