"""Nuclei-centroid graph features: Delaunay triangulation, Kruskal MST and the 57-value vector."""

import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Tuple

import numpy as np
from scipy.spatial.distance import pdist

from config import FEATURE_SCALE
from errors import DegenerateCollinear, DegenerateImage, NoNuclei, NonFiniteFeature, TooFewPoints
from features_local import LOCAL_COLUMNS, stat_columns, aggregate, local_feature_block
from image_io import GrayImage, Tile, downscale, to_gray
from segmentation import SegConfig, SegmentationResult, segment_nuclei

logger = logging.getLogger(__name__)

FEATURE_COLUMNS = (
    LOCAL_COLUMNS
    + stat_columns("mst_edge")
    + stat_columns("delaunay_area")
    + stat_columns("delaunay_perimeter")
)
FEATURE_COUNT = len(FEATURE_COLUMNS)
LOCAL_SLICE = slice(0, len(LOCAL_COLUMNS))
MST_SLICE = slice(len(LOCAL_COLUMNS), len(LOCAL_COLUMNS) + 4)
DELAUNAY_SLICE = slice(len(LOCAL_COLUMNS) + 4, FEATURE_COUNT)

MIN_TRIANGLE_AREA = 1e-12
COLLINEAR_TOLERANCE = 1e-9
# Super-triangle vertices sit this many bounding-box extents away
SUPER_SCALE = 2.0 ** 64

# Relative error bound of the floating incircle test, with headroom
INCIRCLE_ERRBOUND = 1e-14


def unique_points(points) -> np.ndarray:
    """Merge exact duplicates; the result is in lexicographic (x, y) order."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        return pts
    return np.unique(pts, axis=0)


@dataclass(frozen=True, eq=False)
class Triangulation:
    points: np.ndarray
    triangles: np.ndarray  # (m, 3) counter-clockwise index triples

    def areas(self) -> np.ndarray:
        a, b, c = (self.points[self.triangles[:, k]] for k in range(3))
        cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        return np.abs(cross) / 2.0

    def perimeters(self) -> np.ndarray:
        a, b, c = (self.points[self.triangles[:, k]] for k in range(3))
        return (
            np.hypot(*(b - a).T) + np.hypot(*(c - b).T) + np.hypot(*(a - c).T)
        )


@dataclass(frozen=True, eq=False)
class SpanningTree:
    edges: List[Tuple[int, int, float]]

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, _, w in self.edges], dtype=np.float64)

    @property
    def total_weight(self) -> float:
        return float(sum(w for _, _, w in self.edges))


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    valid: bool
    notes: Tuple[str, ...] = ()


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, x: int, y: int) -> bool:
        px, py = self.find(x), self.find(y)
        if px == py:
            return False
        if self.rank[px] < self.rank[py]:
            px, py = py, px
        self.parent[py] = px
        if self.rank[px] == self.rank[py]:
            self.rank[px] += 1
        return True


def mst(points) -> SpanningTree:
    """Kruskal over the complete Euclidean graph; equal weights resolve by (i, j)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    if n < 2:
        raise TooFewPoints(n, 2)

    first, second = np.triu_indices(n, k=1)
    weights = pdist(pts)
    order = np.lexsort((second, first, weights))

    forest = UnionFind(n)
    edges = []
    for k in order:
        i, j = int(first[k]), int(second[k])
        if forest.union(i, j):
            edges.append((i, j, float(weights[k])))
            if len(edges) == n - 1:
                break
    return SpanningTree(edges)


# Exact predicates ---------------------------------------------------------

def _orient_exact(a, b, c) -> Fraction:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _incircle_exact(a, b, c, d) -> Fraction:
    adx, ady = a[0] - d[0], a[1] - d[1]
    bdx, bdy = b[0] - d[0], b[1] - d[1]
    cdx, cdy = c[0] - d[0], c[1] - d[1]
    alift = adx * adx + ady * ady
    blift = bdx * bdx + bdy * bdy
    clift = cdx * cdx + cdy * cdy
    return (
        alift * (bdx * cdy - cdx * bdy)
        + blift * (cdx * ady - adx * cdy)
        + clift * (adx * bdy - bdx * ady)
    )


class _ExactPoints:
    """Rational copies of the working coordinates plus symbolic-perturbation ranks."""

    def __init__(self, coords: np.ndarray):
        self.coords = coords
        self._exact = {}

    def __getitem__(self, i: int) -> Tuple[Fraction, Fraction]:
        if i not in self._exact:
            self._exact[i] = (Fraction(self.coords[i, 0]), Fraction(self.coords[i, 1]))
        return self._exact[i]

    def orient(self, a: int, b: int, c: int) -> int:
        value = _orient_exact(self[a], self[b], self[c])
        return (value > 0) - (value < 0)

    def in_circle(self, a: int, b: int, c: int, d: int) -> bool:
        """Whether d lies inside the circumcircle of counter-clockwise (a, b, c).

        Exact cocircular cases are broken by perturbing each lifted
        coordinate by eps**index, the lowest index dominating.
        """
        value = _incircle_exact(self[a], self[b], self[c], self[d])
        if value != 0:
            return value > 0
        cofactors = {
            a: self.orient(b, c, d),
            b: -self.orient(a, c, d),
            c: self.orient(a, b, d),
            d: -self.orient(a, b, c),
        }
        for index in sorted(cofactors):
            if cofactors[index] != 0:
                return cofactors[index] > 0
        return False


def _incircle_filter(coords: np.ndarray, tris: np.ndarray, p: int):
    """Floating incircle over many triangles: returns (inside, certain) masks."""
    d = coords[p]
    a, b, c = (coords[tris[:, k]] - d for k in range(3))
    alift = a[:, 0] ** 2 + a[:, 1] ** 2
    blift = b[:, 0] ** 2 + b[:, 1] ** 2
    clift = c[:, 0] ** 2 + c[:, 1] ** 2
    bc = b[:, 0] * c[:, 1] - c[:, 0] * b[:, 1]
    ca = c[:, 0] * a[:, 1] - a[:, 0] * c[:, 1]
    ab = a[:, 0] * b[:, 1] - b[:, 0] * a[:, 1]
    det = alift * bc + blift * ca + clift * ab
    permanent = (
        (np.abs(b[:, 0] * c[:, 1]) + np.abs(c[:, 0] * b[:, 1])) * alift
        + (np.abs(c[:, 0] * a[:, 1]) + np.abs(a[:, 0] * c[:, 1])) * blift
        + (np.abs(a[:, 0] * b[:, 1]) + np.abs(b[:, 0] * a[:, 1])) * clift
    )
    certain = np.abs(det) > INCIRCLE_ERRBOUND * permanent
    return det > 0, certain


def _check_not_collinear(pts: np.ndarray) -> None:
    centered = pts - pts.mean(axis=0)
    extent = float(np.ptp(pts, axis=0).max())
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    spread = float(np.abs(centered @ vt[-1]).max())
    if spread <= COLLINEAR_TOLERANCE * max(1.0, extent):
        raise DegenerateCollinear(f"All {pts.shape[0]} points lie within {spread:.3g} of one line")


def delaunay(points) -> Triangulation:
    """Bowyer-Watson triangulation with exact, symbolically perturbed predicates."""
    pts = unique_points(points)
    n = pts.shape[0]
    if n < 3:
        raise TooFewPoints(n, 3)
    _check_not_collinear(pts)

    low, high = pts.min(axis=0), pts.max(axis=0)
    cx, cy = (low + high) / 2.0
    far = SUPER_SCALE * max(float((high - low).max()), 1.0)
    supers = np.array([
        [cx - 3.0 * far, cy - far],
        [cx + 3.0 * far, cy - far],
        [cx, cy + 2.0 * far],
    ])
    coords = np.vstack([pts, supers])
    exact = _ExactPoints(coords)
    tris = np.array([[n, n + 1, n + 2]], dtype=np.intp)

    for p in range(n):
        inside, certain = _incircle_filter(coords, tris, p)
        for k in np.flatnonzero(~certain):
            a, b, c = tris[k]
            inside[k] = exact.in_circle(int(a), int(b), int(c), p)

        bad = tris[inside]
        directed = set()
        for a, b, c in bad:
            directed.update(((a, b), (b, c), (c, a)))
        boundary = [(u, v) for u, v in directed if (v, u) not in directed]
        boundary.sort()

        fresh = np.array([[u, v, p] for u, v in boundary], dtype=np.intp).reshape(-1, 3)
        tris = np.vstack([tris[~inside], fresh])

    real = np.all(tris < n, axis=1)
    triangulation = Triangulation(pts, tris[real])
    keep = triangulation.areas() > MIN_TRIANGLE_AREA
    if not keep.all():
        logger.debug("Dropped %d sliver triangles", int((~keep).sum()))
    return Triangulation(pts, triangulation.triangles[keep])


def assemble_features(
    seg: SegmentationResult, img: GrayImage, convention: str = "ratio"
) -> FeatureVector:
    """The full 57-value vector; degenerate blocks are zero-filled and flag the vector invalid."""
    values = np.zeros(FEATURE_COUNT, dtype=np.float64)
    notes = []

    try:
        values[LOCAL_SLICE] = local_feature_block(seg, img, convention)
    except NoNuclei:
        logger.warning("%s: no nuclei, emitting zero vector", seg.source_id)
        return FeatureVector(values, False, ("no nuclei",))

    pts = unique_points([obj.centroid for obj in seg.objects])

    if pts.shape[0] >= 2:
        values[MST_SLICE] = aggregate(mst(pts).weights, convention)
    else:
        notes.append("mst needs 2 distinct centroids")

    try:
        tri = delaunay(pts)
        if tri.triangles.shape[0] == 0:
            raise DegenerateCollinear("No non-degenerate triangles")
        block = list(aggregate(tri.areas(), convention)) + list(aggregate(tri.perimeters(), convention))
        values[DELAUNAY_SLICE] = block
    except (TooFewPoints, DegenerateCollinear) as e:
        notes.append(f"delaunay: {e}")

    if notes:
        logger.warning("%s: degenerate feature blocks (%s)", seg.source_id, "; ".join(notes))
    if not np.all(np.isfinite(values)):
        raise NonFiniteFeature(f"{seg.source_id}: non-finite feature value")
    return FeatureVector(values, not notes, tuple(notes))


def tile_features(
    tile: Tile,
    seg_cfg: SegConfig = SegConfig(),
    scale: int = FEATURE_SCALE,
    convention: str = "ratio",
) -> Tuple[FeatureVector, SegmentationResult]:
    """Downscale, segment and featurize one tile.

    ``scale`` 0 keeps the native size. Area bounds follow the working side.
    A tile with a single gray level has no nuclei and yields the invalid
    zero vector.
    """
    if scale and tile.width != scale:
        tile = downscale(tile, scale)
    gray = to_gray(tile)
    try:
        seg = segment_nuclei(gray, seg_cfg.scaled_for(max(tile.width, tile.height)))
    except DegenerateImage:
        seg = SegmentationResult((), float("nan"), tile.id, gray.values.shape)
    return assemble_features(seg, gray, convention), seg
