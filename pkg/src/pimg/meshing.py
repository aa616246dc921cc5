"""Hierarchical proxy mesh construction and point location.

Level 1 is a conforming Delaunay triangulation of the flattened boundary
polygon (boundary edges enforced by midpoint insertion), refined so no edge
exceeds 1.5x the target spacing.  Levels 2..h are gradient-driven 1->4
subdivisions with shared edge midpoints.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import Delaunay

from . import kernels
from .boundary import BezierShape, flatten_shape
from .errors import DegenerateBoundary, SelfIntersectingBoundary

_STEINER_SEED = 1234  # jitter must be reproducible across runs


@dataclass
class BucketGrid:
    start: np.ndarray
    items: np.ndarray
    nx: int
    ny: int
    x0: float
    y0: float
    bw: float
    bh: float


@dataclass
class ProxyMesh:
    vertices: np.ndarray                 # (n, 2) float32 normalized coords
    triangles_by_level: list             # [(k_l, 3) int32], l = 1..h
    parents: list                        # aligned; parents[0] is None
    edge_midpoint_cache: dict = field(default_factory=dict)
    _grids: list = field(default_factory=list, repr=False)

    @property
    def levels(self) -> int:
        return len(self.triangles_by_level)

    def grid_for_level(self, level: int) -> BucketGrid:
        while len(self._grids) < self.levels:
            self._grids.append(None)
        if self._grids[level - 1] is None:
            self._grids[level - 1] = build_bucket_grid(
                self.vertices.astype(np.float64),
                self.triangles_by_level[level - 1])
        return self._grids[level - 1]

    def invalidate_grids(self):
        self._grids = []


def polygon_area(poly):
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def _self_intersects(poly):
    """O(n^2) proper-crossing test between non-adjacent polygon edges."""
    n = len(poly)
    a = poly
    b = np.roll(poly, -1, axis=0)
    for i in range(n):
        p, r = a[i], b[i] - a[i]
        js = np.arange(i + 2, n if i > 0 else n - 1)
        if len(js) == 0:
            continue
        q = a[js]
        s = b[js] - q
        rxs = r[0] * s[:, 1] - r[1] * s[:, 0]
        qp = q - p
        t = (qp[:, 0] * s[:, 1] - qp[:, 1] * s[:, 0])
        u = (qp[:, 0] * r[1] - qp[:, 1] * r[0])
        with np.errstate(divide="ignore", invalid="ignore"):
            t = t / rxs
            u = u / rxs
        hit = (rxs != 0) & (t > 1e-12) & (t < 1 - 1e-12) & (u > 1e-12) & (u < 1 - 1e-12)
        if hit.any():
            return True
    return False


def build_bucket_grid(verts, tris) -> BucketGrid:
    tris = np.asarray(tris, dtype=np.int64)
    n_t = len(tris)
    tv = verts[tris]  # (t, 3, 2)
    tmin = tv.min(axis=1)
    tmax = tv.max(axis=1)
    x0, y0 = verts.min(axis=0)
    x1, y1 = verts.max(axis=0)
    side = max(1, int(np.sqrt(max(n_t, 1))))
    nx = ny = side
    bw = max((x1 - x0) / nx, 1e-12)
    bh = max((y1 - y0) / ny, 1e-12)
    buckets = [[] for _ in range(nx * ny)]
    for t in range(n_t):
        cx0 = min(max(int((tmin[t, 0] - x0) / bw), 0), nx - 1)
        cx1 = min(max(int((tmax[t, 0] - x0) / bw), 0), nx - 1)
        cy0 = min(max(int((tmin[t, 1] - y0) / bh), 0), ny - 1)
        cy1 = min(max(int((tmax[t, 1] - y0) / bh), 0), ny - 1)
        for cy in range(cy0, cy1 + 1):
            for cx in range(cx0, cx1 + 1):
                buckets[cy * nx + cx].append(t)
    start = np.zeros(nx * ny + 1, dtype=np.int64)
    for b, lst in enumerate(buckets):
        start[b + 1] = start[b] + len(lst)
    items = np.array([t for lst in buckets for t in lst] or [], dtype=np.int64)
    return BucketGrid(start, items, nx, ny, float(x0), float(y0), bw, bh)


def _ccw(verts, tris):
    tv = verts[tris]
    cross = ((tv[:, 1, 0] - tv[:, 0, 0]) * (tv[:, 2, 1] - tv[:, 0, 1])
             - (tv[:, 2, 0] - tv[:, 0, 0]) * (tv[:, 1, 1] - tv[:, 0, 1]))
    flip = cross < 0
    tris = tris.copy()
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return tris


def _delaunay_inside(points, poly):
    """Delaunay of the point set, keeping triangles whose centroid is inside
    the polygon; returns CCW (k, 3) int32, sorted for determinism."""
    dela = Delaunay(points)
    tris = dela.simplices.astype(np.int64)
    cent = points[tris].mean(axis=1)
    keep = kernels.point_in_polygon(poly, cent)
    tris = tris[keep]
    tris = _ccw(points, tris)
    order = np.lexsort((tris[:, 2], tris[:, 1], tris[:, 0]))
    return tris[order]


def shape_is_simple(shape: BezierShape, image_size=(512, 512)) -> bool:
    """True when the flattened boundary has no self-crossings, at the same
    chord tolerance triangulation will use."""
    w, h = image_size
    poly = flatten_shape(shape, 0.5 / max(w, h))
    return not _self_intersects(poly)


def triangulate_layer(shape: BezierShape, l_r: float,
                      image_size=(512, 512)) -> tuple[np.ndarray, np.ndarray]:
    """Level-1 mesh {V, T} for a closed boundary; 0 < l_r <= 1."""
    w, h = image_size
    chord_tol = 0.5 / max(w, h)
    poly = flatten_shape(shape, chord_tol)
    if _self_intersects(poly):
        raise SelfIntersectingBoundary("flattened boundary crosses itself")
    area = polygon_area(poly)
    if abs(area) * w * h < 4.0:
        raise DegenerateBoundary("boundary encloses < 4 px^2")
    if area < 0:
        poly = poly[::-1].copy()

    extent = max(np.ptp(poly[:, 0]), np.ptp(poly[:, 1]))
    spacing = l_r * extent

    rng = np.random.default_rng(_STEINER_SEED)
    x0, y0 = poly.min(axis=0)
    x1, y1 = poly.max(axis=0)
    gx = np.arange(x0 + spacing, x1 - 0.25 * spacing, spacing)
    gy = np.arange(y0 + spacing, y1 - 0.25 * spacing, spacing)
    steiner = np.empty((0, 2))
    if len(gx) and len(gy):
        grid = np.stack(np.meshgrid(gx, gy), axis=-1).reshape(-1, 2)
        grid = grid + rng.uniform(-0.15, 0.15, grid.shape) * spacing
        inside = kernels.point_in_polygon(poly, grid)
        _, d2 = kernels.nearest_neighbor(grid, poly)
        steiner = grid[inside & (d2 > (0.35 * spacing) ** 2)]

    for _ in range(12):
        n_poly = len(poly)
        points = _dedup(np.vstack([poly, steiner]), n_poly)
        steiner = points[n_poly:]
        tris = _delaunay_inside(points, poly)

        # every boundary edge must appear; split missing ones at midpoint
        edge_set = set()
        for t in tris:
            for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
                edge_set.add((min(a, b), max(a, b)))
        missing = {i for i in range(n_poly)
                   if (min(i, (i + 1) % n_poly),
                       max(i, (i + 1) % n_poly)) not in edge_set}
        long_mid = _long_edge_midpoints(points, tris, 1.5 * spacing, n_poly)
        if not missing and len(long_mid) == 0:
            break
        if missing:
            newpoly = []
            for i in range(n_poly):
                newpoly.append(poly[i])
                if i in missing:
                    newpoly.append(0.5 * (poly[i] + poly[(i + 1) % n_poly]))
            poly = np.array(newpoly)
        if len(long_mid):
            steiner = np.vstack([steiner, long_mid]) if len(steiner) else long_mid

    n_poly = len(poly)
    points = _dedup(np.vstack([poly, steiner]), n_poly)
    tris = _delaunay_inside(points, poly)
    return points, tris.astype(np.int32)


def _long_edge_midpoints(points, tris, max_len, n_poly):
    """Midpoints of over-long interior edges (boundary chain excluded)."""
    edges = set()
    for t in tris:
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            lo, hi = min(a, b), max(a, b)
            if hi < n_poly and (hi - lo == 1 or (lo == 0 and hi == n_poly - 1)):
                continue
            edges.add((lo, hi))
    if not edges:
        return np.empty((0, 2))
    e = np.array(sorted(edges))
    d = np.linalg.norm(points[e[:, 0]] - points[e[:, 1]], axis=1)
    sel = e[d > max_len]
    return 0.5 * (points[sel[:, 0]] + points[sel[:, 1]])


def _dedup(points, n_keep, tol=1e-9):
    """Drop points (beyond the first n_keep) closer than tol to an earlier one."""
    if len(points) <= n_keep:
        return points
    keep = list(range(n_keep))
    for i in range(n_keep, len(points)):
        d = np.linalg.norm(points[keep] - points[i], axis=1)
        if d.min() > tol:
            keep.append(i)
    return points[keep]


def gradient_map(image) -> np.ndarray:
    """Sobel gradient magnitude of the luminance, replicate-padded."""
    data = image.data if hasattr(image, "data") else np.asarray(image)
    lum = (0.299 * data[..., 0] + 0.587 * data[..., 1]
           + 0.114 * data[..., 2]).astype(np.float64)
    gx = ndimage.sobel(lum, axis=1, mode="nearest")
    gy = ndimage.sobel(lum, axis=0, mode="nearest")
    return np.sqrt(gx * gx + gy * gy)


def _pixel_centers_norm(w, h):
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def refine(verts, tris, grad, threshold, midpoint_cache,
           image_size) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One 1->4 refinement pass.

    Returns (new vertex array, child triangles (k,3) int32, parent indices).
    A triangle is refined when it covers >= 2 pixel centers and their mean
    gradient exceeds the threshold.  Midpoints are shared via the cache.
    """
    w, h = image_size
    centers = _pixel_centers_norm(w, h)
    bg = build_bucket_grid(verts.astype(np.float64), tris)
    tri_of_px, _ = kernels.locate_in_triangles(
        verts.astype(np.float64), np.asarray(tris, np.int64), centers,
        bg.start, bg.items, bg.nx, bg.ny, bg.x0, bg.y0, bg.bw, bg.bh)
    covered = tri_of_px >= 0
    counts = np.bincount(tri_of_px[covered], minlength=len(tris))
    sums = np.bincount(tri_of_px[covered], weights=grad.ravel()[covered],
                       minlength=len(tris))
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_grad = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    eligible = (counts >= 2) & (mean_grad > threshold)

    verts = list(map(tuple, verts))
    child_arr, parents = _subdivide(verts, tris, eligible, midpoint_cache)
    new_verts = np.array(verts)
    return new_verts, _ccw(new_verts, child_arr), parents


def _subdivide(verts, tris, eligible, midpoint_cache):
    """Split each eligible triangle 1->4, appending shared midpoints to the
    ``verts`` list in iteration order.  Returns (children (k,3) int32,
    parent indices (k,) int32)."""
    children = []
    parents = []

    def midpoint(a, b):
        key = (min(a, b), max(a, b))
        if key not in midpoint_cache:
            p = (0.5 * (verts[a][0] + verts[b][0]),
                 0.5 * (verts[a][1] + verts[b][1]))
            verts.append(p)
            midpoint_cache[key] = len(verts) - 1
        return midpoint_cache[key]

    for t in np.nonzero(eligible)[0]:
        a, b, c = (int(v) for v in tris[t])
        ab = midpoint(a, b)
        bc = midpoint(b, c)
        ca = midpoint(c, a)
        children.extend([(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)])
        parents.extend([t, t, t, t])
    return (np.array(children, dtype=np.int32).reshape(-1, 3),
            np.array(parents, dtype=np.int32))


def rebuild_from_flags(l1_verts, l1_tris, flags_by_level) -> ProxyMesh:
    """Reconstruct a refinement hierarchy from its level-1 mesh plus one
    boolean refine-mask per subsequent level.

    Fine-level vertices are the exact shared edge midpoints, appended in the
    same deterministic order as the original refinement, so the result is a
    pure function of the level-1 geometry and the masks.
    """
    verts = list(map(tuple, np.asarray(l1_verts, dtype=np.float64)))
    levels = [np.asarray(l1_tris, dtype=np.int32)]
    parents = [None]
    cache = {}
    for flags in flags_by_level:
        eligible = np.asarray(flags, dtype=bool)
        children, par = _subdivide(verts, levels[-1], eligible, cache)
        children = _ccw(np.array(verts), children)
        levels.append(children)
        parents.append(par)
    return ProxyMesh(vertices=np.array(verts).astype(np.float32),
                     triangles_by_level=levels, parents=parents,
                     edge_midpoint_cache=cache)


def build_hierarchy(shape: BezierShape, image, l_r: float, h: int) -> ProxyMesh:
    """Full mesh: level 1 from triangulation, levels 2..h from refinement
    against a threshold frozen at the image's mean gradient magnitude."""
    if h < 1:
        raise ValueError("hierarchy depth must be >= 1")
    w = image.width
    hh = image.height
    verts, tris = triangulate_layer(shape, l_r, (w, hh))
    grad = gradient_map(image)
    threshold = float(grad.mean())
    levels = [tris]
    parents = [None]
    cache = {}
    for _ in range(2, h + 1):
        verts, children, par = refine(verts, levels[-1], grad, threshold,
                                      cache, (w, hh))
        levels.append(children)
        parents.append(par)
    return ProxyMesh(vertices=verts.astype(np.float32),
                     triangles_by_level=levels, parents=parents,
                     edge_midpoint_cache=cache)


def refine_flags(mesh: ProxyMesh):
    """(per-level refine masks, level-1 vertex count), or None when the
    hierarchy is not an exact 1->4 midpoint refinement of its level-1 mesh
    (e.g. after vertex edits moved midpoints off their edges)."""
    if mesh.levels == 1:
        flags = []
    else:
        if any(mesh.parents[li] is None for li in range(1, mesh.levels)):
            return None
        flags = []
        for li in range(1, mesh.levels):
            prev = mesh.triangles_by_level[li - 1]
            par = np.asarray(mesh.parents[li])
            if len(par) != len(mesh.triangles_by_level[li]):
                return None
            f = np.zeros(len(prev), dtype=bool)
            f[np.unique(par)] = True
            if 4 * int(f.sum()) != len(par):
                return None
            flags.append(f)
    l1 = mesh.triangles_by_level[0]
    n_l1 = int(np.max(l1)) + 1 if len(l1) else 0
    rebuilt = rebuild_from_flags(
        mesh.vertices[:n_l1].astype(np.float64), l1, flags)
    if len(rebuilt.vertices) != len(mesh.vertices):
        return None
    for a, b in zip(rebuilt.triangles_by_level, mesh.triangles_by_level):
        if not np.array_equal(np.asarray(a), np.asarray(b)):
            return None
    for li in range(1, mesh.levels):
        if not np.array_equal(np.asarray(rebuilt.parents[li]),
                              np.asarray(mesh.parents[li])):
            return None
    if not np.allclose(rebuilt.vertices, mesh.vertices, atol=1e-6):
        return None
    return flags, n_l1


def locate(mesh: ProxyMesh, pts, level: int):
    """Vectorized point location at one hierarchy level.

    Returns (tri_idx int64[n] with -1 for not covered, bary float64[n, 3]).
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    g = mesh.grid_for_level(level)
    return kernels.locate_in_triangles(
        mesh.vertices.astype(np.float64),
        np.asarray(mesh.triangles_by_level[level - 1], np.int64),
        pts, g.start, g.items, g.nx, g.ny, g.x0, g.y0, g.bw, g.bh)


def mean_value_coordinates(pts, poly):
    """Mean-value coordinates of points w.r.t. a closed polygon.

    Returns (n, k) weights summing to 1 per row.  Points on a polygon vertex
    or edge get exact interpolating weights.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    poly = np.asarray(poly, dtype=np.float64)
    n, k = len(pts), len(poly)
    W = np.zeros((n, k))
    d = pts[:, None, :] - poly[None, :, :]          # (n, k, 2)
    r = np.linalg.norm(d, axis=2)                   # (n, k)
    on_vertex = r < 1e-12
    nxt = np.roll(np.arange(k), -1)
    # tan(alpha_i / 2) via cross/dot of consecutive spokes
    cross = d[:, :, 0] * d[:, nxt, 1] - d[:, :, 1] * d[:, nxt, 0]
    dot = (d * d[:, nxt, :]).sum(axis=2)
    denom = r * r[:, nxt] + dot
    with np.errstate(divide="ignore", invalid="ignore"):
        tan_half = cross / denom
        w = (np.concatenate([tan_half[:, -1:], tan_half[:, :-1]], axis=1)
             + tan_half) / np.where(r > 0, r, 1.0)
    on_edge = (np.abs(denom) < 1e-12) & ~on_vertex[:, np.arange(k)] \
        & ~on_vertex[:, nxt]
    w = np.where(np.isfinite(w), w, 0.0)
    for i in range(n):
        if on_vertex[i].any():
            W[i] = 0.0
            W[i, np.argmax(on_vertex[i])] = 1.0
        elif on_edge[i].any():
            j = int(np.argmax(on_edge[i]))
            jn = nxt[j]
            t = r[i, j] / (r[i, j] + r[i, jn])
            W[i] = 0.0
            W[i, j] = 1.0 - t
            W[i, jn] = t
        else:
            W[i] = w[i] / w[i].sum()
    return W
