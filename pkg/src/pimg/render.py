"""Image synthesis: pixel-to-layer resolution and texture evaluation.

A pixel belongs to the front-most layer whose boundary curve contains it
(nonzero winding against the flattened polyline), falling through to the
background.  Rendering is resolution-free: output pixel centers are mapped
into document coordinates before evaluation.
"""

from dataclasses import dataclass

import numpy as np

from . import diffmath, kernels, meshing, texture
from .boundary import BezierShape, flatten_shape
from .errors import UnfittedDocument, UnknownLayer
from .ingest import RasterImage

SHAPE_CHORD_PX = 0.25   # flattening tolerance for containment tests
SLIVER_PX = 1.0         # deformed-rim fallback distance


@dataclass
class LayerIndexMap:
    ids: np.ndarray  # (H, W) int32 layer ids

    def counts(self):
        uniq, cnt = np.unique(self.ids, return_counts=True)
        return dict(zip(uniq.tolist(), cnt.tolist()))


@dataclass
class InvertedTriangle:
    layer_id: int
    level: int
    tri_index: int


def point_in_shape(shape: BezierShape, pts, image_size=(512, 512)):
    """Winding-number containment against the flattened curve; points on the
    polyline count as inside.  ``pts`` are normalized document coords."""
    chord_tol = SHAPE_CHORD_PX / max(image_size)
    poly = flatten_shape(shape, chord_tol)
    single = np.ndim(pts) == 1
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    res = kernels.point_in_polygon(poly, pts)
    return bool(res[0]) if single else res


def resolve_layers(doc, pixels_px):
    """Owning layer id for each pixel-center coordinate (front to back)."""
    pixels_px = np.atleast_2d(np.asarray(pixels_px, dtype=np.float64))
    scale = np.array([doc.width, doc.height], dtype=np.float64)
    pts = pixels_px / scale
    owner = np.full(len(pts), doc.background.id, dtype=np.int64)
    free = np.ones(len(pts), dtype=bool)
    chord_tol = SHAPE_CHORD_PX / max(doc.width, doc.height)
    for lay in doc.foregrounds():
        if not free.any():
            break
        lo = lay.bbox[0].astype(np.float64) / scale
        hi = lay.bbox[1].astype(np.float64) / scale
        cand = np.nonzero(free
                          & (pts[:, 0] >= lo[0]) & (pts[:, 0] <= hi[0])
                          & (pts[:, 1] >= lo[1]) & (pts[:, 1] <= hi[1]))[0]
        if len(cand) == 0:
            continue
        poly = flatten_shape(lay.boundary, chord_tol)
        inside = kernels.point_in_polygon(poly, pts[cand])
        hit = cand[inside]
        owner[hit] = lay.id
        free[hit] = False
    return owner


def resolve_layer(doc, x_px):
    """Single-point convenience wrapper around resolve_layers."""
    return int(resolve_layers(doc, np.atleast_2d(x_px))[0])


def build_layer_index_map(doc) -> LayerIndexMap:
    centers = _pixel_centers(doc.width, doc.height, doc.width, doc.height)
    owner = resolve_layers(doc, centers)
    return LayerIndexMap(ids=owner.reshape(doc.height, doc.width).astype(np.int32))


def _pixel_centers(out_w, out_h, doc_w, doc_h):
    """Output pixel centers mapped into document pixel coordinates."""
    xs = (np.arange(out_w) + 0.5) * (doc_w / out_w)
    ys = (np.arange(out_h) + 0.5) * (doc_h / out_h)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _check_fitted(doc):
    if not doc.layers or doc.decoder is None:
        raise UnfittedDocument("document has no fitted layers")


def _layer_pred(doc, lay, sel, centers, params):
    """Layer colors at the selected pixels: baked features when present
    (so edited geometry carries its texture), live grid lookups otherwise."""
    if lay.baked:
        scale = np.array([doc.width, doc.height], dtype=np.float64)
        return _eval_baked(centers[sel], scale, lay.mesh,
                           lay.baked_local.astype(np.float64),
                           lay.global_nodes.astype(np.float64),
                           lay.baked_global.astype(np.float64),
                           doc.decoder, doc.config.k_freq)
    plan = diffmath.build_layer_plan(doc, lay, sel, centers)
    pred, _ = diffmath.plan_forward(plan, params, doc.config.k_freq)
    return pred


def render_image(doc, out_w=None, out_h=None) -> RasterImage:
    """Evaluate the full texture pipeline for every output pixel."""
    _check_fitted(doc)
    out_w = out_w or doc.width
    out_h = out_h or doc.height
    centers = _pixel_centers(out_w, out_h, doc.width, doc.height)
    owner = resolve_layers(doc, centers)
    params = diffmath.ParamSet.from_document(doc)
    out = np.zeros((len(centers), 3))
    for lay in doc.layers:
        sel = np.nonzero(owner == lay.id)[0]
        if len(sel) == 0:
            continue
        out[sel] = _layer_pred(doc, lay, sel, centers, params)
    return RasterImage(out.reshape(out_h, out_w, 3).astype(np.float32))


def render_layer(doc, layer_id, out_w=None, out_h=None):
    """One layer evaluated over its own domain (background: whole frame).

    Returns (RasterImage, coverage mask); uncovered pixels are black.
    """
    _check_fitted(doc)
    lay = doc.layer_by_id(layer_id)
    out_w = out_w or doc.width
    out_h = out_h or doc.height
    centers = _pixel_centers(out_w, out_h, doc.width, doc.height)
    if lay.role == "background":
        sel = np.arange(len(centers))
    else:
        scale = np.array([doc.width, doc.height], dtype=np.float64)
        inside = point_in_shape(lay.boundary, centers / scale,
                                (doc.width, doc.height))
        sel = np.nonzero(inside)[0]
    params = diffmath.ParamSet.from_document(doc)
    out = np.zeros((len(centers), 3))
    if len(sel):
        out[sel] = _layer_pred(doc, lay, sel, centers, params)
    mask = np.zeros(len(centers), dtype=bool)
    mask[sel] = True
    return (RasterImage(out.reshape(out_h, out_w, 3).astype(np.float32)),
            mask.reshape(out_h, out_w))


# --- deformed rendering ----------------------------------------------------

def _signed_areas(verts, tris):
    tv = verts[np.asarray(tris, np.int64)]
    return 0.5 * ((tv[:, 1, 0] - tv[:, 0, 0]) * (tv[:, 2, 1] - tv[:, 0, 1])
                  - (tv[:, 2, 0] - tv[:, 0, 0]) * (tv[:, 1, 1] - tv[:, 0, 1]))


def _patched_mesh(mesh: meshing.ProxyMesh, deformed):
    """Deformed copy where inverted triangles keep their rest-pose geometry.

    Vertices referenced by an inverted triangle are re-added with their
    original coordinates so neighbors keep the deformed ones.  Returns
    (mesh, feature index map, [InvertedTriangle-style (level, tri) pairs]).
    """
    orig = mesh.vertices.astype(np.float64)
    deformed = np.asarray(deformed, dtype=np.float64)
    verts = [deformed]
    feat_map = list(range(len(orig)))
    remap = {}
    new_levels = []
    inverted = []
    for li, tris in enumerate(mesh.triangles_by_level):
        tris = np.asarray(tris, np.int64)
        if len(tris) == 0:
            new_levels.append(tris.astype(np.int32))
            continue
        bad = np.nonzero((_signed_areas(orig, tris) > 0)
                         & (_signed_areas(deformed, tris) <= 0))[0]
        tris = tris.copy()
        for t in bad:
            inverted.append((li + 1, int(t)))
            for k in range(3):
                v = int(tris[t, k])
                if v not in remap:
                    remap[v] = len(feat_map)
                    feat_map.append(v)
                    verts.append(orig[v : v + 1])
                tris[t, k] = remap[v]
        new_levels.append(tris.astype(np.int32))
    patched = meshing.ProxyMesh(
        vertices=np.vstack(verts).astype(np.float32),
        triangles_by_level=new_levels,
        parents=[None] * len(new_levels))
    return patched, np.array(feat_map, dtype=np.int64), inverted


def _boundary_edges(tris):
    """Edges used by exactly one triangle (the mesh rim)."""
    seen = {}
    for t in np.asarray(tris, np.int64):
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            key = (min(a, b), max(a, b))
            seen[key] = seen.get(key, 0) + 1
    return np.array([e for e, c in seen.items() if c == 1], dtype=np.int64)


def _project_to_edges(pts, verts, edges):
    """Closest point on any rim edge: (distance, edge index, edge parameter)."""
    a = verts[edges[:, 0]]
    d = verts[edges[:, 1]] - a
    len2 = (d * d).sum(axis=1)
    best_d = np.full(len(pts), np.inf)
    best_e = np.zeros(len(pts), dtype=np.int64)
    best_t = np.zeros(len(pts))
    for e in range(len(edges)):
        t = ((pts - a[e]) @ d[e]) / max(len2[e], 1e-30)
        t = np.clip(t, 0.0, 1.0)
        proj = a[e] + t[:, None] * d[e]
        dist = np.linalg.norm(pts - proj, axis=1)
        better = dist < best_d
        best_d[better] = dist[better]
        best_e[better] = e
        best_t[better] = t[better]
    return best_d, best_e, best_t


def render_deformed(doc, deformed):
    """Render with per-layer deformed geometry and baked node features.

    ``deformed`` maps layer id -> (vertices, global nodes) or
    (vertices, global nodes, boundary control points), all in normalized
    document coordinates; vertex arrays must match the layer's mesh 1:1.
    With control points present, pixel ownership uses the deformed
    boundary curve (consistent with ``render_image``); otherwise the
    deformed mesh footprint plus a 1 px rim band decides ownership.
    Returns (RasterImage, [InvertedTriangle]) — inverted triangles are
    reported and rendered with their rest-pose geometry.
    """
    _check_fitted(doc)
    from .errors import ShapeMismatch
    scale = np.array([doc.width, doc.height], dtype=np.float64)
    centers = _pixel_centers(doc.width, doc.height, doc.width, doc.height)
    n_px = len(centers)
    owner = np.full(n_px, -1, dtype=np.int64)
    reports = []
    per_layer = {}

    for lay in doc.foregrounds():
        d_shape = None
        if lay.id not in deformed:
            d_verts = lay.mesh.vertices.astype(np.float64)
            d_nodes = lay.global_nodes.astype(np.float64) / scale
            d_shape = lay.boundary
        else:
            entry = deformed[lay.id]
            if len(entry) == 3:
                d_verts, d_nodes, d_ctrl = entry
                if d_ctrl is not None:
                    d_shape = BezierShape(np.asarray(d_ctrl, dtype=np.float32))
            else:
                d_verts, d_nodes = entry
            d_verts = np.asarray(d_verts, dtype=np.float64)
            d_nodes = np.asarray(d_nodes, dtype=np.float64)
        if d_verts.shape != lay.mesh.vertices.shape:
            raise ShapeMismatch(
                f"layer {lay.id}: deformed vertices must be 1:1 with the mesh")
        if not lay.baked:
            raise UnfittedDocument(f"layer {lay.id} has no baked features")
        patched, feat_map, inv = _patched_mesh(lay.mesh, d_verts)
        reports.extend(InvertedTriangle(lay.id, lv, t) for lv, t in inv)

        free = np.nonzero(owner < 0)[0]
        pts = centers[free] / scale
        if d_shape is not None:
            hit = point_in_shape(d_shape, pts, (doc.width, doc.height))
        else:
            tri_idx, _ = meshing.locate(patched, pts, 1)
            hit = tri_idx >= 0
            miss = ~hit
            if miss.any():
                # rim slivers: adopt pixels within SLIVER_PX of the rim
                edges = _boundary_edges(patched.triangles_by_level[0])
                dist, _, _ = _project_to_edges(
                    pts[miss] * scale,
                    patched.vertices.astype(np.float64) * scale, edges)
                near = dist <= SLIVER_PX
                hit[np.nonzero(miss)[0][near]] = True
        owner[free[hit]] = lay.id
        per_layer[lay.id] = (patched, feat_map, d_nodes)

    bg = doc.background
    owner[owner < 0] = bg.id

    out = np.zeros((n_px, 3))
    params = diffmath.ParamSet.from_document(doc)
    for lay in doc.layers:
        sel = np.nonzero(owner == lay.id)[0]
        if len(sel) == 0:
            continue
        if lay.role == "background" or lay.id not in per_layer:
            out[sel] = _layer_pred(doc, lay, sel, centers, params)
            continue
        patched, feat_map, d_nodes = per_layer[lay.id]
        vert_feats = lay.baked_local.astype(np.float64)[feat_map]
        out[sel] = _eval_baked(centers[sel], scale, patched, vert_feats,
                               d_nodes * scale,
                               lay.baked_global.astype(np.float64),
                               doc.decoder, doc.config.k_freq)
    img = RasterImage(out.reshape(doc.height, doc.width, 3).astype(np.float32))
    return img, reports


def _eval_baked(x_px, scale, mesh, vert_feats, nodes_px, node_feats,
                decoder, k_freq):
    """Texture evaluation from explicit (baked) node features."""
    pts = x_px / scale
    rows, cols, vals, covered = texture.local_feature_weights(mesh, pts)
    f_l = np.zeros((len(pts), vert_feats.shape[1]))
    np.add.at(f_l, rows, vals[:, None] * vert_feats[cols])
    if not covered.all():
        # sliver pixels: interpolate along the nearest rim edge
        miss = np.nonzero(~covered)[0]
        edges = _boundary_edges(mesh.triangles_by_level[0])
        verts_px = mesh.vertices.astype(np.float64) * scale
        _, e_idx, t = _project_to_edges(x_px[miss], verts_px, edges)
        fa = vert_feats[edges[e_idx, 0]]
        fb = vert_feats[edges[e_idx, 1]]
        f_l[miss] = fa + t[:, None] * (fb - fa)
    f_g = texture.idw_weights(x_px, nodes_px) @ node_feats
    enc = texture.encode(np.concatenate([f_g, f_l], axis=1), k_freq)
    return texture.decode(enc, decoder)
