"""End-to-end fitting: geometry construction, then joint texture optimization.

The geometry (curves, meshes, grids) is built once and frozen; the texture
parameters (grid codes + shared decoder) are optimized for cfg.epochs epochs
of full-image passes under reconstruction + total-variation losses.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import boundary, diffmath, ingest, meshing, render, texture
from .codec import grid_lattice_snap, lattice_snap
from .document import (ROLE_BACKGROUND, ROLE_FOREGROUND, FitConfig, Layer,
                       ProxyDocument, bbox_from_geometry)
from .errors import DimensionMismatch, NonFiniteLoss
from .ingest import LayerMask, RasterImage
from .texture import DecoderWeights, FeatureGrid

TV_EPS = 1e-8
TV_FULL_RES_LIMIT = 256  # above this, the TV pass renders at half resolution
# decoder-only epochs after the end-of-fit feature-lattice snap
GRID_SNAP_FINETUNE_EPOCHS = 150


@dataclass
class LossBreakdown:
    epoch: int
    l_recons: float
    l_tv: float
    l_tv_edge: float
    lr_decoder: float
    lr_features: float


def recons_loss(pred, target):
    """Mean squared error over all pixels and channels, with gradient."""
    p = np.asarray(pred.data if hasattr(pred, "data") else pred, np.float64)
    t = np.asarray(target.data if hasattr(target, "data") else target,
                   np.float64)
    if p.shape != t.shape:
        raise DimensionMismatch(f"prediction {p.shape} vs target {t.shape}")
    resid = p - t
    n = resid.size
    return float((resid ** 2).sum()) / n, 2.0 * resid / n


def hole_edge_mask(mask: LayerMask, radius: int) -> LayerMask:
    """Band straddling the mask boundary: dilation XOR erosion with a square
    structuring element of side 2*radius+1."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    bits = mask.bits if hasattr(mask, "bits") else np.asarray(mask, bool)
    if not bits.any():
        return LayerMask(np.zeros_like(bits))
    elem = np.ones((2 * radius + 1, 2 * radius + 1), bool)
    dil = ndimage.binary_dilation(bits, structure=elem)
    ero = ndimage.binary_erosion(bits, structure=elem)
    return LayerMask(dil ^ ero)


def tv_loss(img, region=None):
    """Total variation with per-pixel sqrt coupling of the two forward
    differences; out-of-range neighbors are omitted (no wrap, no pad).
    When ``region`` is given the sum runs over pixels where it is true.
    Returns (value, gradient image)."""
    x = np.asarray(img.data if hasattr(img, "data") else img, np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    h, w, c = x.shape
    dx = np.zeros_like(x)
    dy = np.zeros_like(x)
    dx[:, : w - 1] = x[:, 1:] - x[:, : w - 1]
    dy[: h - 1, :] = x[1:] - x[: h - 1]
    t = np.sqrt(dx * dx + dy * dy + TV_EPS)
    sel = np.ones((h, w), dtype=bool)
    if region is not None:
        sel = np.asarray(region.bits if hasattr(region, "bits") else region,
                         bool)
    value = float(t[sel].sum())
    g = np.zeros_like(x)
    inv = np.where(sel[:, :, None], 1.0 / t, 0.0)
    gx = dx * inv
    gy = dy * inv
    g -= gx + gy
    g[:, 1:] += gx[:, : w - 1]
    g[1:, :] += gy[: h - 1, :]
    return value, g.reshape(np.shape(img.data if hasattr(img, "data") else img))


def _rect_shape(margin=0.0):
    """Closed 4-segment curve tracing the unit square exactly (control
    points at the thirds of each edge make every segment a straight line)."""
    corners = np.array([[margin, margin], [1 - margin, margin],
                        [1 - margin, 1 - margin], [margin, 1 - margin]])
    pts = []
    for i in range(4):
        a, b = corners[i], corners[(i + 1) % 4]
        pts.extend([a, a + (b - a) / 3, a + 2 * (b - a) / 3])
    return boundary.BezierShape(np.array(pts, dtype=np.float32))


def _segment_midpoints(shape, w, h):
    """Global node positions: the t=0.5 point of every segment, in pixels."""
    t = 0.5
    pts = np.array([boundary.eval_segment(shape.segment_controls(j), t)
                    for j in range(shape.m)])
    return pts * np.array([w, h], dtype=np.float64)


def _snap_vertices(verts_n, tris, bbox, scale):
    """Greedy per-vertex snap onto the 8-bit coordinate lattice of the bbox.

    Snapping every vertex at once is impossible: conforming triangulations
    of dense boundary chains contain sliver triangles far smaller than one
    lattice step, which would collapse or flip.  Visiting vertices in index
    order and keeping a snap only when every incident triangle preserves
    its orientation and a nonzero area leaves the slivers untouched (their
    later quantization error stays sub-pixel) while the bulk of the mesh
    becomes exactly representable by the coordinate codec.
    """
    from collections import defaultdict
    v = np.asarray(verts_n, np.float64).copy()
    tris = np.asarray(tris, np.int64)
    incident = defaultdict(list)
    for t_i, t in enumerate(tris):
        for k in t:
            incident[int(k)].append(t_i)

    def cross(t, vv):
        a, b, c = vv[t[0]], vv[t[1]], vv[t[2]]
        return (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])

    orig_sign = np.sign([cross(t, v) for t in tris])
    for i in range(len(v)):
        trial = lattice_snap(v[i:i + 1] * scale, bbox)[0] / scale
        old = v[i].copy()
        v[i] = trial
        for t_i in incident[i]:
            c = cross(tris[t_i], v)
            if abs(c) <= 1e-12 or np.sign(c) != orig_sign[t_i]:
                v[i] = old
                break
    return v


def build_geometry(image: RasterImage, masks, depth=None, cfg=None):
    """Curves, meshes, grids and document skeleton; no texture fitting yet."""
    cfg = cfg or FitConfig()
    cfg.validate()
    w, h = image.width, image.height
    plan = ingest.order_layers(masks, depth)
    rng = np.random.default_rng(cfg.seed)
    scale = np.array([w, h], dtype=np.float64)

    layers = []
    fg_polys = []
    for lid, entry in enumerate(plan):
        if entry.is_background:
            shape = _rect_shape()
            mesh = meshing.build_hierarchy(shape, image, cfg.lr_b, cfg.h_b)
            bbox = np.array([[0, 0], [w, h]], dtype=np.float32)
        else:
            contour = ingest.extract_boundary_points(entry.mask) / scale
            shape, _ = boundary.fit_shape(
                contour, cfg,
                validate=lambda s: meshing.shape_is_simple(s, (w, h)))
            mesh = meshing.build_hierarchy(shape, image, cfg.lr_f, cfg.h_f)
            bbox = bbox_from_geometry(shape, mesh, w, h)
            fg_polys.append(boundary.flatten_shape(shape, 0.25 / max(w, h)))
        nodes = _segment_midpoints(shape, w, h)

        # Snap the stored geometry (level-1 vertices, global nodes) onto
        # the 8-bit coordinate lattice of the layer bbox before fitting:
        # the texture is then learned against already-quantized positions,
        # making the default compression round trip lossless for geometry.
        # Finer mesh levels are exact midpoints and are derived, not stored.
        bbox64 = bbox.astype(np.float64)
        res = meshing.refine_flags(mesh)
        if res is not None:
            flags, n_l1 = res
            v_sn = _snap_vertices(mesh.vertices[:n_l1],
                                  mesh.triangles_by_level[0], bbox64, scale)
            mesh = meshing.rebuild_from_flags(
                v_sn, mesh.triangles_by_level[0], flags)
        nodes = lattice_snap(nodes, bbox64)

        if entry.is_background:
            # Gap analysis uses the coarse (level-1) proxy nodes and the
            # largest hole: finer levels only exist where refinement
            # triggered, and the widest occlusion is what limits how far a
            # code must couple visible texture across a hole.
            from . import kernels
            n_l1 = int(np.max(mesh.triangles_by_level[0])) + 1
            verts_px = mesh.vertices[:n_l1].astype(np.float64) * scale
            covered = np.zeros(len(verts_px), dtype=bool)
            largest = np.zeros(len(verts_px), dtype=bool)
            best_area = -1.0
            for poly in fg_polys:
                inside = kernels.point_in_polygon(poly * scale, verts_px)
                covered |= inside
                px = poly * scale
                area = 0.5 * abs(float(
                    np.sum(px[:, 0] * np.roll(px[:, 1], -1)
                           - np.roll(px[:, 0], -1) * px[:, 1])))
                if area > best_area:
                    best_area, largest = area, inside
            wg, hg = texture.bg_grid_size(verts_px[largest & covered],
                                          verts_px[~covered], w, h)
        else:
            wg, hg = texture.fg_grid_size(bbox, cfg.o_fg)
        codes = rng.normal(0.0, cfg.grid_init_sigma,
                           (hg, wg, cfg.feature_dim)).astype(np.float32)
        layers.append(Layer(
            id=lid,
            role=ROLE_BACKGROUND if entry.is_background else ROLE_FOREGROUND,
            mean_depth=entry.mean_depth, boundary=shape, mesh=mesh,
            grid=FeatureGrid(codes), bbox=bbox, global_nodes=nodes))

    decoder = DecoderWeights.create(cfg.feature_dim, cfg.k_freq, rng=rng)
    return ProxyDocument(width=w, height=h, layers=layers, decoder=decoder,
                         config=cfg)


def bake_features(doc):
    """Snapshot node features from the grids so geometry edits carry texture."""
    scale = np.array([doc.width, doc.height], dtype=np.float64)
    for lay in doc.layers:
        u_nodes = texture.normalize_coord(lay.global_nodes.astype(np.float64),
                                          lay.bbox)
        u_verts = texture.normalize_coord(
            lay.mesh.vertices.astype(np.float64) * scale, lay.bbox)
        lay.baked_global = texture.grid_lookup(lay.grid, u_nodes).astype(
            np.float32)
        lay.baked_local = texture.grid_lookup(lay.grid, u_verts).astype(
            np.float32)
        lay.baked = True


def fit(image: RasterImage, masks, depth=None, cfg=None, progress=None):
    """Full pipeline: geometry, then joint grid+decoder optimization.

    Returns (ProxyDocument with baked features, [LossBreakdown]).
    """
    cfg = cfg or FitConfig()
    doc = build_geometry(image, masks, depth, cfg)
    w, h = doc.width, doc.height
    target = np.asarray(image.data, dtype=np.float64).reshape(-1, 3)
    centers = render._pixel_centers(w, h, w, h)
    owner = render.resolve_layers(doc, centers)

    # float32 throughout the training loop: the arrays are large and the
    # loop is memory-bound; the float64 path stays available for gradient
    # verification via ParamSet's dtype argument
    params = diffmath.ParamSet.from_document(doc, dtype=np.float32)
    bg = doc.background
    plans = []
    for lay in doc.foregrounds():
        sel = np.nonzero(owner == lay.id)[0]
        if len(sel):
            plans.append(diffmath.build_layer_plan(doc, lay, sel, centers))

    # the background TV pass renders the whole frame; at full resolution its
    # predictions double as the reconstruction values for bg-owned pixels
    stride = 1 if max(w, h) <= TV_FULL_RES_LIMIT else 2
    bg_owned = np.nonzero(owner == bg.id)[0]
    if stride == 1:
        bg_tv_plan = diffmath.build_layer_plan(doc, bg, np.arange(len(centers)),
                                               centers)
        bg_recons_plan = None
        tv_shape = (h, w, 3)
        tv_masks = [hole_edge_mask(m, cfg.tv_radius).bits for m in masks]
    else:
        tv_centers = render._pixel_centers(w // 2, h // 2, w, h)
        bg_tv_plan = diffmath.build_layer_plan(
            doc, bg, np.arange(len(tv_centers)), tv_centers)
        bg_recons_plan = (diffmath.build_layer_plan(doc, bg, bg_owned, centers)
                          if len(bg_owned) else None)
        tv_shape = (h // 2, w // 2, 3)
        tv_masks = [hole_edge_mask(m, cfg.tv_radius).bits[::2, ::2]
                    for m in masks]

    grads = diffmath.GradBuffer.zeros_like(params)
    n_total = target.size
    tv_norm = float(np.prod(tv_shape))
    history = []
    for epoch in range(1, cfg.epochs + 1):
        grads.zero()
        l_recons = 0.0

        for plan in plans:
            pred, caches = diffmath.plan_forward(plan, params, cfg.k_freq)
            resid = pred - target[plan.pix_idx]
            l_recons += float((resid ** 2).sum()) / n_total
            diffmath.plan_backward(plan, params, cfg.k_freq, caches,
                                   2.0 * resid / n_total, grads)

        pred_bg, caches_bg = diffmath.plan_forward(bg_tv_plan, params,
                                                   cfg.k_freq)
        i_b = pred_bg.reshape(tv_shape)
        l_tv, d_tv = tv_loss(i_b)
        l_edge = 0.0
        for em in tv_masks:
            v, g = tv_loss(i_b, region=em)
            l_edge += v
            d_tv = d_tv + cfg.beta * g
        l_tv_total = l_tv + cfg.beta * l_edge
        # the reconstruction term is a mean while tv_loss returns a sum;
        # normalizing the TV contribution by its element count keeps the
        # two terms in the same per-pixel balance at every resolution
        tv_weight = cfg.gamma / tv_norm
        d_full = tv_weight * d_tv.reshape(-1, 3)

        if stride == 1:
            resid = pred_bg[bg_owned] - target[bg_owned]
            l_recons += float((resid ** 2).sum()) / n_total
            d_full[bg_owned] += 2.0 * resid / n_total
            diffmath.plan_backward(bg_tv_plan, params, cfg.k_freq, caches_bg,
                                   d_full, grads)
        else:
            diffmath.plan_backward(bg_tv_plan, params, cfg.k_freq, caches_bg,
                                   d_full, grads)
            if bg_recons_plan is not None:
                pred, caches = diffmath.plan_forward(bg_recons_plan, params,
                                                     cfg.k_freq)
                resid = pred - target[bg_owned]
                l_recons += float((resid ** 2).sum()) / n_total
                diffmath.plan_backward(bg_recons_plan, params, cfg.k_freq,
                                       caches, 2.0 * resid / n_total, grads)

        loss = l_recons + tv_weight * l_tv_total
        if not np.isfinite(loss):
            raise NonFiniteLoss(
                f"epoch {epoch}: recons={l_recons} tv={l_tv_total}")
        diffmath.adam_step(params, grads, epoch, cfg.lr_decay,
                           cfg.lr_decay_every)
        history.append(LossBreakdown(
            epoch=epoch, l_recons=l_recons, l_tv=l_tv_total, l_tv_edge=l_edge,
            lr_decoder=diffmath.effective_lr(cfg.lr_decoder, epoch,
                                             cfg.lr_decay, cfg.lr_decay_every),
            lr_features=diffmath.effective_lr(cfg.lr_features, epoch,
                                              cfg.lr_decay,
                                              cfg.lr_decay_every)))
        if progress is not None:
            progress(history[-1])

    params.write_back(doc)
    # quantization-aware texture finish: round the grid codes onto their own
    # 8-bit per-channel lattice (the exact lattice the codec will use) and
    # give the decoder a short frozen-feature adaptation to the image, so
    # the later feature quantization is exact -- the texture-side analogue
    # of the coordinate lattice snap in build_geometry
    for lay in doc.layers:
        lay.grid = FeatureGrid(grid_lattice_snap(lay.grid.codes))
    finetune_decoder(doc, target.astype(np.float32),
                     min(cfg.epochs, GRID_SNAP_FINETUNE_EPOCHS))
    bake_features(doc)
    return doc, history


def _texture_plans(doc):
    """Per-layer plans covering every pixel at fit resolution."""
    w, h = doc.width, doc.height
    centers = render._pixel_centers(w, h, w, h)
    owner = render.resolve_layers(doc, centers)
    plans = []
    for lay in doc.layers:
        sel = np.nonzero(owner == lay.id)[0]
        if len(sel):
            plans.append(diffmath.build_layer_plan(doc, lay, sel, centers))
    return plans


def plan_predictions(doc) -> np.ndarray:
    """The document's own full-frame prediction as a flat (W*H, 3) float32
    array, evaluated through the optimization pipeline (so it is bitwise
    comparable with training-time predictions)."""
    params = diffmath.ParamSet.from_document(doc, dtype=np.float32)
    out = np.zeros((doc.width * doc.height, 3), dtype=np.float32)
    for plan in _texture_plans(doc):
        pred, _ = diffmath.plan_forward(plan, params, doc.config.k_freq)
        out[plan.pix_idx] = pred
    return out


def finetune_decoder(doc, target_flat: np.ndarray, epochs: int,
                     lr: float | None = None):
    """Adapt the decoder (grids frozen) so the document reproduces a flat
    (W*H, 3) target prediction.

    Used after lossy geometry/feature rounding: the rounded grids and node
    positions are kept fixed and only the shared decoder is optimized, full
    resolution, reconstruction loss only.  A document whose own
    plan_predictions already equal the target sees exactly zero gradients
    and is left bit-identical, so the pass is a no-op on its own fixed
    point.  Re-bakes node features.
    """
    if epochs <= 0:
        return doc
    cfg = doc.config
    target_flat = np.asarray(target_flat, dtype=np.float32)
    # a fitted decoder is near-converged: Adam's normalized steps at the
    # full training rate would first wander before re-converging, so the
    # touch-up runs an order of magnitude slower by default
    params = diffmath.ParamSet.from_document(
        doc, lr_decoder=lr or 0.1 * cfg.lr_decoder, dtype=np.float32)
    plans = _texture_plans(doc)
    grads = diffmath.GradBuffer.zeros_like(params)
    n_total = float(target_flat.size)
    for epoch in range(1, epochs + 1):
        grads.zero()
        for plan in plans:
            pred, caches = diffmath.plan_forward(plan, params, cfg.k_freq)
            resid = pred - target_flat[plan.pix_idx]
            diffmath.plan_backward(plan, params, cfg.k_freq, caches,
                                   2.0 * resid / n_total, grads)
        for name in grads.grads:
            if name.startswith("grid"):
                grads.grads[name][...] = 0.0
        diffmath.adam_step(params, grads, epoch, cfg.lr_decay,
                           cfg.lr_decay_every)
    params.write_back(doc)
    bake_features(doc)
    return doc


def history_to_csv(history, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "l_recons", "l_tv", "l_tv_edge",
                    "lr_decoder", "lr_features"])
        for row in history:
            w.writerow([row.epoch, row.l_recons, row.l_tv, row.l_tv_edge,
                        row.lr_decoder, row.lr_features])


def psnr_vs_target(doc, image: RasterImage) -> float:
    from .codec import psnr
    return psnr(render.render_image(doc), image)
