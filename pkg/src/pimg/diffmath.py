"""Reverse-mode gradients for the fixed texture pipeline, plus Adam.

The computation graph never changes (grid lookup -> interpolation ->
frequency encoding -> decoder -> loss), so instead of a general tape we
precompute the static interpolation operators per layer once (the geometry
is frozen during texture optimization) and hand-chain the backward pass.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import kernels, texture
from .errors import ShapeMismatch

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class ParamSet:
    """Named parameter tensors with per-group learning rates and Adam state.

    Names: w0..w3 / b0..b3 (group "decoder") and grid<layer id>
    (group "features").
    """

    values: dict
    groups: dict
    lrs: dict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for k, a in self.values.items():
            self.m.setdefault(k, np.zeros_like(a))
            self.v.setdefault(k, np.zeros_like(a))

    @staticmethod
    def from_document(doc, lr_decoder=None, lr_features=None, dtype=np.float64):
        cfg = doc.config
        values, groups = {}, {}
        for i, (w, b) in enumerate(zip(doc.decoder.weights, doc.decoder.biases)):
            values[f"w{i}"] = np.asarray(w, dtype=dtype).copy()
            values[f"b{i}"] = np.asarray(b, dtype=dtype).copy()
            groups[f"w{i}"] = groups[f"b{i}"] = "decoder"
        for lay in doc.layers:
            values[f"grid{lay.id}"] = np.asarray(lay.grid.codes, dtype=dtype).copy()
            groups[f"grid{lay.id}"] = "features"
        return ParamSet(values=values, groups=groups,
                        lrs={"decoder": lr_decoder or cfg.lr_decoder,
                             "features": lr_features or cfg.lr_features})

    def decoder_weights(self) -> texture.DecoderWeights:
        n = sum(1 for k in self.values if k.startswith("w"))
        return texture.DecoderWeights(
            weights=[self.values[f"w{i}"] for i in range(n)],
            biases=[self.values[f"b{i}"] for i in range(n)])

    def write_back(self, doc):
        """Copy the optimized tensors back into the document (float32)."""
        for i in range(len(doc.decoder.weights)):
            doc.decoder.weights[i] = self.values[f"w{i}"].astype(np.float32)
            doc.decoder.biases[i] = self.values[f"b{i}"].astype(np.float32)
        for lay in doc.layers:
            lay.grid.codes = self.values[f"grid{lay.id}"].astype(np.float32)


@dataclass
class GradBuffer:
    grads: dict

    @staticmethod
    def zeros_like(params: ParamSet) -> "GradBuffer":
        return GradBuffer({k: np.zeros_like(a) for k, a in params.values.items()})

    def zero(self):
        for a in self.grads.values():
            a[...] = 0.0

    def add(self, name, value):
        self.grads[name] += value


@dataclass
class LayerPlan:
    """Static per-layer operators for a fixed pixel assignment.

    Everything here depends only on geometry, which is frozen while the
    texture parameters are optimized, so it is computed once per fit.
    """

    layer_id: int
    pix_idx: np.ndarray      # flat indices into the (H*W) image
    idw: np.ndarray          # (n_px, m) row-stochastic global weights
    local: sparse.csr_matrix  # (n_px, n_vertices) summed multi-level weights
    vert_idx: np.ndarray     # (n_v, 4) flat grid indices
    vert_w: np.ndarray       # (n_v, 4)
    node_idx: np.ndarray     # (m, 4)
    node_w: np.ndarray       # (m, 4)


def _bilinear_operator(pts_px, bbox, grid: texture.FeatureGrid):
    u = texture.normalize_coord(pts_px, bbox)
    return texture.bilinear_weights(u, grid.wg, grid.hg)


def build_layer_plan(doc, lay, pix_idx, centers_px) -> LayerPlan:
    """Assemble the static operators for one layer's owned pixels."""
    w, h = doc.width, doc.height
    x_px = centers_px[pix_idx]
    scale = np.array([w, h], dtype=np.float64)
    verts_px = lay.mesh.vertices.astype(np.float64) * scale
    vert_idx, vert_w = _bilinear_operator(verts_px, lay.bbox, lay.grid)
    node_idx, node_w = _bilinear_operator(lay.global_nodes.astype(np.float64),
                                          lay.bbox, lay.grid)
    idw = texture.idw_weights(x_px, lay.global_nodes.astype(np.float64))
    rows, cols, vals, covered = texture.local_feature_weights(
        lay.mesh, x_px / scale)
    local = sparse.csr_matrix(
        (vals, (rows, cols)), shape=(len(x_px), len(lay.mesh.vertices)))
    if not covered.all():
        # ownership comes from the exact curve; the flattened mesh can miss a
        # sub-pixel sliver at the rim -- snap those to their nearest vertex
        miss = np.nonzero(~covered)[0]
        vi, _ = kernels.nearest_neighbor(x_px[miss], verts_px)
        fix = sparse.csr_matrix((np.ones(len(miss)), (miss, vi)),
                                shape=local.shape)
        local = local + fix
    return LayerPlan(layer_id=lay.id, pix_idx=np.asarray(pix_idx),
                     idw=idw, local=local, vert_idx=vert_idx, vert_w=vert_w,
                     node_idx=node_idx, node_w=node_w)


def plan_forward(plan: LayerPlan, params: ParamSet, k_freq: int):
    """Predicted RGB for the plan's pixels plus the caches backward needs."""
    codes = params.values[f"grid{plan.layer_id}"]
    flat = codes.reshape(-1, codes.shape[-1])
    vert_f = np.einsum("nk,nkd->nd", plan.vert_w, flat[plan.vert_idx])
    node_f = np.einsum("nk,nkd->nd", plan.node_w, flat[plan.node_idx])
    f_g = plan.idw @ node_f
    f_l = plan.local @ vert_f
    f = np.concatenate([f_g, f_l], axis=1).astype(codes.dtype, copy=False)
    enc = texture.encode(f, k_freq)
    pred, cache = texture.decode_with_cache(enc, params.decoder_weights())
    return pred, (f, cache)


def plan_backward(plan: LayerPlan, params: ParamSet, k_freq: int,
                  caches, d_pred, out: GradBuffer):
    """Chain d_pred back into the decoder weights and this layer's codes."""
    f, cache = caches
    w = params.decoder_weights()
    d_pred = np.asarray(d_pred, dtype=f.dtype)
    d_enc, d_ws, d_bs = texture.decode_backward(w, cache, d_pred)
    for i in range(len(d_ws)):
        out.add(f"w{i}", d_ws[i])
        out.add(f"b{i}", d_bs[i])
    d_f = texture.encode_backward(f, k_freq, d_enc, enc=cache[0])
    dim = f.shape[1] // 2
    d_g, d_l = d_f[:, :dim], d_f[:, dim:]
    d_node = plan.idw.T @ d_g
    d_vert = plan.local.T @ d_l
    codes = params.values[f"grid{plan.layer_id}"]
    d_flat = np.zeros((codes.shape[0] * codes.shape[1], codes.shape[2]),
                      dtype=d_f.dtype)
    np.add.at(d_flat, plan.node_idx.ravel(),
              (plan.node_w[:, :, None] * d_node[:, None, :]).reshape(-1, dim))
    np.add.at(d_flat, plan.vert_idx.ravel(),
              (plan.vert_w[:, :, None] * d_vert[:, None, :]).reshape(-1, dim))
    out.add(f"grid{plan.layer_id}", d_flat.reshape(codes.shape))


def backward(pixels_px, doc, targets, params: ParamSet | None = None):
    """Loss and exact gradients for a pixel batch against target colors.

    ``pixels_px`` are pixel-center coordinates; ownership is resolved from
    the document's shapes.  The loss is the mean squared error over the
    batch (all channels).  Returns (GradBuffer, loss).
    """
    from . import render  # local import; render has no diffmath dependency

    pixels_px = np.atleast_2d(np.asarray(pixels_px, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if len(pixels_px) == 0:
        raise ShapeMismatch("empty pixel batch")
    if targets.shape != (len(pixels_px), 3):
        raise ShapeMismatch("targets must be (n, 3)")
    if params is None:
        params = ParamSet.from_document(doc)
    owner = render.resolve_layers(doc, pixels_px)
    out = GradBuffer.zeros_like(params)
    n_total = targets.size
    loss = 0.0
    for lay in doc.layers:
        sel = np.nonzero(owner == lay.id)[0]
        if len(sel) == 0:
            continue
        plan = build_layer_plan(doc, lay, sel, pixels_px)
        pred, caches = plan_forward(plan, params, doc.config.k_freq)
        resid = pred - targets[sel]
        loss += float((resid ** 2).sum()) / n_total
        plan_backward(plan, params, doc.config.k_freq, caches,
                      2.0 * resid / n_total, out)
    return out, loss


def adam_step(params: ParamSet, grads: GradBuffer, epoch: int,
              decay: float = 0.8, decay_every: int = 250):
    """One Adam update; the effective lr is group lr * decay^(epoch//every)."""
    params.step += 1
    t = params.step
    for name, g in grads.grads.items():
        if name not in params.values:
            raise ShapeMismatch(f"gradient for unknown parameter {name}")
        p = params.values[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        lr = params.lrs[params.groups[name]] * decay ** (epoch // decay_every)
        m = params.m[name]
        v = params.v[name]
        m *= ADAM_B1
        m += (1 - ADAM_B1) * g
        v *= ADAM_B2
        v += (1 - ADAM_B2) * g * g
        mhat = m / (1 - ADAM_B1 ** t)
        vhat = v / (1 - ADAM_B2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def effective_lr(base_lr, epoch, decay=0.8, decay_every=250):
    return base_lr * decay ** (epoch // decay_every)


def fd_check(loss_fn, grads: dict, values: dict, probes: int,
             rng=None, step: float = 1e-5, min_grad: float = 0.0,
             curvature_tol: float = 0.0) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn()`` must read the (temporarily perturbed) ``values`` arrays.
    The denominator is max(|analytic|, |numeric|, 1e-8).

    ``min_grad`` restricts probes to coordinates whose analytic gradient
    magnitude is at least that value (candidates are redrawn).  A central
    difference at a fixed step can only resolve gradients well above the
    rounding noise of the loss evaluation (roughly eps * |loss| / step);
    below that floor the comparison measures float64 noise, not the
    correctness of the gradient formula.

    ``curvature_tol`` (relative, 0 = off) skips coordinates where the
    central difference itself has not converged: the difference is
    recomputed at step/2, and when the two disagree by more than the
    tolerance the truncation term (third derivative · step²/6) dominates
    at this step, so no fixed-step comparison can resolve the analytic
    gradient there.  Losses with sharply curved smoothing terms (e.g. a
    √(d²+ε) coupling near d ≈ √ε) have such coordinates regardless of
    whether the gradient formula is correct.
    """
    if probes < 1:
        raise ValueError("need at least one probe")
    rng = rng or np.random.default_rng(0)
    names = sorted(grads)
    worst = 0.0
    done = 0
    attempts = 0
    while done < probes:
        attempts += 1
        if attempts > 500 * probes:
            raise ValueError(
                f"could not find {probes} coordinates with |gradient| >= "
                f"{min_grad} (got {done})")
        name = names[rng.integers(len(names))]
        a = values[name]
        flat = a.reshape(-1)
        i = int(rng.integers(flat.size))
        if abs(grads[name].reshape(-1)[i]) < min_grad:
            continue
        old = flat[i]
        flat[i] = old + step
        hi = loss_fn()
        flat[i] = old - step
        lo = loss_fn()
        flat[i] = old
        numeric = (hi - lo) / (2 * step)
        analytic = grads[name].reshape(-1)[i]
        denom = max(abs(analytic), abs(numeric), 1e-8)
        if curvature_tol > 0.0:
            half = step / 2
            flat[i] = old + half
            hi2 = loss_fn()
            flat[i] = old - half
            lo2 = loss_fn()
            flat[i] = old
            numeric_half = (hi2 - lo2) / (2 * half)
            if abs(numeric - numeric_half) > curvature_tol * denom:
                continue
        done += 1
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
