"""Feature grids, geometry-aware interpolation, frequency encoding, decoder.

Everything here is written batched (n points at a time) because the fitting
loop evaluates whole pixel sets; the per-point operations from the module
contract are thin wrappers over the batched forms.  All forward passes have
matching closed-form backward passes in ``diffmath``.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import meshing
from .errors import DegenerateBBox, DimensionMismatch, NoVisibleNodes

IDW_EPS = 1e-8
COINCIDENT_DIST = 1e-9


@dataclass
class FeatureGrid:
    codes: np.ndarray  # (Hg, Wg, D) float32

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float32)
        if self.codes.ndim != 3:
            raise ValueError("codes must be (Hg, Wg, D)")
        if self.codes.shape[0] < 2 or self.codes.shape[1] < 2:
            raise ValueError("grid needs at least 2x2 codes for bilinear lookup")

    @property
    def wg(self):
        return self.codes.shape[1]

    @property
    def hg(self):
        return self.codes.shape[0]

    @property
    def dim(self):
        return self.codes.shape[2]

    def flat(self):
        return self.codes.reshape(-1, self.dim)


@dataclass
class DecoderWeights:
    weights: list  # [(out, in) float32]
    biases: list   # [(out,) float32]

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def n_params(self):
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    @staticmethod
    def create(feature_dim=16, k_freq=10, hidden=64, rng=None):
        """Default architecture: 4 affine stages, hidden width 64, RGB out.
        Input width 2*D*(2*K): global+local features, sin/cos per band."""
        sizes = [2 * feature_dim * 2 * k_freq, hidden, hidden, hidden, 3]
        rng = rng or np.random.default_rng(0)
        ws, bs = [], []
        for i in range(4):
            bound = 1.0 / math.sqrt(sizes[i])
            ws.append(rng.uniform(-bound, bound,
                                  (sizes[i + 1], sizes[i])).astype(np.float32))
            bs.append(rng.uniform(-bound, bound, sizes[i + 1]).astype(np.float32))
        return DecoderWeights(weights=ws, biases=bs)


def normalize_coord(v, bbox):
    """Map point(s) into the bbox-local unit square, clamped to [0, 1]."""
    bbox = np.asarray(bbox, dtype=np.float64)
    ext = bbox[1] - bbox[0]
    if ext[0] <= 0 or ext[1] <= 0:
        raise DegenerateBBox(f"bbox extents must be positive, got {ext}")
    v = np.asarray(v, dtype=np.float64)
    return np.clip((v - bbox[0]) / ext, 0.0, 1.0)


def bilinear_weights(u, wg, hg):
    """Indices and weights of the 4 codes blended at normalized points u.

    Code centers sit at ((k + .5)/Wg, (l + .5)/Hg), edge-clamped.  Returns
    (idx (n, 4) into the flattened Hg*Wg grid, w (n, 4) summing to 1).
    """
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    gx = u[:, 0] * wg - 0.5
    gy = u[:, 1] * hg - 0.5
    x0 = np.clip(np.floor(gx), 0, wg - 2).astype(np.int64)
    y0 = np.clip(np.floor(gy), 0, hg - 2).astype(np.int64)
    fx = np.clip(gx - x0, 0.0, 1.0)
    fy = np.clip(gy - y0, 0.0, 1.0)
    idx = np.stack([y0 * wg + x0, y0 * wg + x0 + 1,
                    (y0 + 1) * wg + x0, (y0 + 1) * wg + x0 + 1], axis=1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy),
                  (1 - fx) * fy, fx * fy], axis=1)
    return idx, w


def grid_lookup(grid: FeatureGrid, u):
    """Bilinear blend of the four surrounding codes at normalized point(s)."""
    single = np.ndim(u) == 1
    idx, w = bilinear_weights(u, grid.wg, grid.hg)
    flat = grid.flat().astype(np.float64)
    out = np.einsum("nk,nkd->nd", w, flat[idx])
    return out[0] if single else out


def fg_grid_size(bbox, o):
    """Foreground grid resolution: bbox extent / divisor, at least 2 each."""
    if o <= 0:
        raise ValueError("divisor must be positive")
    bbox = np.asarray(bbox, dtype=np.float64)
    ext = bbox[1] - bbox[0]
    return (max(2, int(np.ceil(ext[0] / o))), max(2, int(np.ceil(ext[1] / o))))


def bg_grid_size(hole_nodes, visible_nodes, w, h):
    """Background grid resolution from the spatial gap between hole nodes
    and visible nodes; small on purpose so codes couple across holes.

    The gap is the worst-case Euclidean distance from a hole node to its
    nearest visible node.  A per-axis projected gap would collapse to ~0 as
    soon as any visible node shares an x (or y) with a hole node, which
    would make the grid grow without bound; the Euclidean gap measures how
    deep the occlusion actually is, keeping the map coarse over large holes
    so each code is supervised by visible pixels on both sides.
    """
    visible_nodes = np.asarray(visible_nodes, dtype=np.float64).reshape(-1, 2)
    if len(visible_nodes) == 0:
        raise NoVisibleNodes("background has no visible proxy nodes")
    hole_nodes = np.asarray(hole_nodes, dtype=np.float64).reshape(-1, 2)
    if len(hole_nodes) == 0:
        dx, dy = float(w), float(h)
    else:
        d = np.linalg.norm(
            hole_nodes[:, None, :] - visible_nodes[None, :, :], axis=2)
        gap = float(np.max(np.min(d, axis=1)))
        dx = dy = gap
    wg = max(8, int(np.floor(w / dx))) if dx > 0 else max(8, w)
    hg = max(8, int(np.floor(h / dy))) if dy > 0 else max(8, h)
    return wg, hg


def idw_weights(x, nodes, eps=IDW_EPS):
    """Inverse-squared-distance weights of x against the global nodes;
    rows sum to 1.  A point within COINCIDENT_DIST of a node gets a one-hot
    row so node features are reproduced exactly."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    nodes = np.asarray(nodes, dtype=np.float64)
    d2 = ((x[:, None, :] - nodes[None, :, :]) ** 2).sum(axis=2)
    w = 1.0 / (d2 + eps)
    hit = d2 < COINCIDENT_DIST ** 2
    any_hit = hit.any(axis=1)
    if any_hit.any():
        w[any_hit] = 0.0
        first = np.argmax(hit[any_hit], axis=1)
        w[np.nonzero(any_hit)[0], first] = 1.0
    return w / w.sum(axis=1, keepdims=True)


def global_feature(x, node_positions, node_features):
    """IDW interpolation of the per-segment global features."""
    single = np.ndim(x) == 1
    w = idw_weights(x, node_positions)
    out = w @ np.asarray(node_features, dtype=np.float64)
    return out[0] if single else out


def local_feature_weights(mesh: meshing.ProxyMesh, pts):
    """Sparse (rows, cols, vals) triplets of the summed multi-level
    barycentric interpolation over every hierarchy level covering each point.
    Points not covered at level 1 get empty rows."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    rows, cols, vals = [], [], []
    covered1 = None
    for level in range(1, mesh.levels + 1):
        tri_idx, bary = meshing.locate(mesh, pts, level)
        if level == 1:
            covered1 = tri_idx >= 0
        hit = np.nonzero(tri_idx >= 0)[0]
        tris = np.asarray(mesh.triangles_by_level[level - 1], np.int64)
        for k in range(3):
            rows.append(hit)
            cols.append(tris[tri_idx[hit], k])
            vals.append(bary[hit, k])
    return (np.concatenate(rows), np.concatenate(cols),
            np.concatenate(vals), covered1)


def local_feature(x, mesh: meshing.ProxyMesh, vertex_features):
    """Multi-level barycentric interpolation, summed across covering levels."""
    single = np.ndim(x) == 1
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    feats = np.asarray(vertex_features, dtype=np.float64)
    rows, cols, vals, covered = local_feature_weights(mesh, x2)
    out = np.zeros((len(x2), feats.shape[1]))
    np.add.at(out, rows, vals[:, None] * feats[cols])
    if not covered.all():
        from .errors import OutsideLayer
        raise OutsideLayer("point not covered by the level-1 mesh")
    return out[0] if single else out


def encode(f, k_freq):
    """Frequency expansion: per scalar c, (sin(2^k pi c), cos(2^k pi c)) for
    k = 0..K-1, laid out component-major.  Output width = 2 * K * len(f)."""
    if k_freq < 1:
        raise ValueError("need at least one frequency band")
    single = np.ndim(f) == 1
    f = np.atleast_2d(np.asarray(f))
    if f.dtype not in (np.float32, np.float64):
        f = f.astype(np.float64)
    out = np.empty((f.shape[0], f.shape[1], 2 * k_freq), dtype=f.dtype)
    # double-angle recurrence: only band 0 needs real trig
    s = np.sin(np.pi * f)
    c = np.cos(np.pi * f)
    out[:, :, 0] = s
    out[:, :, 1] = c
    for k in range(1, k_freq):
        s, c = 2.0 * s * c, c * c - s * s
        out[:, :, 2 * k] = s
        out[:, :, 2 * k + 1] = c
    out = out.reshape(f.shape[0], -1)
    return out[0] if single else out


def encode_backward(f, k_freq, d_out, enc=None):
    """Gradient of ``encode`` w.r.t. its input features.

    Pass the forward output as ``enc`` to reuse its sin/cos values instead
    of re-evaluating the trig functions.
    """
    f = np.atleast_2d(np.asarray(f))
    d_out = np.atleast_2d(np.asarray(d_out))
    if enc is None:
        enc = encode(f, k_freq)
    e3 = np.atleast_2d(enc).reshape(f.shape[0], f.shape[1], 2 * k_freq)
    freqs = ((2.0 ** np.arange(k_freq)) * np.pi).astype(e3.dtype)
    d3 = d_out.reshape(f.shape[0], f.shape[1], 2 * k_freq)
    d_sin = d3[:, :, 0::2]
    d_cos = d3[:, :, 1::2]
    sin = e3[:, :, 0::2]
    cos = e3[:, :, 1::2]
    return ((d_sin * cos - d_cos * sin) * freqs).sum(axis=2)


def decode(enc, w: DecoderWeights):
    """Forward pass: affine stages with ReLU between, sigmoid on the output."""
    single = np.ndim(enc) == 1
    x = np.atleast_2d(np.asarray(enc, dtype=np.float64))
    if x.shape[1] != w.weights[0].shape[1]:
        raise DimensionMismatch(
            f"decoder expects width {w.weights[0].shape[1]}, got {x.shape[1]}")
    out, _ = decode_with_cache(x, w)
    return out[0] if single else out


def decode_with_cache(x, w: DecoderWeights):
    """Forward pass keeping pre-activation inputs for the backward pass."""
    cache = []
    h = np.asarray(x)
    n = len(w.weights)
    for i, (wi, bi) in enumerate(zip(w.weights, w.biases)):
        cache.append(h)
        h = h @ wi.T.astype(h.dtype, copy=False) + bi.astype(h.dtype, copy=False)
        if i < n - 1:
            h = np.maximum(h, 0.0)
        else:
            h = 1.0 / (1.0 + np.exp(-h))
        cache.append(h)
    return h, cache


def decode_backward(w: DecoderWeights, cache, d_out):
    """Backprop through the decoder.

    Returns (d_input, [dW...], [db...]).  ``cache`` comes from
    ``decode_with_cache`` (alternating stage input / stage output).
    """
    n = len(w.weights)
    d = np.asarray(d_out)
    d_ws = [None] * n
    d_bs = [None] * n
    for i in range(n - 1, -1, -1):
        x_in = cache[2 * i]
        act = cache[2 * i + 1]
        if i == n - 1:
            d = d * act * (1.0 - act)          # sigmoid'
        else:
            d = d * (act > 0)                  # relu'
        d_ws[i] = d.T @ x_in
        d_bs[i] = d.sum(axis=0)
        d = d @ w.weights[i].astype(d.dtype, copy=False)
    return d, d_ws, d_bs
