"""Lossy document compression (`.pimgc`) and fidelity metrics.

Per-tensor affine quantization with 4/8/16-bit codes.  The quantizer's
scale is driven to a floating-point fixed point so that re-quantizing a
dequantized document reproduces the identical stream (idempotence), which
makes the codec safe to apply repeatedly.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import meshing, texture
from .boundary import BezierShape
from .document import (ROLE_BACKGROUND, ROLE_FOREGROUND, VERSION, FitConfig,
                       Layer, ProxyDocument, _Reader)
from .errors import CorruptStream, DimensionMismatch
from .meshing import ProxyMesh
from .texture import DecoderWeights, FeatureGrid

MAGIC = b"PIMC"
PSNR_CAP = 100.0
_ALLOWED_BITS = (4, 8, 16)


@dataclass
class QuantSpec:
    coord_bits: int = 8
    feature_bits: int = 8
    weight_bits: int = 8
    finetune_epochs: int = 100

    def __post_init__(self):
        for b in (self.coord_bits, self.feature_bits, self.weight_bits):
            if b not in _ALLOWED_BITS:
                raise ValueError(f"bits must be one of {_ALLOWED_BITS}")
        if self.finetune_epochs < 0:
            raise ValueError("finetune_epochs must be >= 0")


@dataclass
class Bitstream:
    data: bytes

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.data)

    @staticmethod
    def load(path) -> "Bitstream":
        with open(path, "rb") as f:
            return Bitstream(f.read())


def _fixed_point_scale(lo, hi, qmax, cast=np.float64):
    """Scale s with fl((fl(lo + qmax*s) - lo)/qmax) == s, so the data range
    of a dequantized tensor regenerates the same scale.  ``cast`` is the
    storage dtype the decoded values pass through (float32 for document
    tensors): iterating through it makes the top lattice point a fixed
    point of that rounding as well."""
    s = (hi - lo) / qmax
    for _ in range(64):
        s2 = (np.float64(cast(lo + qmax * s)) - lo) / qmax
        if s2 == s:
            break
        s = s2
    return float(s)


def _pack_codes(q, bits):
    if bits == 16:
        return q.astype("<u2").tobytes()
    if bits == 8:
        return q.astype(np.uint8).tobytes()
    q = q.astype(np.uint8)
    if len(q) % 2:
        q = np.append(q, 0).astype(np.uint8)
    return ((q[0::2] << 4) | q[1::2]).tobytes()


def _unpack_codes(buf, n, bits):
    if bits == 16:
        return np.frombuffer(buf, dtype="<u2")[:n].astype(np.int64)
    if bits == 8:
        return np.frombuffer(buf, dtype=np.uint8)[:n].astype(np.int64)
    b = np.frombuffer(buf, dtype=np.uint8)
    out = np.empty(len(b) * 2, dtype=np.int64)
    out[0::2] = b >> 4
    out[1::2] = b & 0x0F
    return out[:n]


def _code_bytes(n, bits):
    return {16: 2 * n, 8: n, 4: (n + 1) // 2}[bits]


# candidate two-sided tail fractions for the clipped-range search
_CLIP_FRACTIONS = (0.0, 0.001, 0.003, 0.01, 0.03)


def quantize_tensor(arr, bits):
    """(header bytes, packed codes) for one tensor: affine codes over a
    range chosen to minimize reconstruction MSE.

    A plain min/max range lets a handful of outliers widen the step for
    every other entry; the search also tries ranges clipped at symmetric
    tail quantiles (outliers saturate to the end codes) and keeps whichever
    reconstructs best.  The unclipped candidate is tried first and kept on
    ties, so re-quantizing an already round-tripped tensor reproduces the
    identical bytes (the values then sit exactly on their own lattice).
    """
    flat = np.asarray(arr, dtype=np.float64).ravel()
    qmax = (1 << bits) - 1
    if flat.size == 0 or float(flat.min()) >= float(flat.max()):
        lo = float(flat.min()) if flat.size else 0.0
        header = struct.pack("<BBdd", bits, 1, lo, 1.0)
        return header + _pack_codes(np.zeros(flat.size, np.int64), bits)
    best = None
    for frac in _CLIP_FRACTIONS:
        # "lower"/"higher" keep the endpoints actual data values, so a
        # round-tripped (float32-stored) tensor regenerates them exactly
        lo = float(np.quantile(flat, frac, method="lower"))
        hi = float(np.quantile(flat, 1.0 - frac, method="higher"))
        if hi <= lo:
            continue
        s = _fixed_point_scale(lo, hi, qmax, cast=np.float32)
        q = np.clip(np.rint((flat - lo) / s), 0, qmax).astype(np.int64)
        back = np.float32(lo + q * s).astype(np.float64)
        err = float(np.mean((back - flat) ** 2))
        if best is None or err < best[0]:
            best = (err, lo, s, q)
        if err == 0.0:
            break
    _, lo, s, q = best
    header = struct.pack("<BBdd", bits, 0, lo, s)
    return header + _pack_codes(q, bits)


def dequantize_tensor(r: "_Reader", n):
    bits, degenerate, lo, s = struct.unpack("<BBdd", r.take(18))
    if bits not in _ALLOWED_BITS:
        raise CorruptStream(f"bad code width {bits}")
    q = _unpack_codes(r.take(_code_bytes(n, bits)), n, bits)
    if degenerate:
        return np.full(n, lo)
    return lo + q * s


def _quantize_coords(pts_px, bbox, bits):
    """Per-axis affine codes over the (f64) bbox range."""
    qmax = (1 << bits) - 1
    out = []
    for ax in range(2):
        lo, hi = float(bbox[0][ax]), float(bbox[1][ax])
        if hi <= lo:
            out.append(np.zeros(len(pts_px), np.int64))
            continue
        s = (hi - lo) / qmax
        out.append(np.clip(np.rint((pts_px[:, ax] - lo) / s), 0,
                           qmax).astype(np.int64))
    return _pack_codes(np.stack(out, axis=1).ravel(), bits)


def _dequantize_coords(r: "_Reader", n, bbox, bits):
    qmax = (1 << bits) - 1
    q = _unpack_codes(r.take(_code_bytes(2 * n, bits)), 2 * n,
                      bits).reshape(n, 2)
    out = np.empty((n, 2))
    for ax in range(2):
        lo, hi = float(bbox[0][ax]), float(bbox[1][ax])
        s = (hi - lo) / qmax if hi > lo else 0.0
        vals = lo + q[:, ax] * s
        if hi - lo > 2e-3:
            # pull the extreme lattice points a hair inside the bbox so the
            # float32 document representation still satisfies containment
            vals = np.clip(vals, lo + 1e-4, hi - 1e-4)
        out[:, ax] = vals
    return out


def _pack_flags(flags) -> bytes:
    return np.packbits(np.asarray(flags, dtype=bool)).tobytes()


def _unpack_flags(buf, n):
    return np.unpackbits(np.frombuffer(buf, np.uint8), count=n).astype(bool)


def _quantize_grid(codes, bits) -> bytes:
    """Per-channel affine quantization of an (Hg, Wg, D) grid: each feature
    dimension has its own range, so one wide channel cannot coarsen the
    step of the others."""
    return b"".join(quantize_tensor(codes[:, :, d], bits)
                    for d in range(codes.shape[2]))


def _dequantize_grid(r: "_Reader", wg, hg, dim):
    codes = np.empty((hg, wg, dim), dtype=np.float32)
    for d in range(dim):
        codes[:, :, d] = dequantize_tensor(r, wg * hg).reshape(
            hg, wg).astype(np.float32)
    return codes


def lattice_snap(pts_px, bbox, bits=8):
    """Snap pixel coordinates onto the per-axis quantization lattice of
    ``bbox`` so that a later ``coord_bits=bits`` round trip is lossless.

    Applied at geometry-construction time, before any fitting, this turns
    coordinate quantization into an exact operation: the texture is learned
    against the already-snapped geometry.
    """
    pts = np.asarray(pts_px, dtype=np.float64).copy()
    qmax = (1 << bits) - 1
    for ax in range(2):
        lo, hi = float(bbox[0][ax]), float(bbox[1][ax])
        if hi <= lo:
            continue
        s = (hi - lo) / qmax  # same step the coordinate codec uses
        q = np.clip(np.rint((pts[:, ax] - lo) / s), 0, qmax)
        pts[:, ax] = lo + q * s
    return pts


def grid_lattice_snap(codes, bits=8):
    """Round feature-grid codes onto their own per-channel quantization
    lattice (the exact lattice ``feature_bits=bits`` would use).

    Applied at the end of fitting, before the decoder's final adaptation,
    this makes the later feature quantization in :func:`quantize` an exact
    operation -- the decoder is trained against already-rounded codes, the
    texture-side analogue of :func:`lattice_snap` for coordinates.
    """
    codes = np.asarray(codes, dtype=np.float32)
    out = np.empty_like(codes)
    n = codes.shape[0] * codes.shape[1]
    for d in range(codes.shape[2]):
        blob = quantize_tensor(codes[:, :, d], bits)
        out[:, :, d] = dequantize_tensor(_Reader(blob), n).reshape(
            codes.shape[:2]).astype(np.float32)
    return out


def _baked_is_derivable(lay: Layer, scale) -> bool:
    """True when the baked node features are exactly the grid lookups the
    baking pass would produce (false after texture swaps or external
    feature updates, whose features exist nowhere but in the baked arrays).
    """
    if not lay.baked or lay.baked_global is None or lay.baked_local is None:
        return False
    u_nodes = texture.normalize_coord(lay.global_nodes.astype(np.float64),
                                      lay.bbox)
    u_verts = texture.normalize_coord(
        lay.mesh.vertices.astype(np.float64) * scale, lay.bbox)
    ref_g = texture.grid_lookup(lay.grid, u_nodes).astype(np.float32)
    ref_l = texture.grid_lookup(lay.grid, u_verts).astype(np.float32)
    return (np.array_equal(lay.baked_global, ref_g)
            and np.array_equal(lay.baked_local, ref_l))


def _bake_layer(lay: Layer, scale):
    u_nodes = texture.normalize_coord(lay.global_nodes.astype(np.float64),
                                      lay.bbox)
    u_verts = texture.normalize_coord(
        lay.mesh.vertices.astype(np.float64) * scale, lay.bbox)
    lay.baked_global = texture.grid_lookup(lay.grid, u_nodes).astype(
        np.float32)
    lay.baked_local = texture.grid_lookup(lay.grid, u_verts).astype(
        np.float32)
    lay.baked = True


def _encode_layer(lay: Layer, spec: QuantSpec, scale):
    """(byte chunks, reconstructed Layer) for one layer.

    The reconstructed layer carries the exact dequantized values the stream
    will produce, so the encoder can fine-tune against them.
    """
    out = []
    bbox = lay.bbox.astype(np.float64)
    derived = meshing.refine_flags(lay.mesh)
    # an unbaked layer has nothing to preserve: decode-side baking
    # regenerates its features from the grid
    baked_derivable = (not lay.baked) or _baked_is_derivable(lay, scale)
    out.append(struct.pack("<IBBBd", lay.id,
                           1 if lay.role == ROLE_BACKGROUND else 0,
                           0 if baked_derivable else 1,
                           1 if derived is not None else 0,
                           lay.mean_depth))
    out.append(struct.pack("<4d", *bbox.ravel()))
    ctrl = lay.boundary.points.astype(np.float64) * scale
    verts_all = lay.mesh.vertices.astype(np.float64) * scale
    if derived is not None:
        flags, n_l1 = derived
        verts_stored = verts_all[:n_l1]
    else:
        verts_stored = verts_all
    nodes = lay.global_nodes.astype(np.float64)
    out.append(struct.pack("<III", len(ctrl), len(verts_stored), len(nodes)))
    out.append(_quantize_coords(ctrl, bbox, spec.coord_bits))
    out.append(_quantize_coords(verts_stored, bbox, spec.coord_bits))
    out.append(_quantize_coords(nodes, bbox, spec.coord_bits))

    q_ctrl = _decode_coords(out[-3], len(ctrl), bbox, spec.coord_bits) / scale
    q_verts = _decode_coords(out[-2], len(verts_stored), bbox,
                             spec.coord_bits) / scale
    q_nodes = _decode_coords(out[-1], len(nodes), bbox, spec.coord_bits)

    out.append(struct.pack("<I", lay.mesh.levels))
    if derived is not None:
        l1_tris = np.asarray(lay.mesh.triangles_by_level[0], np.int64)
        idx_bytes = 2 if (len(l1_tris) == 0 or l1_tris.max() < 65536) else 4
        out.append(struct.pack("<IB", len(l1_tris), idx_bytes))
        out.append(np.ascontiguousarray(
            l1_tris, "<u2" if idx_bytes == 2 else "<i4").tobytes())
        for f in flags:
            out.append(struct.pack("<I", len(f)))
            out.append(_pack_flags(f))
        mesh = meshing.rebuild_from_flags(
            q_verts, l1_tris.astype(np.int32), flags)
    else:
        for li, tris in enumerate(lay.mesh.triangles_by_level):
            out.append(struct.pack("<I", len(tris)))
            out.append(np.ascontiguousarray(tris, "<i4").tobytes())
            if li > 0:
                out.append(np.ascontiguousarray(lay.mesh.parents[li],
                                                "<i4").tobytes())
        mesh = ProxyMesh(
            vertices=q_verts.astype(np.float32),
            triangles_by_level=[np.asarray(t, np.int32).copy()
                                for t in lay.mesh.triangles_by_level],
            parents=[None] + [np.asarray(p, np.int32).copy()
                              for p in lay.mesh.parents[1:]])

    out.append(struct.pack("<III", lay.grid.wg, lay.grid.hg, lay.grid.dim))
    grid_bytes = _quantize_grid(lay.grid.codes, spec.feature_bits)
    out.append(grid_bytes)
    q_codes = _dequantize_grid(_Reader(grid_bytes), lay.grid.wg, lay.grid.hg,
                               lay.grid.dim)

    qlay = Layer(id=lay.id, role=lay.role, mean_depth=lay.mean_depth,
                 boundary=BezierShape(q_ctrl.astype(np.float32)),
                 mesh=mesh, grid=FeatureGrid(q_codes),
                 bbox=bbox.astype(np.float32),
                 global_nodes=q_nodes.astype(np.float32))
    if baked_derivable:
        _bake_layer(qlay, scale)
    else:
        g_bytes = quantize_tensor(lay.baked_global, spec.feature_bits)
        l_bytes = quantize_tensor(lay.baked_local, spec.feature_bits)
        out.append(g_bytes)
        out.append(l_bytes)
        dim = lay.grid.dim
        qlay.baked_global = dequantize_tensor(
            _Reader(g_bytes), len(nodes) * dim).reshape(
            len(nodes), dim).astype(np.float32)
        qlay.baked_local = dequantize_tensor(
            _Reader(l_bytes), len(mesh.vertices) * dim).reshape(
            len(mesh.vertices), dim).astype(np.float32)
        qlay.baked = True
    return out, qlay, baked_derivable


def _decode_coords(buf, n, bbox, bits):
    return _dequantize_coords(_Reader(buf), n, bbox, bits)


def quantize(doc: ProxyDocument, spec: QuantSpec | None = None) -> Bitstream:
    """Compress a fitted, baked document to a standalone stream.

    Geometry (boundary control points, level-1 mesh vertices, global nodes)
    is rounded to ``coord_bits`` over each layer's bounding box; refinement
    levels are stored as one bit per triangle and rebuilt from exact edge
    midpoints.  Grid codes are rounded per feature channel.  The shared
    decoder is then fine-tuned for ``finetune_epochs`` against the original
    document's own prediction, compensating most of the rounding error,
    and stored at ``weight_bits``.  Re-quantizing a round-tripped document
    sees zero residual everywhere, so the pass is idempotent.
    """
    from . import optimize

    spec = spec or QuantSpec()
    scale = np.array([doc.width, doc.height], dtype=np.float64)

    layer_chunks = []
    qlayers = []
    all_derivable = True
    for lay in doc.layers:
        chunks, qlay, derivable = _encode_layer(lay, spec, scale)
        layer_chunks.extend(chunks)
        qlayers.append(qlay)
        all_derivable &= derivable

    decoder = DecoderWeights(
        weights=[w.copy() for w in doc.decoder.weights],
        biases=[b.copy() for b in doc.decoder.biases])
    if spec.finetune_epochs > 0 and all_derivable:
        qdoc = ProxyDocument(width=doc.width, height=doc.height,
                             layers=qlayers, decoder=decoder,
                             config=doc.config, version=VERSION)
        target = optimize.plan_predictions(doc)
        optimize.finetune_decoder(qdoc, target, spec.finetune_epochs)
        decoder = qdoc.decoder

    out = [MAGIC, struct.pack("<I", 1),
           struct.pack("<BBBB", spec.coord_bits, spec.feature_bits,
                       spec.weight_bits, 0)]
    cfg = doc.config.to_json().encode()
    out.append(struct.pack("<IIII", doc.width, doc.height, len(doc.layers),
                           len(cfg)))
    out.append(cfg)
    sizes = doc.decoder.layer_sizes
    out.append(struct.pack("<I", len(decoder.weights)))
    out.append(struct.pack(f"<{len(sizes)}I", *sizes))
    for w, b in zip(decoder.weights, decoder.biases):
        out.append(quantize_tensor(w, spec.weight_bits))
        out.append(quantize_tensor(b, spec.weight_bits))
    out.extend(layer_chunks)
    return Bitstream(b"".join(out))


def dequantize(bits: Bitstream | bytes) -> ProxyDocument:
    """Rebuild a renderable document from a compressed stream."""
    data = bits.data if isinstance(bits, Bitstream) else bytes(bits)
    r = _Reader(data)
    try:
        if r.take(4) != MAGIC:
            raise CorruptStream("not a compressed document stream")
        if r.u32() != 1:
            raise CorruptStream("unsupported codec version")
        coord_bits, feature_bits, weight_bits, _ = struct.unpack(
            "<BBBB", r.take(4))
        w_img, h_img = r.u32(), r.u32()
        n_layers = r.u32()
        cfg = FitConfig.from_json(r.take(r.u32()).decode())

        n_stages = r.u32()
        if n_stages > 64:
            raise CorruptStream("implausible decoder depth")
        sizes = [r.u32() for _ in range(n_stages + 1)]
        ws, bs = [], []
        for i in range(n_stages):
            ws.append(dequantize_tensor(r, sizes[i + 1] * sizes[i])
                      .reshape(sizes[i + 1], sizes[i]).astype(np.float32))
            bs.append(dequantize_tensor(r, sizes[i + 1]).astype(np.float32))
        decoder = DecoderWeights(weights=ws, biases=bs)

        scale = np.array([w_img, h_img], dtype=np.float64)
        layers = []
        for _ in range(n_layers):
            lid, role_b, baked_stored, mesh_derived, depth = struct.unpack(
                "<IBBBd", r.take(15))
            bbox = np.array(struct.unpack("<4d", r.take(32))).reshape(2, 2)
            n_ctrl, n_verts, n_nodes = r.u32(), r.u32(), r.u32()
            for n in (n_ctrl, n_verts, n_nodes):
                if n > 50_000_000:
                    raise CorruptStream("implausible node count")
            ctrl = _dequantize_coords(r, n_ctrl, bbox, coord_bits) / scale
            verts = _dequantize_coords(r, n_verts, bbox, coord_bits) / scale
            nodes = _dequantize_coords(r, n_nodes, bbox, coord_bits)
            h = r.u32()
            if h < 1 or h > 32:
                raise CorruptStream("implausible hierarchy depth")
            if mesh_derived:
                n_tri, idx_bytes = struct.unpack("<IB", r.take(5))
                if n_tri > 50_000_000 or idx_bytes not in (2, 4):
                    raise CorruptStream("implausible level-1 mesh")
                dt = "<u2" if idx_bytes == 2 else "<i4"
                l1_tris = np.frombuffer(
                    r.take(3 * idx_bytes * n_tri), dt).reshape(
                    n_tri, 3).astype(np.int32)
                flags = []
                for _ in range(h - 1):
                    nbits = r.u32()
                    if nbits > 50_000_000:
                        raise CorruptStream("implausible refine mask")
                    flags.append(_unpack_flags(r.take((nbits + 7) // 8),
                                               nbits))
                mesh = meshing.rebuild_from_flags(verts, l1_tris, flags)
            else:
                tris_by_level, parents = [], [None]
                for li in range(h):
                    n_tri = r.u32()
                    if n_tri > 50_000_000:
                        raise CorruptStream("implausible triangle count")
                    tris_by_level.append(
                        np.frombuffer(r.take(12 * n_tri), "<i4")
                        .reshape(n_tri, 3).copy())
                    if li > 0:
                        parents.append(np.frombuffer(r.take(4 * n_tri),
                                                     "<i4").copy())
                mesh = ProxyMesh(vertices=verts.astype(np.float32),
                                 triangles_by_level=tris_by_level,
                                 parents=parents)
            wg, hg, dim = r.u32(), r.u32(), r.u32()
            if wg * hg * dim > 500_000_000:
                raise CorruptStream("implausible grid size")
            codes = _dequantize_grid(r, wg, hg, dim)
            lay = Layer(
                id=lid,
                role=ROLE_BACKGROUND if role_b else ROLE_FOREGROUND,
                mean_depth=depth,
                boundary=BezierShape(ctrl.astype(np.float32)),
                mesh=mesh, grid=FeatureGrid(codes),
                bbox=bbox.astype(np.float32),
                global_nodes=nodes.astype(np.float32))
            if baked_stored:
                lay.baked_global = dequantize_tensor(
                    r, n_nodes * dim).reshape(n_nodes, dim).astype(np.float32)
                lay.baked_local = dequantize_tensor(
                    r, len(mesh.vertices) * dim).reshape(
                    len(mesh.vertices), dim).astype(np.float32)
                lay.baked = True
            else:
                _bake_layer(lay, scale)
            layers.append(lay)
        return ProxyDocument(width=w_img, height=h_img, layers=layers,
                             decoder=decoder, config=cfg, version=VERSION)
    except CorruptStream:
        raise
    except Exception as e:
        raise CorruptStream(f"malformed stream: {e}") from e


def bpp(bits: Bitstream | bytes, w, h) -> float:
    if w * h <= 0:
        raise ValueError("image area must be positive")
    data = bits.data if isinstance(bits, Bitstream) else bits
    return 8.0 * len(data) / (w * h)


def _image_array(img):
    return np.asarray(img.data if hasattr(img, "data") else img, np.float64)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio on the [0, 1] scale, capped at 100 dB."""
    x, y = _image_array(a), _image_array(b)
    if x.shape != y.shape:
        raise DimensionMismatch(f"{x.shape} vs {y.shape}")
    mse = float(((x - y) ** 2).mean())
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(a, b, sigma=1.5, k1=0.01, k2=0.03) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window, averaged over
    channels and positions."""
    x, y = _image_array(a), _image_array(b)
    if x.shape != y.shape:
        raise DimensionMismatch(f"{x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[:, :, None], y[:, :, None]
    c1, c2 = k1 ** 2, k2 ** 2
    total = 0.0
    t = 5.0 / sigma  # 11-tap window
    for ch in range(x.shape[2]):
        xc, yc = x[:, :, ch], y[:, :, ch]
        mu_x = ndimage.gaussian_filter(xc, sigma, truncate=t)
        mu_y = ndimage.gaussian_filter(yc, sigma, truncate=t)
        xx = ndimage.gaussian_filter(xc * xc, sigma, truncate=t) - mu_x ** 2
        yy = ndimage.gaussian_filter(yc * yc, sigma, truncate=t) - mu_y ** 2
        xy = ndimage.gaussian_filter(xc * yc, sigma, truncate=t) - mu_x * mu_y
        s = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)
             / ((mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)))
        total += float(s.mean())
    return total / x.shape[2]
