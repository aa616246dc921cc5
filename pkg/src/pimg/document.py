"""Persistent data model and the `.pimg` chunked binary format.

All float payloads are little-endian float32; the in-memory document keeps
its arrays in float32 as well, which is what makes the round trip bit-exact.
The fit configuration is stored as canonical JSON (repr-exact floats).
"""

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .boundary import BezierShape
from .errors import (BadMagic, InvariantViolation, TruncatedChunk,
                     UnsupportedVersion)
from .meshing import ProxyMesh
from .texture import DecoderWeights, FeatureGrid

MAGIC = b"PIMG"
VERSION = 1
BBOX_PAD_PX = 0.01  # absorbs float32 rounding so containment checks hold

ROLE_FOREGROUND = "foreground"
ROLE_BACKGROUND = "background"


@dataclass
class FitConfig:
    m_init: int = 4
    tau: float = 2e-3
    lr_b: float = 0.2
    lr_f: float = 0.05
    h_b: int = 2
    h_f: int = 3
    feature_dim: int = 16
    k_freq: int = 10
    o_fg: int = 8
    epochs: int = 1500
    gamma: float = 0.001
    beta: float = 10.0
    lr_decoder: float = 1e-3
    lr_features: float = 5e-3
    lr_decay: float = 0.8
    lr_decay_every: int = 250
    shape_lr: float = 5e-3
    shape_epochs: int = 2000
    shape_check_every: int = 500
    samples_per_segment: int = 32
    tv_radius: int = 2
    grid_init_sigma: float = 0.01
    seed: int = 0

    def validate(self):
        nums = dataclasses.asdict(self)
        for k, v in nums.items():
            if isinstance(v, (int, float)) and k != "seed" and v <= 0:
                raise InvariantViolation(f"config field {k} must be positive")
        if not self.tau < 1:
            raise InvariantViolation("tau must be < 1")
        if self.h_b > self.h_f:
            raise InvariantViolation("background depth must not exceed foreground depth")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @staticmethod
    def from_json(s: str) -> "FitConfig":
        data = json.loads(s)
        known = {f.name for f in dataclasses.fields(FitConfig)}
        return FitConfig(**{k: v for k, v in data.items() if k in known})


@dataclass
class Layer:
    id: int
    role: str
    mean_depth: float
    boundary: BezierShape
    mesh: ProxyMesh
    grid: FeatureGrid
    bbox: np.ndarray                  # (2, 2) float32, pixel coords
    global_nodes: np.ndarray          # (m, 2) float32, pixel coords
    baked: bool = False
    baked_global: np.ndarray | None = None   # (m, D) float32
    baked_local: np.ndarray | None = None    # (n_vertices, D) float32

    def __post_init__(self):
        self.mean_depth = float(np.float32(self.mean_depth))
        self.bbox = np.asarray(self.bbox, dtype=np.float32).reshape(2, 2)
        self.global_nodes = np.asarray(self.global_nodes,
                                       dtype=np.float32).reshape(-1, 2)

    def n_params(self):
        return int(self.grid.codes.size)


@dataclass
class ProxyDocument:
    width: int
    height: int
    layers: list
    decoder: DecoderWeights
    config: FitConfig = field(default_factory=FitConfig)
    version: int = VERSION

    @property
    def background(self) -> Layer:
        return self.layers[-1]

    def foregrounds(self):
        return self.layers[:-1]

    def layer_by_id(self, layer_id: int) -> Layer:
        for lay in self.layers:
            if lay.id == layer_id:
                return lay
        from .errors import UnknownLayer
        raise UnknownLayer(f"no layer with id {layer_id}")

    def n_implicit_params(self):
        return self.decoder.n_params() + sum(l.n_params() for l in self.layers)


def validate_document(doc: ProxyDocument):
    if doc.width < 1 or doc.height < 1:
        raise InvariantViolation("image dimensions must be >= 1")
    if not doc.layers:
        return
    bgs = [l for l in doc.layers if l.role == ROLE_BACKGROUND]
    if len(bgs) != 1 or doc.layers[-1].role != ROLE_BACKGROUND:
        raise InvariantViolation("exactly one background layer, stored last")
    depths = [l.mean_depth for l in doc.foregrounds()]
    if any(a > b for a, b in zip(depths, depths[1:])):
        raise InvariantViolation("foreground layers must be sorted by mean depth")
    bg = doc.background
    full = np.array([[0, 0], [doc.width, doc.height]], dtype=np.float32)
    if not np.allclose(bg.bbox, full, atol=1e-3):
        raise InvariantViolation("background bbox must equal the image rectangle")
    scale = np.array([doc.width, doc.height], dtype=np.float64)
    for lay in doc.layers:
        if lay.global_nodes.shape[0] != lay.boundary.m:
            raise InvariantViolation(
                f"layer {lay.id}: global node count != segment count")
        pts_px = np.vstack([lay.mesh.vertices.astype(np.float64) * scale,
                            lay.boundary.points.astype(np.float64) * scale])
        lo = lay.bbox[0].astype(np.float64) - 1e-6
        hi = lay.bbox[1].astype(np.float64) + 1e-6
        if (pts_px < lo).any() or (pts_px > hi).any():
            raise InvariantViolation(
                f"layer {lay.id}: bbox does not contain all geometry")


def bbox_from_geometry(boundary: BezierShape, mesh: ProxyMesh, w, h):
    """Pixel bbox padded enough to absorb float32 storage rounding."""
    scale = np.array([w, h], dtype=np.float64)
    pts = np.vstack([mesh.vertices.astype(np.float64),
                     boundary.points.astype(np.float64)]) * scale
    lo = pts.min(axis=0) - BBOX_PAD_PX
    hi = pts.max(axis=0) + BBOX_PAD_PX
    return np.array([lo, hi], dtype=np.float32)


# --- binary writer ---------------------------------------------------------

def _chunk(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def _pack_f32(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _pack_i32(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<i4").tobytes()


def serialize(doc: ProxyDocument) -> bytes:
    validate_document(doc)
    out = [MAGIC, struct.pack("<I", doc.version)]

    cfg = doc.config.to_json().encode()
    out.append(_chunk(b"HDRC", struct.pack("<III", doc.width, doc.height,
                                           len(doc.layers))
                      + struct.pack("<I", len(cfg)) + cfg))

    dec = doc.decoder
    sizes = dec.layer_sizes
    payload = [struct.pack("<I", len(dec.weights)),
               struct.pack("<I", len(sizes)),
               struct.pack(f"<{len(sizes)}I", *sizes)]
    for w, b in zip(dec.weights, dec.biases):
        payload.append(_pack_f32(w))
        payload.append(_pack_f32(b))
    out.append(_chunk(b"DECW", b"".join(payload)))

    for lay in doc.layers:
        p = [struct.pack("<IBf", lay.id,
                         1 if lay.role == ROLE_BACKGROUND else 0,
                         lay.mean_depth)]
        p.append(_pack_f32(lay.bbox))
        p.append(struct.pack("<I", lay.boundary.points.shape[0]))
        p.append(_pack_f32(lay.boundary.points))
        mesh = lay.mesh
        p.append(struct.pack("<I", mesh.vertices.shape[0]))
        p.append(_pack_f32(mesh.vertices))
        p.append(struct.pack("<I", mesh.levels))
        for li, tris in enumerate(mesh.triangles_by_level):
            p.append(struct.pack("<I", len(tris)))
            p.append(_pack_i32(tris))
            if li > 0:
                p.append(_pack_i32(mesh.parents[li]))
        p.append(struct.pack("<III", lay.grid.wg, lay.grid.hg, lay.grid.dim))
        p.append(_pack_f32(lay.grid.codes))
        p.append(struct.pack("<I", lay.global_nodes.shape[0]))
        p.append(_pack_f32(lay.global_nodes))
        p.append(struct.pack("<B", 1 if lay.baked else 0))
        if lay.baked:
            p.append(_pack_f32(lay.baked_global))
            p.append(struct.pack("<I", lay.baked_local.shape[0]))
            p.append(_pack_f32(lay.baked_local))
        out.append(_chunk(b"LAYR", b"".join(p)))

    out.append(_chunk(b"ENDD", b""))
    return b"".join(out)


# --- binary reader ---------------------------------------------------------

class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedChunk(f"expected {n} bytes at offset {self.pos}")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def u8(self):
        return self.take(1)[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def f32(self):
        return struct.unpack("<f", self.take(4))[0]

    def f32_array(self, shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape).copy()

    def i32_array(self, shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<i4").reshape(shape).copy()


_MAX_COUNT = 100_000_000  # sanity cap against hostile length fields


def _checked(n, what):
    if n > _MAX_COUNT:
        raise TruncatedChunk(f"implausible {what} count {n}")
    return n


def deserialize(data: bytes) -> ProxyDocument:
    r = _Reader(bytes(data))
    if len(data) < 4 or r.take(4) != MAGIC:
        raise BadMagic("stream does not start with PIMG")
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersion(f"format version {version} not supported")

    width = height = None
    config = FitConfig()
    n_layers = 0
    decoder = None
    layers = []
    saw_end = False
    while r.pos < len(r.buf):
        tag = r.take(4)
        length = r.u64()
        body = _Reader(r.take(_checked(length, "chunk")))
        try:
            if tag == b"HDRC":
                width = body.u32()
                height = body.u32()
                n_layers = body.u32()
                config = FitConfig.from_json(
                    body.take(_checked(body.u32(), "config")).decode())
            elif tag == b"DECW":
                n_stages = _checked(body.u32(), "stages")
                n_sizes = _checked(body.u32(), "sizes")
                sizes = [body.u32() for _ in range(n_sizes)]
                if n_sizes != n_stages + 1:
                    raise InvariantViolation("decoder size list inconsistent")
                ws, bs = [], []
                for i in range(n_stages):
                    ws.append(body.f32_array((_checked(sizes[i + 1], "w"),
                                              _checked(sizes[i], "w"))))
                    bs.append(body.f32_array((sizes[i + 1],)))
                decoder = DecoderWeights(weights=ws, biases=bs)
            elif tag == b"LAYR":
                layers.append(_read_layer(body))
            elif tag == b"ENDD":
                saw_end = True
            # unknown tags are skipped (length-prefixed)
        except (ValueError, UnicodeDecodeError, json.JSONDecodeError,
                OverflowError) as e:
            raise InvariantViolation(f"malformed {tag!r} chunk: {e}") from e

    if width is None or decoder is None or not saw_end:
        raise TruncatedChunk("missing required chunks")
    if len(layers) != n_layers:
        raise InvariantViolation("layer count does not match header")
    doc = ProxyDocument(width=width, height=height, layers=layers,
                        decoder=decoder, config=config, version=version)
    validate_document(doc)
    return doc


def _read_layer(b: _Reader) -> Layer:
    lid = b.u32()
    role = ROLE_BACKGROUND if b.u8() == 1 else ROLE_FOREGROUND
    depth = b.f32()
    bbox = b.f32_array((2, 2))
    n_ctrl = _checked(b.u32(), "control point")
    boundary = BezierShape(points=b.f32_array((n_ctrl, 2)))
    n_verts = _checked(b.u32(), "vertex")
    verts = b.f32_array((n_verts, 2))
    h = _checked(b.u32(), "level")
    tris_by_level = []
    parents = [None]
    for li in range(h):
        n_tri = _checked(b.u32(), "triangle")
        tris_by_level.append(b.i32_array((n_tri, 3)))
        if li > 0:
            parents.append(b.i32_array((n_tri,)))
    for tris in tris_by_level:
        if tris.size and (tris.min() < 0 or tris.max() >= n_verts):
            raise InvariantViolation("triangle vertex index out of range")
    mesh = ProxyMesh(vertices=verts, triangles_by_level=tris_by_level,
                     parents=parents)
    wg, hg, dim = b.u32(), b.u32(), b.u32()
    _checked(wg * hg * dim, "code")
    grid = FeatureGrid(codes=b.f32_array((hg, wg, dim)))
    n_nodes = _checked(b.u32(), "global node")
    nodes = b.f32_array((n_nodes, 2))
    baked = b.u8() == 1
    baked_global = baked_local = None
    if baked:
        baked_global = b.f32_array((n_nodes, dim))
        n_local = _checked(b.u32(), "baked vertex")
        baked_local = b.f32_array((n_local, dim))
        if n_local != n_verts:
            raise InvariantViolation("baked feature count != vertex count")
    return Layer(id=lid, role=role, mean_depth=depth, boundary=boundary,
                 mesh=mesh, grid=grid, bbox=bbox, global_nodes=nodes,
                 baked=baked, baked_global=baked_global,
                 baked_local=baked_local)
