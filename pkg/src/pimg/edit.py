"""Instance-level document edits.

All operations are pure document -> document functions; the input is never
mutated.  Geometry edits move the boundary control points and rebuild the
interior nodes from mean-value coordinates over the flattened boundary, so
texture (baked node features) rides along with the geometry.
"""

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from . import boundary, meshing, texture
from .document import ROLE_FOREGROUND, bbox_from_geometry
from .errors import (BackgroundImmutable, MissingGrid, PimgError,
                     SingularTransform, UnfittedDocument)

MVC_CHORD_TOL = 0.5 / 512  # cage flattening tolerance (normalized)


@dataclass
class EditOp:
    kind: str                       # affine|remove|duplicate|swap_texture|reorder
    layer: int
    T: np.ndarray | None = None     # (2, 2)
    t: np.ndarray | None = None     # (2,) normalized document units
    source: int | None = None       # swap_texture donor
    index: int | None = None        # reorder target position

    def to_json(self) -> dict:
        d = {"kind": self.kind, "layer": self.layer}
        if self.T is not None:
            d["T"] = np.asarray(self.T).tolist()
        if self.t is not None:
            d["t"] = np.asarray(self.t).tolist()
        if self.source is not None:
            d["source"] = self.source
        if self.index is not None:
            d["index"] = self.index
        return d

    @staticmethod
    def from_json(d: dict) -> "EditOp":
        kind = d.get("kind")
        if kind not in ("affine", "remove", "duplicate", "swap_texture",
                        "reorder"):
            raise PimgError(f"unknown edit kind {kind!r}")
        return EditOp(kind=kind, layer=int(d["layer"]),
                      T=np.asarray(d["T"], float) if "T" in d else None,
                      t=np.asarray(d["t"], float) if "t" in d else None,
                      source=d.get("source"), index=d.get("index"))


def load_ops(path) -> list:
    with open(path) as f:
        data = json.load(f)
    if isinstance(data, dict):
        data = [data]
    return [EditOp.from_json(d) for d in data]


def _foreground(doc, layer_id):
    lay = doc.layer_by_id(layer_id)
    if lay.role != ROLE_FOREGROUND:
        raise BackgroundImmutable("background geometry cannot be edited")
    return lay


def _rebuild_interior(lay, new_shape, w, h):
    """Move mesh vertices and global nodes with the boundary via MVC.

    The cage is the old flattened boundary; re-evaluating the stored weights
    on the new flattening (same per-segment counts when the segment count is
    unchanged) gives a smooth, affine-exact interior deformation.
    """
    old_counts = boundary.flatten_counts(lay.boundary, MVC_CHORD_TOL)
    cage_old = boundary.flatten_shape(lay.boundary, MVC_CHORD_TOL, old_counts)
    cage_new = boundary.flatten_shape(new_shape, MVC_CHORD_TOL, old_counts)
    verts = lay.mesh.vertices.astype(np.float64)
    W_v = meshing.mean_value_coordinates(verts, cage_old)
    new_verts = W_v @ cage_new
    scale = np.array([w, h], dtype=np.float64)
    nodes = lay.global_nodes.astype(np.float64) / scale
    W_n = meshing.mean_value_coordinates(nodes, cage_old)
    new_nodes = (W_n @ cage_new) * scale
    lay.boundary = new_shape
    lay.mesh.vertices = new_verts.astype(np.float32)
    lay.mesh.invalidate_grids()
    lay.global_nodes = new_nodes.astype(np.float32)
    lay.bbox = bbox_from_geometry(new_shape, lay.mesh, w, h)


def affine_layer(doc, layer_id, T, t):
    """Transform a foreground layer about its control-point centroid."""
    T = np.asarray(T, dtype=np.float64).reshape(2, 2)
    t = np.asarray(t, dtype=np.float64).reshape(2)
    if abs(np.linalg.det(T)) <= 1e-9:
        raise SingularTransform(f"|det T| = {abs(np.linalg.det(T)):.2e}")
    _foreground(doc, layer_id)
    if not doc.layer_by_id(layer_id).baked:
        raise UnfittedDocument("edits require baked features")
    new_doc = copy.deepcopy(doc)
    lay = new_doc.layer_by_id(layer_id)
    pts = lay.boundary.points.astype(np.float64)
    c = pts.mean(axis=0)
    new_pts = (pts - c) @ T.T + c + t
    _rebuild_interior(lay, boundary.BezierShape(new_pts.astype(np.float32)),
                      doc.width, doc.height)
    return new_doc


def remove_layer(doc, layer_id):
    _foreground(doc, layer_id)
    new_doc = copy.deepcopy(doc)
    new_doc.layers = [l for l in new_doc.layers if l.id != layer_id]
    return new_doc


def duplicate_layer(doc, layer_id, t):
    """Copy a foreground layer, translated by ``t`` (normalized units), and
    insert it directly in front of the source."""
    _foreground(doc, layer_id)
    t = np.asarray(t, dtype=np.float64).reshape(2)
    new_doc = copy.deepcopy(doc)
    src = new_doc.layer_by_id(layer_id)
    dup = copy.deepcopy(src)
    dup.id = max(l.id for l in new_doc.layers) + 1
    scale = np.array([doc.width, doc.height], dtype=np.float64)
    dup.boundary = boundary.BezierShape(
        (dup.boundary.points.astype(np.float64) + t).astype(np.float32))
    dup.mesh.vertices = (dup.mesh.vertices.astype(np.float64) + t).astype(
        np.float32)
    dup.mesh.invalidate_grids()
    dup.global_nodes = (dup.global_nodes.astype(np.float64)
                        + t * scale).astype(np.float32)
    dup.bbox = bbox_from_geometry(dup.boundary, dup.mesh,
                                  doc.width, doc.height)
    pos = new_doc.layers.index(src)
    new_doc.layers.insert(pos, dup)
    return new_doc


def swap_texture(doc, target_id, source_id):
    """Re-source the target's baked node features from the donor's grid,
    sampled at the target's own bbox-normalized node positions."""
    _foreground(doc, target_id)
    _foreground(doc, source_id)
    src = doc.layer_by_id(source_id)
    if src.grid is None or src.grid.codes.size == 0:
        raise MissingGrid(f"layer {source_id} has no feature grid")
    new_doc = copy.deepcopy(doc)
    lay = new_doc.layer_by_id(target_id)
    donor = new_doc.layer_by_id(source_id).grid
    scale = np.array([doc.width, doc.height], dtype=np.float64)
    u_nodes = texture.normalize_coord(lay.global_nodes.astype(np.float64),
                                      lay.bbox)
    u_verts = texture.normalize_coord(
        lay.mesh.vertices.astype(np.float64) * scale, lay.bbox)
    lay.baked_global = texture.grid_lookup(donor, u_nodes).astype(np.float32)
    lay.baked_local = texture.grid_lookup(donor, u_verts).astype(np.float32)
    lay.baked = True
    return new_doc


def reorder_layer(doc, layer_id, index):
    """Move a foreground layer to a new front-to-back position."""
    _foreground(doc, layer_id)
    new_doc = copy.deepcopy(doc)
    lay = new_doc.layer_by_id(layer_id)
    fgs = new_doc.foregrounds()
    fgs.remove(lay)
    fgs.insert(int(np.clip(index, 0, len(fgs))), lay)
    for rank, l in enumerate(fgs):
        l.mean_depth = float(rank)
    new_doc.layers = fgs + [new_doc.background]
    return new_doc


def external_feature_update(doc, layer_id, global_features=None,
                            local_features=None):
    """Hook for external processes (e.g. generative editors) to overwrite
    baked features directly; shapes must match the existing node sets."""
    lay = doc.layer_by_id(layer_id)
    new_doc = copy.deepcopy(doc)
    tgt = new_doc.layer_by_id(layer_id)
    if global_features is not None:
        g = np.asarray(global_features, dtype=np.float32)
        if g.shape != (lay.global_nodes.shape[0], lay.grid.dim):
            raise PimgError("global feature override has wrong shape")
        tgt.baked_global = g
    if local_features is not None:
        l = np.asarray(local_features, dtype=np.float32)
        if l.shape != (len(lay.mesh.vertices), lay.grid.dim):
            raise PimgError("local feature override has wrong shape")
        tgt.baked_local = l
    tgt.baked = True
    return new_doc


def apply_op(doc, op: EditOp):
    if op.kind == "affine":
        return affine_layer(doc, op.layer, op.T, op.t)
    if op.kind == "remove":
        return remove_layer(doc, op.layer)
    if op.kind == "duplicate":
        return duplicate_layer(doc, op.layer,
                               op.t if op.t is not None else (0.0, 0.0))
    if op.kind == "swap_texture":
        return swap_texture(doc, op.layer, op.source)
    if op.kind == "reorder":
        return reorder_layer(doc, op.layer, op.index or 0)
    raise PimgError(f"unknown edit kind {op.kind!r}")
