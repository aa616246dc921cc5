"""Position-based dynamics over a layer's coarse proxy mesh.

Level-1 vertices are the simulated particles (pixel coordinates); every
other node — fine-level vertices, boundary control points, global nodes —
is embedded barycentrically in a level-1 triangle and reconstructed from
the deformed particles each frame.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from . import kernels, meshing, render
from .errors import UnfittedLayer, UnknownParticle

DEFAULT_DT = 1.0 / 60.0
DEFAULT_SUBSTEPS = 4
DEFAULT_ITERS = 10
DEFAULT_DAMPING = 0.995
DEFAULT_GRAVITY = (0.0, 9.8)   # normalized units/s^2; scaled by doc height
DIST_STIFFNESS = 1.0
AREA_STIFFNESS = 0.5


@dataclass
class SimState:
    pos: np.ndarray          # (n, 2) pixel coords
    prev: np.ndarray
    inv_mass: np.ndarray     # 0 = pinned
    edges: np.ndarray        # (e, 2) int64
    rest_len: np.ndarray
    tris: np.ndarray         # (t, 3) int64; empty disables area constraints
    rest_area: np.ndarray
    gravity: np.ndarray      # pixel units/s^2
    dt: float = DEFAULT_DT
    substeps: int = DEFAULT_SUBSTEPS
    solver_iters: int = DEFAULT_ITERS
    damping: float = DEFAULT_DAMPING
    k_dist: float = DIST_STIFFNESS
    k_area: float = AREA_STIFFNESS
    pins: dict = field(default_factory=dict)     # particle -> target (px)
    drags: dict = field(default_factory=dict)    # transient pins
    saved_mass: dict = field(default_factory=dict)


@dataclass
class Embedding:
    """Barycentric anchors of all non-simulated nodes in level-1 triangles.

    Slots: fine-level mesh vertices (beyond the level-1 set), the boundary
    control points, and the global nodes.  Weights are allowed outside the
    simplex for nodes that sit outside the mesh (control handles): the same
    triangle frame extrapolates them affinely.
    """

    n_level1: int
    fine_tri: np.ndarray
    fine_bary: np.ndarray
    ctrl_tri: np.ndarray
    ctrl_bary: np.ndarray
    node_tri: np.ndarray
    node_bary: np.ndarray


def _level1_vertex_count(mesh):
    tris = np.asarray(mesh.triangles_by_level[0], np.int64)
    return int(tris.max()) + 1


def _unique_edges(tris):
    tris = np.asarray(tris, np.int64)
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


def _embed(pts, mesh, level1_tris, verts):
    """(tri index, bary) per point; uncovered points get extrapolated
    barycentrics from their nearest triangle."""
    tri_idx, bary = meshing.locate(mesh, pts, 1)
    miss = np.nonzero(tri_idx < 0)[0]
    if len(miss):
        cent = verts[level1_tris].mean(axis=1)
        near, _ = kernels.nearest_neighbor(pts[miss], cent)
        for p, t in zip(miss, near):
            a, b, c = verts[level1_tris[t]]
            m = np.array([[b[0] - a[0], c[0] - a[0]],
                          [b[1] - a[1], c[1] - a[1]]])
            l23 = np.linalg.solve(m, pts[p] - a)
            bary[p] = [1.0 - l23.sum(), l23[0], l23[1]]
            tri_idx[p] = t
    return tri_idx, bary


def build_sim(doc, layer_id, dt=DEFAULT_DT, substeps=DEFAULT_SUBSTEPS,
              solver_iters=DEFAULT_ITERS, damping=DEFAULT_DAMPING,
              gravity=DEFAULT_GRAVITY, area_constraints=True,
              k_dist=DIST_STIFFNESS, k_area=AREA_STIFFNESS):
    """Simulation state + embedding for one fitted layer."""
    lay = doc.layer_by_id(layer_id)
    if not lay.baked:
        raise UnfittedLayer(f"layer {layer_id} is not fitted/baked")
    scale = np.array([doc.width, doc.height], dtype=np.float64)
    verts = lay.mesh.vertices.astype(np.float64)
    tris1 = np.asarray(lay.mesh.triangles_by_level[0], np.int64)
    n1 = _level1_vertex_count(lay.mesh)
    pos = verts[:n1] * scale

    edges = _unique_edges(tris1)
    rest = np.linalg.norm(pos[edges[:, 0]] - pos[edges[:, 1]], axis=1)
    tv = pos[tris1]
    rest_area = 0.5 * ((tv[:, 1, 0] - tv[:, 0, 0]) * (tv[:, 2, 1] - tv[:, 0, 1])
                       - (tv[:, 2, 0] - tv[:, 0, 0])
                       * (tv[:, 1, 1] - tv[:, 0, 1]))
    state = SimState(
        pos=pos.copy(), prev=pos.copy(),
        inv_mass=np.ones(n1), edges=edges, rest_len=rest,
        tris=tris1 if area_constraints else np.empty((0, 3), np.int64),
        rest_area=rest_area if area_constraints else np.empty(0),
        gravity=np.asarray(gravity, dtype=np.float64) * doc.height,
        dt=dt, substeps=substeps, solver_iters=solver_iters,
        damping=damping, k_dist=k_dist, k_area=k_area)

    fine = verts[n1:]
    fine_tri, fine_bary = _embed(fine, lay.mesh, tris1, verts) \
        if len(fine) else (np.empty(0, np.int64), np.empty((0, 3)))
    ctrl = lay.boundary.points.astype(np.float64)
    ctrl_tri, ctrl_bary = _embed(ctrl, lay.mesh, tris1, verts)
    nodes = lay.global_nodes.astype(np.float64) / scale
    node_tri, node_bary = _embed(nodes, lay.mesh, tris1, verts)
    emb = Embedding(n_level1=n1, fine_tri=fine_tri, fine_bary=fine_bary,
                    ctrl_tri=ctrl_tri, ctrl_bary=ctrl_bary,
                    node_tri=node_tri, node_bary=node_bary)
    return state, emb


def step(state: SimState) -> SimState:
    """Advance one frame (substeps x constraint projection)."""
    s = state
    dt_sub = s.dt / s.substeps
    inv_mass = s.inv_mass.copy()
    for p in list(s.pins) + list(s.drags):
        inv_mass[p] = 0.0
    for _ in range(s.substeps):
        for p, target in {**s.pins, **s.drags}.items():
            s.pos[p] = target
            s.prev[p] = target
        vel = (s.pos - s.prev) * s.damping
        pred = s.pos + vel
        pred += s.gravity * dt_sub * dt_sub
        pred[inv_mass == 0.0] = s.pos[inv_mass == 0.0]
        s.prev = s.pos
        s.pos = pred
        kernels.pbd_project(s.pos, inv_mass, s.edges, s.rest_len, s.k_dist,
                            s.tris, s.rest_area, s.k_area, s.solver_iters)
        for p, target in {**s.pins, **s.drags}.items():
            s.pos[p] = target
    return s


def pin(state: SimState, particle, target):
    if not 0 <= particle < len(state.pos):
        raise UnknownParticle(f"no particle {particle}")
    state.pins[int(particle)] = np.asarray(target, dtype=np.float64)


def unpin(state: SimState, particle):
    state.pins.pop(int(particle), None)


def apply_drag(state: SimState, particle, target):
    """Temporarily pin a particle to a target position (until clear_drag)."""
    if not 0 <= particle < len(state.pos):
        raise UnknownParticle(f"no particle {particle}")
    state.drags[int(particle)] = np.asarray(target, dtype=np.float64)


def clear_drag(state: SimState, particle=None):
    if particle is None:
        state.drags.clear()
    else:
        state.drags.pop(int(particle), None)


def nearest_particle(state: SimState, target_px) -> int:
    idx, _ = kernels.nearest_neighbor(
        np.atleast_2d(np.asarray(target_px, dtype=np.float64)), state.pos)
    return int(idx[0])


def reconstruct(doc, layer_id, state: SimState, emb: Embedding):
    """Deformed (vertices, global nodes, boundary control points) in
    normalized coords for render."""
    lay = doc.layer_by_id(layer_id)
    scale = np.array([doc.width, doc.height], dtype=np.float64)
    p_norm = state.pos / scale
    verts = lay.mesh.vertices.astype(np.float64).copy()
    verts[: emb.n_level1] = p_norm
    tris1 = np.asarray(lay.mesh.triangles_by_level[0], np.int64)
    if len(emb.fine_tri):
        anchors = p_norm[tris1[emb.fine_tri]]          # (k, 3, 2)
        verts[emb.n_level1 :] = np.einsum("kj,kjd->kd", emb.fine_bary, anchors)
    nodes = np.einsum("kj,kjd->kd", emb.node_bary, p_norm[tris1[emb.node_tri]])
    ctrl = np.einsum("kj,kjd->kd", emb.ctrl_bary, p_norm[tris1[emb.ctrl_tri]])
    return verts, nodes, ctrl


def frame(doc, layer_id, state: SimState, emb: Embedding):
    """Render the document with the simulated layer's deformed geometry."""
    verts, nodes, ctrl = reconstruct(doc, layer_id, state, emb)
    img, reports = render.render_deformed(doc,
                                          {layer_id: (verts, nodes, ctrl)})
    return img, reports
