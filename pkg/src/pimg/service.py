"""Local editor backend: HTTP control plane + binary frame streaming.

One writer per session; every mutating endpoint pushes an undo entry and
bumps the session's version token.  Frames go out over a persistent
WebSocket as a 16-byte header (version u64, width u32, height u32,
little-endian) followed by a PNG payload.
"""

import asyncio
import copy
import io
import struct
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from PIL import Image

from . import animate, boundary, document, edit, render
from .document import bbox_from_geometry
from .errors import PimgError

UNDO_LIMIT = 64
MIN_RENDER_INTERVAL = 0.1   # ≤ 10 renders/s per session


@dataclass
class Session:
    doc: object
    version: int = 0
    undo_stack: list = field(default_factory=list)
    subscribers: list = field(default_factory=list)
    last_render: float = 0.0
    frames_sent: int = 0
    sim: object = None          # (layer_id, SimState, Embedding)
    sim_task: object = None


def frame_header(version, w, h) -> bytes:
    return struct.pack("<QII", version, w, h)


def encode_frame(img, version) -> bytes:
    arr = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="PNG")
    h, w = img.data.shape[:2]
    return frame_header(version, w, h) + buf.getvalue()


def create_app() -> FastAPI:
    app = FastAPI(title="pimg editor service")
    sessions: dict[str, Session] = {}

    def get_session(sid) -> Session:
        if sid not in sessions:
            raise HTTPException(status_code=404, detail="no such session")
        return sessions[sid]

    def push_undo(s: Session):
        s.undo_stack.append(copy.deepcopy(s.doc))
        if len(s.undo_stack) > UNDO_LIMIT:
            s.undo_stack.pop(0)

    async def broadcast(s: Session, force=False):
        """Render + send the current document state, rate-limited."""
        now = time.monotonic()
        if not force and now - s.last_render < MIN_RENDER_INTERVAL:
            return
        s.last_render = now
        if not s.subscribers:
            return
        if s.sim is not None:
            layer_id, state, emb = s.sim
            img, _ = animate.frame(s.doc, layer_id, state, emb)
        else:
            img = render.render_image(s.doc)
        payload = encode_frame(img, s.version)
        dead = []
        for ws in s.subscribers:
            try:
                await ws.send_bytes(payload)
            except Exception:
                dead.append(ws)
        for ws in dead:
            s.subscribers.remove(ws)
        s.frames_sent += 1

    @app.post("/session")
    async def open_session(body: dict):
        path = body.get("doc")
        if not path:
            raise HTTPException(status_code=400, detail="missing doc path")
        try:
            with open(path, "rb") as f:
                doc = document.deserialize(f.read())
        except (OSError, PimgError) as e:
            raise HTTPException(status_code=400, detail=str(e))
        sid = uuid.uuid4().hex
        sessions[sid] = Session(doc=doc)
        return {"session": sid, "version": 0,
                "width": doc.width, "height": doc.height}

    @app.get("/session/{sid}/geometry")
    async def geometry(sid: str):
        s = get_session(sid)
        layers = []
        scale = np.array([s.doc.width, s.doc.height], dtype=np.float64)
        for lay in s.doc.layers:
            tris = np.asarray(lay.mesh.triangles_by_level[0]).tolist()
            n1 = int(np.asarray(
                lay.mesh.triangles_by_level[0]).max()) + 1 if tris else 0
            layers.append({
                "id": lay.id,
                "role": lay.role,
                "control_points": lay.boundary.points.astype(float).tolist(),
                "bbox": (lay.bbox.astype(np.float64) / scale).tolist(),
                "mesh_level1_vertices":
                    lay.mesh.vertices[:n1].astype(float).tolist(),
                "mesh_level1_triangles": tris,
            })
        return {"version": s.version, "layers": layers}

    def check_version(s: Session, body):
        if "version" in body and body["version"] != s.version:
            raise HTTPException(status_code=409, detail="stale version token")

    @app.post("/session/{sid}/edit")
    async def apply_edit(sid: str, body: dict):
        s = get_session(sid)
        check_version(s, body)
        try:
            if body.get("kind") == "move_control_point":
                new_doc = _move_control_point(s.doc, body)
            else:
                new_doc = edit.apply_op(s.doc, edit.EditOp.from_json(body))
        except (PimgError, KeyError, ValueError, TypeError) as e:
            raise HTTPException(status_code=400, detail=str(e))
        push_undo(s)
        s.doc = new_doc
        s.version += 1
        await broadcast(s)
        return {"version": s.version}

    @app.post("/session/{sid}/undo")
    async def undo(sid: str):
        s = get_session(sid)
        if not s.undo_stack:
            raise HTTPException(status_code=400, detail="nothing to undo")
        s.doc = s.undo_stack.pop()
        s.version += 1
        await broadcast(s)
        return {"version": s.version}

    @app.post("/session/{sid}/sim")
    async def sim_control(sid: str, body: dict):
        s = get_session(sid)
        action = body.get("action")
        if action == "start":
            layer_id = body.get("layer")
            if layer_id is None:
                raise HTTPException(status_code=400, detail="missing layer")
            kwargs = {}
            if "gravity" in body:
                # applied from the very first step: setting it after start
                # would race against the background stepping loop
                kwargs["gravity"] = (
                    np.asarray(body["gravity"], dtype=np.float64)
                    * s.doc.height)
            try:
                state, emb = animate.build_sim(s.doc, int(layer_id), **kwargs)
            except PimgError as e:
                raise HTTPException(status_code=400, detail=str(e))
            s.sim = (int(layer_id), state, emb)
            s.sim_task = asyncio.create_task(_sim_loop(s))
            return {"ok": True}
        if action == "stop":
            if s.sim is None:
                raise HTTPException(status_code=400, detail="no active sim")
            if s.sim_task:
                s.sim_task.cancel()
                s.sim_task = None
            layer_id, state, emb = s.sim
            push_undo(s)
            s.doc = _commit_pose(s.doc, layer_id, state, emb)
            s.sim = None
            s.version += 1
            await broadcast(s)
            return {"version": s.version}
        if s.sim is None:
            raise HTTPException(status_code=400, detail="no active sim")
        layer_id, state, emb = s.sim
        if action == "drag":
            target = np.array([body["x"], body["y"]], dtype=np.float64)
            pid = animate.nearest_particle(state, target)
            animate.apply_drag(state, pid, target)
            return {"ok": True, "particle": pid}
        if action == "release":
            animate.clear_drag(state)
            return {"ok": True}
        if action == "pin":
            target = np.array([body["x"], body["y"]], dtype=np.float64)
            pid = animate.nearest_particle(state, target)
            animate.pin(state, pid, target)
            return {"ok": True, "particle": pid}
        if action == "set_gravity":
            state.gravity = (np.asarray(body["gravity"], dtype=np.float64)
                             * s.doc.height)
            return {"ok": True}
        if action == "step":
            frames = int(body.get("frames", 1))
            for _ in range(frames):
                animate.step(state)
            await broadcast(s)
            return {"ok": True}
        raise HTTPException(status_code=400, detail=f"unknown action {action}")

    async def _sim_loop(s: Session):
        try:
            while s.sim is not None:
                _, state, _ = s.sim
                animate.step(state)
                await broadcast(s)
                await asyncio.sleep(max(state.dt, MIN_RENDER_INTERVAL))
        except asyncio.CancelledError:
            pass

    @app.websocket("/session/{sid}/frames")
    async def frames(ws: WebSocket, sid: str):
        if sid not in sessions:
            await ws.close(code=4004)
            return
        s = sessions[sid]
        await ws.accept()
        s.subscribers.append(ws)
        try:
            # initial frame so subscribers always have something to show
            img = render.render_image(s.doc)
            await ws.send_bytes(encode_frame(img, s.version))
            while True:
                await ws.receive_text()   # keepalive pings; content ignored
        except WebSocketDisconnect:
            pass
        finally:
            if ws in s.subscribers:
                s.subscribers.remove(ws)

    return app


def _move_control_point(doc, body):
    lay_id = int(body["layer"])
    idx = int(body["index"])
    pos = np.asarray(body["pos"], dtype=np.float64)
    lay = doc.layer_by_id(lay_id)
    if lay.role != "foreground":
        raise PimgError("background geometry is immutable")
    if not 0 <= idx < lay.boundary.points.shape[0]:
        raise PimgError(f"control point index {idx} out of range")
    new_doc = copy.deepcopy(doc)
    tgt = new_doc.layer_by_id(lay_id)
    pts = tgt.boundary.points.astype(np.float64)
    pts[idx] = pos
    edit._rebuild_interior(tgt, boundary.BezierShape(pts.astype(np.float32)),
                           doc.width, doc.height)
    return new_doc


def _commit_pose(doc, layer_id, state, emb):
    """Freeze the simulated pose into the document geometry."""
    new_doc = copy.deepcopy(doc)
    lay = new_doc.layer_by_id(layer_id)
    verts, nodes, ctrl = animate.reconstruct(new_doc, layer_id, state, emb)
    scale = np.array([new_doc.width, new_doc.height], dtype=np.float64)
    lay.mesh.vertices = verts.astype(np.float32)
    lay.mesh.invalidate_grids()
    lay.global_nodes = (nodes * scale).astype(np.float32)
    lay.boundary = boundary.BezierShape(ctrl.astype(np.float32))
    lay.bbox = bbox_from_geometry(lay.boundary, lay.mesh,
                                  new_doc.width, new_doc.height)
    return new_doc


app = create_app()
