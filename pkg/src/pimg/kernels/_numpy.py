"""Reference numpy implementations of the hot kernels.

These are the semantic ground truth; the numba variants in ``_numba`` must
match them exactly (same iteration order for the sequential solver).
"""

import numpy as np

_CHUNK = 2048


def nearest_neighbor(query, pts):
    """For each query point return (index, squared distance) of its nearest
    neighbor in ``pts``.  Ties resolve to the lowest index."""
    query = np.asarray(query, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    n = query.shape[0]
    idx = np.empty(n, dtype=np.int64)
    d2 = np.empty(n, dtype=np.float64)
    for s in range(0, n, _CHUNK):
        q = query[s : s + _CHUNK]
        diff = q[:, None, :] - pts[None, :, :]
        dist = np.einsum("ijk,ijk->ij", diff, diff)
        best = np.argmin(dist, axis=1)
        idx[s : s + _CHUNK] = best
        d2[s : s + _CHUNK] = dist[np.arange(len(q)), best]
    return idx, d2


def point_in_polygon(poly, pts, eps=1e-12):
    """Nonzero-winding containment test; points on an edge count as inside."""
    poly = np.asarray(poly, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    x = pts[:, 0][:, None]
    y = pts[:, 1][:, None]
    x0 = poly[:, 0][None, :]
    y0 = poly[:, 1][None, :]
    x1 = np.roll(poly[:, 0], -1)[None, :]
    y1 = np.roll(poly[:, 1], -1)[None, :]

    # winding number by signed crossings of the upward/downward edges
    cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0)
    up = (y0 <= y) & (y1 > y) & (cross > 0)
    down = (y0 > y) & (y1 <= y) & (cross < 0)
    wn = up.sum(axis=1) - down.sum(axis=1)
    inside = wn != 0

    # boundary: point within eps of a segment
    ex = x1 - x0
    ey = y1 - y0
    L2 = ex * ex + ey * ey
    t = np.clip(((x - x0) * ex + (y - y0) * ey) / np.maximum(L2, 1e-300), 0.0, 1.0)
    dx = x0 + t * ex - x
    dy = y0 + t * ey - y
    on_edge = ((dx * dx + dy * dy) <= eps).any(axis=1)
    return inside | on_edge


def locate_in_triangles(verts, tris, pts, bucket_start, bucket_items, nx, ny,
                        bx0, by0, bw, bh, tol=1e-9):
    """Point location against a triangle soup via a uniform bucket grid.

    ``bucket_items`` holds triangle indices sorted ascending within each
    bucket so that containment ties resolve to the lowest triangle index.
    Returns (tri_index[p] with -1 for not covered, barycentric[p,3]).
    """
    pts = np.asarray(pts, dtype=np.float64)
    p = pts.shape[0]
    out_t = np.full(p, -1, dtype=np.int64)
    out_b = np.zeros((p, 3), dtype=np.float64)
    for i in range(p):
        x, y = pts[i, 0], pts[i, 1]
        cx = int((x - bx0) / bw) if bw > 0 else 0
        cy = int((y - by0) / bh) if bh > 0 else 0
        if cx < 0 or cx >= nx or cy < 0 or cy >= ny:
            continue
        b = cy * nx + cx
        for k in range(bucket_start[b], bucket_start[b + 1]):
            t = bucket_items[k]
            ia, ib, ic = tris[t]
            ax, ay = verts[ia]
            bx, by = verts[ib]
            cxx, cyy = verts[ic]
            det = (bx - ax) * (cyy - ay) - (cxx - ax) * (by - ay)
            if det == 0.0:
                continue
            l1 = ((bx - x) * (cyy - y) - (cxx - x) * (by - y)) / det
            l2 = ((cxx - x) * (ay - y) - (ax - x) * (cyy - y)) / det
            l3 = 1.0 - l1 - l2
            if l1 >= -tol and l2 >= -tol and l3 >= -tol:
                out_t[i] = t
                out_b[i, 0] = l1
                out_b[i, 1] = l2
                out_b[i, 2] = l3
                break
    return out_t, out_b


def pbd_project(pos, inv_mass, edges, rest, k_edge, tris, rest_area, k_area,
                iters):
    """Gauss-Seidel projection of distance (and optional area) constraints.

    Mutates ``pos`` in place.  Stiffness is applied per-iteration as
    k' = 1 - (1 - k)^(1/iters).
    """
    ke = 1.0 - (1.0 - k_edge) ** (1.0 / iters) if k_edge < 1.0 else 1.0
    ka = 1.0 - (1.0 - k_area) ** (1.0 / iters) if k_area < 1.0 else 1.0
    n_e = edges.shape[0]
    n_t = tris.shape[0]
    for _ in range(iters):
        for e in range(n_e):
            i, j = edges[e]
            wi, wj = inv_mass[i], inv_mass[j]
            wsum = wi + wj
            if wsum == 0.0:
                continue
            dx = pos[j, 0] - pos[i, 0]
            dy = pos[j, 1] - pos[i, 1]
            d = (dx * dx + dy * dy) ** 0.5
            if d < 1e-12:
                continue
            c = (d - rest[e]) / d
            sx = ke * c * dx / wsum
            sy = ke * c * dy / wsum
            pos[i, 0] += wi * sx
            pos[i, 1] += wi * sy
            pos[j, 0] -= wj * sx
            pos[j, 1] -= wj * sy
        for t in range(n_t):
            i, j, k = tris[t]
            wi, wj, wk = inv_mass[i], inv_mass[j], inv_mass[k]
            ax, ay = pos[i]
            bx, by = pos[j]
            cx, cy = pos[k]
            area = 0.5 * ((bx - ax) * (cy - ay) - (cx - ax) * (by - ay))
            c = area - rest_area[t]
            # gradients of signed area w.r.t. each vertex
            gax, gay = 0.5 * (by - cy), 0.5 * (cx - bx)
            gbx, gby = 0.5 * (cy - ay), 0.5 * (ax - cx)
            gcx, gcy = 0.5 * (ay - by), 0.5 * (bx - ax)
            denom = (wi * (gax * gax + gay * gay)
                     + wj * (gbx * gbx + gby * gby)
                     + wk * (gcx * gcx + gcy * gcy))
            if denom < 1e-18:
                continue
            s = ka * c / denom
            pos[i, 0] -= s * wi * gax
            pos[i, 1] -= s * wi * gay
            pos[j, 0] -= s * wj * gbx
            pos[j, 1] -= s * wj * gby
            pos[k, 0] -= s * wk * gcx
            pos[k, 1] -= s * wk * gcy
