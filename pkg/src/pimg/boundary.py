"""Closed piecewise-cubic boundary fitting.

A shape is stored as a flat loop of 3m control points; segment j reads its
four controls at indices [3j, 3j+1, 3j+2, (3j+3) mod 3m], so endpoint
sharing (closure) is structural rather than a constraint.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import EmptySet, TooFewBoundaryPoints

DEGENERATE_SEGMENT_LEN = 1e-6


@dataclass
class BezierShape:
    points: np.ndarray  # (3m, 2) float32, normalized image coords

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 2)
        if self.points.shape[0] % 3 != 0 or self.points.shape[0] < 6:
            raise ValueError("control storage must hold 3m points, m >= 2")

    @property
    def m(self) -> int:
        return self.points.shape[0] // 3

    def segment_controls(self, j: int) -> np.ndarray:
        """(4, 2) float64 control points of segment j."""
        n = self.points.shape[0]
        idx = [3 * j, 3 * j + 1, 3 * j + 2, (3 * j + 3) % n]
        return self.points[idx].astype(np.float64)

    def all_controls(self) -> np.ndarray:
        """(m, 4, 2) float64 controls for every segment."""
        return np.stack([self.segment_controls(j) for j in range(self.m)])


@dataclass
class FitReport:
    final_errors: np.ndarray
    epochs_used: int
    split_events: list = field(default_factory=list)  # (epoch, segment index)


def bernstein3(t):
    """Cubic Bernstein basis evaluated at t; shape (len(t), 4)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    u = 1.0 - t
    return np.stack([u ** 3, 3 * u * u * t, 3 * u * t * t, t ** 3], axis=1)


def eval_segment(controls, t):
    """Evaluate one cubic segment at parameter(s) t in [0, 1]."""
    controls = np.asarray(controls, dtype=np.float64)
    basis = bernstein3(t)
    out = basis @ controls
    return out[0] if np.isscalar(t) or np.ndim(t) == 0 else out


def _sample_matrix(m, t):
    """Sparse-as-dense matrix mapping the 3m control storage to the
    concatenated per-segment samples at parameters ``t`` (len k each)."""
    k = len(t)
    basis = bernstein3(t)  # (k, 4)
    M = np.zeros((m * k, 3 * m))
    for j in range(m):
        idx = [3 * j, 3 * j + 1, 3 * j + 2, (3 * j + 3) % (3 * m)]
        for o in range(4):
            M[j * k : (j + 1) * k, idx[o]] += basis[:, o]
    return M


def sample_shape(shape: BezierShape, samples_per_segment: int) -> np.ndarray:
    """Uniform-t samples over all segments, duplicated endpoints dropped;
    returns m * (samples_per_segment - 1) points."""
    if samples_per_segment < 2:
        raise ValueError("samples_per_segment must be >= 2")
    t = np.linspace(0.0, 1.0, samples_per_segment)[:-1]
    return np.concatenate(
        [eval_segment(shape.segment_controls(j), t) for j in range(shape.m)])


def chamfer_loss(b_samples, e_points):
    """Symmetric squared-nearest-neighbor loss and its gradient w.r.t. the
    curve samples.  The target set only supplies matches, never gradients."""
    b = np.asarray(b_samples, dtype=np.float64)
    e = np.asarray(e_points, dtype=np.float64)
    if b.size == 0 or e.size == 0:
        raise EmptySet("chamfer_loss requires two nonempty point sets")
    idx_be, d2_be = kernels.nearest_neighbor(b, e)
    idx_eb, d2_eb = kernels.nearest_neighbor(e, b)
    loss = d2_be.sum() + d2_eb.sum()
    grad = 2.0 * (b - e[idx_be])
    np.add.at(grad, idx_eb, 2.0 * (b[idx_eb] - e))
    return loss, grad


def _segment_errors(points, m, t_loss, e_points):
    """Per-segment sum of squared distances to the nearest contour point."""
    M = _sample_matrix(m, t_loss)
    samples = M @ points
    _, d2 = kernels.nearest_neighbor(samples, e_points)
    return d2.reshape(m, len(t_loss)).sum(axis=1)


def _init_controls(e_points, m):
    """3m control points at arc-length-uniform positions along the contour."""
    e = np.asarray(e_points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(np.vstack([e, e[:1]]), axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    targets = np.arange(3 * m) * total / (3 * m)
    idx = np.searchsorted(cum, targets, side="right") - 1
    idx = np.clip(idx, 0, len(e) - 1)
    return e[idx].copy()


def fit_shape(e_points, cfg, validate=None) -> tuple[BezierShape, FitReport]:
    """Fit an adaptive closed cubic loop to an ordered contour.

    Runs Adam on the symmetric Chamfer loss; every ``shape_check_every``
    epochs splits all segments whose error exceeds ``tau`` by inserting
    three on-curve points at t = 3/8, 1/2, 5/8, and stops early once every
    segment is below threshold.

    ``validate``, when given, is a predicate on a :class:`BezierShape`.
    The fitter snapshots the most recent state that passes it and falls
    back to that snapshot if the final curve fails — on tiny or noisy
    contours the optimizer can drive the loop into a self-crossing that
    downstream triangulation would reject.
    """
    e = np.asarray(e_points, dtype=np.float64)
    m = cfg.m_init
    if len(e) < 3 * m:
        raise TooFewBoundaryPoints(f"need >= {3 * m} contour points, got {len(e)}")
    pts = _init_controls(e, m)
    best_valid = None
    if validate is not None and validate(BezierShape(pts.astype(np.float32))):
        best_valid = pts.copy()

    t_loss = (np.arange(cfg.samples_per_segment) + 0.5) / cfg.samples_per_segment
    lr, b1, b2, eps = cfg.shape_lr, 0.9, 0.999, 1e-8
    mom = np.zeros_like(pts)
    vel = np.zeros_like(pts)
    step = 0
    M = _sample_matrix(m, t_loss)
    split_events = []
    epoch = 0
    while epoch < cfg.shape_epochs:
        epoch += 1
        samples = M @ pts
        _, grad_b = chamfer_loss(samples, e)
        grad = M.T @ grad_b
        step += 1
        mom = b1 * mom + (1 - b1) * grad
        vel = b2 * vel + (1 - b2) * grad * grad
        mhat = mom / (1 - b1 ** step)
        vhat = vel / (1 - b2 ** step)
        pts -= lr * mhat / (np.sqrt(vhat) + eps)

        if epoch % cfg.shape_check_every == 0 or epoch == cfg.shape_epochs:
            if validate is not None and validate(
                    BezierShape(pts.astype(np.float32))):
                best_valid = pts.copy()
            errs = _segment_errors(pts, m, t_loss, e)
            if errs.max() <= cfg.tau:
                break
            if epoch == cfg.shape_epochs:
                break
            new_pts = []
            for j in range(m):
                if errs[j] > cfg.tau and not _degenerate(pts, m, j):
                    ctrl = _controls_at(pts, m, j)
                    ins = eval_segment(ctrl, np.array([3 / 8, 1 / 2, 5 / 8]))
                    new_pts.append((3 * j + 2, ins))
                    split_events.append((epoch, j))
            if new_pts:
                # reversed so earlier insert positions stay valid
                for pos, ins in reversed(new_pts):
                    pts = np.insert(pts, pos, ins, axis=0)
                m = pts.shape[0] // 3
                M = _sample_matrix(m, t_loss)
                mom = np.zeros_like(pts)
                vel = np.zeros_like(pts)
                step = 0

    shape = BezierShape(points=pts.astype(np.float32))
    if (validate is not None and best_valid is not None
            and not validate(shape)):
        pts = best_valid
        m = pts.shape[0] // 3
        shape = BezierShape(points=pts.astype(np.float32))
    errs = _segment_errors(pts, m, t_loss, e)
    return shape, FitReport(final_errors=errs, epochs_used=epoch,
                            split_events=split_events)


def _controls_at(pts, m, j):
    idx = [3 * j, 3 * j + 1, 3 * j + 2, (3 * j + 3) % (3 * m)]
    return pts[idx]


def _degenerate(pts, m, j):
    ctrl = _controls_at(pts, m, j)
    return np.linalg.norm(ctrl[3] - ctrl[0]) < DEGENERATE_SEGMENT_LEN


def flatten_counts(shape: BezierShape, chord_tol: float) -> np.ndarray:
    """Per-segment sample counts such that the chords deviate from the curve
    by at most ``chord_tol`` (same units as the control points)."""
    counts = np.empty(shape.m, dtype=np.int64)
    for j in range(shape.m):
        ctrl = shape.segment_controls(j)
        k = 2
        while k < 64:
            t_mid = (np.arange(k) + 0.5) / k
            on_curve = eval_segment(ctrl, t_mid)
            a = eval_segment(ctrl, np.arange(k) / k)
            b = eval_segment(ctrl, (np.arange(k) + 1.0) / k)
            mid = 0.5 * (a + b)
            if np.linalg.norm(on_curve - mid, axis=1).max() <= chord_tol:
                break
            k *= 2
        counts[j] = k
    return counts


def flatten_shape(shape: BezierShape, chord_tol: float,
                  counts: np.ndarray | None = None) -> np.ndarray:
    """Closed polyline approximation; one vertex per chord endpoint, the
    shared segment endpoints emitted once.  Pass ``counts`` to reuse the
    sampling of a previous flattening (vertex correspondence across edits)."""
    if counts is None:
        counts = flatten_counts(shape, chord_tol)
    polys = []
    for j in range(shape.m):
        t = np.arange(counts[j]) / counts[j]
        polys.append(eval_segment(shape.segment_controls(j), t))
    return np.concatenate(polys)
