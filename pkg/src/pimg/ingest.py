"""Input loading and layer ordering: image, per-instance masks, optional depth."""

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DimensionMismatch, EmptyMask

MIN_MASK_PIXELS = 16


@dataclass
class RasterImage:
    data: np.ndarray  # (H, W, 3) float32 in [0, 1]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError("image data must be (H, W, 3)")

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]


@dataclass
class LayerMask:
    bits: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def height(self):
        return self.bits.shape[0]


@dataclass
class DepthMap:
    values: np.ndarray  # (H, W) float, larger = farther

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[0]


@dataclass
class LayerPlanEntry:
    source_index: int  # position in the input mask list; -1 for background
    mean_depth: float
    mask: LayerMask
    is_background: bool = False


def load_image(path) -> RasterImage:
    img = Image.open(path).convert("RGB")
    return RasterImage(np.asarray(img, dtype=np.float32) / 255.0)


def save_image(img: RasterImage, path):
    arr = np.clip(np.rint(img.data * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def load_mask(path) -> LayerMask:
    img = Image.open(path).convert("L")
    return LayerMask(np.asarray(img) > 127)


def load_depth(path) -> DepthMap:
    img = Image.open(path)
    return DepthMap(np.asarray(img, dtype=np.float64))


def load_mask_dir(path) -> list[LayerMask]:
    """Masks named layer_###.png, sorted by their numeric suffix."""
    files = []
    for p in Path(path).iterdir():
        m = re.fullmatch(r"layer_(\d+)\.png", p.name)
        if m:
            files.append((int(m.group(1)), p))
    files.sort()
    return [load_mask(p) for _, p in files]


def order_layers(masks, depth: DepthMap | None = None) -> list[LayerPlanEntry]:
    """Foregrounds sorted by ascending mean depth over their true pixels
    (ties by input index), a synthetic full-frame background appended.
    Without depth, order falls back to descending mask area."""
    if not masks:
        raise EmptyMask("need at least one mask")
    h, w = masks[0].bits.shape
    for k, m in enumerate(masks):
        if m.bits.shape != (h, w):
            raise DimensionMismatch(f"mask {k} is {m.bits.shape}, expected {(h, w)}")
        if m.bits.sum() < MIN_MASK_PIXELS:
            raise EmptyMask(f"mask {k} has fewer than {MIN_MASK_PIXELS} true pixels")
    if depth is not None and depth.values.shape != (h, w):
        raise DimensionMismatch("depth map dimensions do not match the masks")

    if depth is not None:
        means = [float(depth.values[m.bits].mean()) for m in masks]
        order = sorted(range(len(masks)), key=lambda k: (means[k], k))
    else:
        areas = [int(m.bits.sum()) for m in masks]
        order = sorted(range(len(masks)), key=lambda k: (-areas[k], k))
        means = {k: float(r) for r, k in enumerate(order)}
        means = [means[k] for k in range(len(masks))]

    plan = [LayerPlanEntry(k, means[k], masks[k]) for k in order]
    bg_depth = max(means) + 1.0 if means else 1.0
    plan.append(LayerPlanEntry(-1, bg_depth, LayerMask(np.ones((h, w), bool)),
                               is_background=True))
    return plan


_MOORE = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


def extract_boundary_points(mask: LayerMask) -> np.ndarray:
    """Ordered outer contour of the largest 8-connected component via Moore
    boundary tracing.  Returns (n, 2) pixel-center coordinates (x, y)."""
    bits = mask.bits
    if bits.sum() < MIN_MASK_PIXELS:
        raise EmptyMask("mask has too few true pixels")
    labels, n = ndimage.label(bits, structure=np.ones((3, 3), int))
    if n > 1:
        sizes = ndimage.sum_labels(bits, labels, index=np.arange(1, n + 1))
        comp = labels == (int(np.argmax(sizes)) + 1)
    else:
        comp = bits
    h, w = comp.shape

    def on(r, c):
        return 0 <= r < h and 0 <= c < w and comp[r, c]

    rs, cs = np.nonzero(comp)
    start = (int(rs[0]), int(cs[0]))  # topmost, then leftmost

    contour = [start]
    if comp.sum() == 1:
        return _to_centers(contour)

    def advance(cur, back):
        """Clockwise Moore scan around ``cur`` starting after ``back``;
        returns (next true pixel, its backtrack) or (None, None)."""
        k0 = _MOORE.index((back[0] - cur[0], back[1] - cur[1]))
        prev = back
        for s in range(1, 9):
            d = _MOORE[(k0 + s) % 8]
            cand = (cur[0] + d[0], cur[1] + d[1])
            if on(*cand):
                return cand, prev
            prev = cand
        return None, None

    # backtrack starts one step west of the start pixel (false by choice of start)
    cur, back = start, (start[0], start[1] - 1)
    seen = {(cur, back)}
    while True:
        nxt, nback = advance(cur, back)
        if nxt is None:
            break  # isolated pixel
        cur, back = nxt, nback
        if (cur, back) in seen:
            break
        seen.add((cur, back))
        if cur != start:
            contour.append(cur)
    # drop consecutive duplicates introduced by revisited pixels at 1-px necks
    dedup = [contour[0]]
    for p in contour[1:]:
        if p != dedup[-1]:
            dedup.append(p)
    return _to_centers(dedup)


def _to_centers(contour):
    arr = np.array(contour, dtype=np.float64)
    # (row, col) -> (x, y) pixel centers
    return np.stack([arr[:, 1] + 0.5, arr[:, 0] + 0.5], axis=1)
