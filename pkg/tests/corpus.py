"""Deterministic test corpus: synthetic masks and small natural crops.

Synthetic masks (square, circle, star, blob) exercise boundary fitting at
controlled curvature; the natural corpus is five 128x128 crops of stock
photographs with 2-4 generated instance masks each, used for end-to-end
reconstruction measurements.
"""

import numpy as np

from pimg import ingest

SYNTH_SIZE = 256


def _radial_mask(size, cx, cy, radius_fn):
    yy, xx = np.mgrid[0:size, 0:size]
    dx = xx + 0.5 - cx
    dy = yy + 0.5 - cy
    theta = np.arctan2(dy, dx)
    r = np.hypot(dx, dy)
    return r <= radius_fn(theta)


def synthetic_mask(kind: str, size: int = SYNTH_SIZE, seed: int = 0):
    """Boolean mask for one of: square, circle, star, blob."""
    c = size / 2.0
    if kind == "square":
        half = size * 0.28
        yy, xx = np.mgrid[0:size, 0:size]
        return (np.abs(xx + 0.5 - c) <= half) & (np.abs(yy + 0.5 - c) <= half)
    if kind == "circle":
        return _radial_mask(size, c, c, lambda t: size * 0.3)
    if kind == "star":
        r_out, r_in = size * 0.36, size * 0.16
        return _radial_mask(
            size, c, c,
            lambda t: r_in + (r_out - r_in) * (0.5 + 0.5 * np.cos(5 * t)))
    if kind == "blob":
        rng = np.random.default_rng(seed)
        amp = rng.uniform(0.03, 0.08, 4) * size
        phase = rng.uniform(0, 2 * np.pi, 4)
        return _radial_mask(
            size, c, c,
            lambda t: size * 0.27 + sum(
                a * np.cos((k + 2) * t + p)
                for k, (a, p) in enumerate(zip(amp, phase))))
    raise ValueError(f"unknown mask kind {kind!r}")


SYNTH_KINDS = ("square", "circle", "star", "blob")


def synthetic_corpus(size: int = SYNTH_SIZE):
    """Ten named masks: the four base shapes plus seeded variants."""
    out = [(k, synthetic_mask(k, size)) for k in SYNTH_KINDS]
    for seed in range(1, 7):
        out.append((f"blob{seed}", synthetic_mask("blob", size, seed=seed)))
    return out


def _blob_at(size, cx, cy, scale, seed):
    rng = np.random.default_rng(seed)
    amp = rng.uniform(0.05, 0.16, 3) * scale * size
    phase = rng.uniform(0, 2 * np.pi, 3)
    return _radial_mask(
        size, cx, cy,
        lambda t: scale * size + sum(
            a * np.cos((k + 2) * t + p)
            for k, (a, p) in enumerate(zip(amp, phase))))


_CROPS = [
    # (skimage.data name, row0, col0, crop size, [(cx, cy, scale, seed), ...])
    ("astronaut", 30, 120, 256, [(0.5, 0.4, 0.2, 11), (0.2, 0.78, 0.12, 12)]),
    ("coffee", 80, 140, 300, [(0.45, 0.5, 0.26, 21), (0.78, 0.3, 0.12, 22),
                              (0.2, 0.25, 0.11, 23)]),
    ("chelsea", 0, 80, 288, [(0.45, 0.5, 0.24, 31), (0.8, 0.75, 0.12, 32)]),
    ("immunohistochemistry", 100, 100, 300,
     [(0.35, 0.4, 0.2, 41), (0.7, 0.65, 0.14, 42), (0.2, 0.78, 0.1, 43),
      (0.8, 0.2, 0.1, 44)]),
    ("hubble_deep_field", 200, 200, 400,
     [(0.5, 0.45, 0.23, 51), (0.2, 0.2, 0.11, 52), (0.75, 0.75, 0.13, 53)]),
]

NATURAL_SIZE = 128


def natural_corpus():
    """Five (name, RasterImage, [LayerMask]) tuples at 128x128."""
    import skimage.data
    import skimage.transform

    out = []
    for name, r0, c0, cs, blobs in _CROPS:
        src = getattr(skimage.data, name)()
        crop = src[r0:r0 + cs, c0:c0 + cs].astype(np.float64) / 255.0
        img = skimage.transform.resize(
            crop, (NATURAL_SIZE, NATURAL_SIZE, 3), anti_aliasing=True)
        masks = [ingest.LayerMask(
            _blob_at(NATURAL_SIZE, cx * NATURAL_SIZE, cy * NATURAL_SIZE,
                     scale, seed))
            for cx, cy, scale, seed in blobs]
        out.append((name, ingest.RasterImage(img.astype(np.float32)), masks))
    return out


def flat_image(size=64, color=(0.3, 0.55, 0.7)):
    return ingest.RasterImage(
        np.full((size, size, 3), color, dtype=np.float32))


def two_region_image(size=64):
    """Flat background with one flat circular foreground region."""
    data = np.full((size, size, 3), (0.2, 0.5, 0.7), dtype=np.float32)
    mask = synthetic_mask("circle", size)
    data[mask] = (0.8, 0.3, 0.1)
    return ingest.RasterImage(data), ingest.LayerMask(mask)
