import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import corpus  # noqa: E402

from pimg import ingest, optimize  # noqa: E402
from pimg.document import FitConfig  # noqa: E402


def small_fit_config(**kw):
    """Short schedule for structural tests (not reconstruction quality)."""
    base = dict(epochs=60, shape_epochs=300, shape_check_every=150)
    base.update(kw)
    return FitConfig(**base)


@pytest.fixture(scope="session")
def fitted_doc():
    """A small fitted two-layer document shared across structural tests."""
    image, mask = corpus.two_region_image(48)
    doc, history = optimize.fit(image, [mask], cfg=small_fit_config())
    return doc, history, image


@pytest.fixture(scope="session")
def fitted_three_layer():
    """48x48 document with two foreground layers + background."""
    size = 48
    data = np.full((size, size, 3), (0.25, 0.45, 0.65), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size]
    m1 = (xx - 15) ** 2 + (yy - 16) ** 2 < 9 ** 2
    m2 = (np.abs(xx - 34) < 7) & (np.abs(yy - 32) < 7)
    data[m1] = (0.85, 0.25, 0.2)
    data[m2] = (0.2, 0.75, 0.3)
    image = ingest.RasterImage(data)
    masks = [ingest.LayerMask(m1), ingest.LayerMask(m2)]
    doc, history = optimize.fit(image, masks, cfg=small_fit_config())
    return doc, history, image, masks
