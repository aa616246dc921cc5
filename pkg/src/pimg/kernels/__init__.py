"""Hot numeric kernels with optional numba acceleration.

Every kernel has a pure-numpy implementation; when numba is importable and
the environment variable ``PIMG_NO_NUMBA`` is unset, an ``@njit``-compiled
variant is used instead.  Both paths compute identical results (fixed
iteration order, no atomics), so the flag only trades speed.
"""

import os

USE_NUMBA = os.environ.get("PIMG_NO_NUMBA", "") == ""
if USE_NUMBA:
    try:
        import numba  # noqa: F401
    except ImportError:  # pragma: no cover
        USE_NUMBA = False

if USE_NUMBA:
    from ._numba import (
        nearest_neighbor,
        point_in_polygon,
        locate_in_triangles,
        pbd_project,
    )
else:  # pragma: no cover - exercised via PIMG_NO_NUMBA test env
    from ._numpy import (
        nearest_neighbor,
        point_in_polygon,
        locate_in_triangles,
        pbd_project,
    )

__all__ = [
    "USE_NUMBA",
    "nearest_neighbor",
    "point_in_polygon",
    "locate_in_triangles",
    "pbd_project",
]
