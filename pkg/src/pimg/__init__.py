"""Layered parametric image representation: vector boundaries, hierarchical
proxy meshes, and grid-backed implicit texture with a shared decoder."""

__version__ = "0.1.0"

from .errors import PimgError  # noqa: F401
