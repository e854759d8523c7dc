"""Visual Turing Test backend: item pools, session service, reporting."""

from .pool import VttPoolItem, build_pool, load_pool, render_center_slices
from .service import create_app

__all__ = ["VttPoolItem", "build_pool", "load_pool", "render_center_slices", "create_app"]
