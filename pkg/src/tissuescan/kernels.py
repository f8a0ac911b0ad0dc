"""Kernel dispatch: compiled core when built, numpy fallback otherwise.

Set ``TISSUESCAN_PURE_PYTHON=1`` to force the fallback even when the
extension is importable (used by the benchmark and the parity tests).
"""

import logging
import os

from tissuescan import _fallback

log = logging.getLogger(__name__)

BACKEND = "python"
_impl = _fallback

if not os.environ.get("TISSUESCAN_PURE_PYTHON"):
    try:
        from tissuescan import _kernels as _impl  # noqa: F811

        BACKEND = "compiled"
    except ImportError:
        log.info("compiled kernels unavailable, using numpy fallback")
        _impl = _fallback

ncc_surface = _impl.ncc_surface
raycast_heightfield = _impl.raycast_heightfield
hsv_box_mask = _impl.hsv_box_mask
shade_image = _impl.shade_image

__all__ = ["BACKEND", "ncc_surface", "raycast_heightfield", "hsv_box_mask", "shade_image"]
