"""Box-linking kernel selection.

The compiled ``_linking`` extension is used when it was built; otherwise the
numpy fallback is imported. Set ``NIGHTADAPT_PURE_PYTHON=1`` to force the
fallback.
"""

import os

from nightadapt import _linking_py

BACKEND = "python"
if os.environ.get("NIGHTADAPT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from nightadapt import _linking as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _linking_py
else:
    _impl = _linking_py

link_boxes = _impl.link_boxes
normalized_distance = _impl.normalized_distance

__all__ = ["BACKEND", "link_boxes", "normalized_distance"]
