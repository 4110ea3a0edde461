"""Selects the compiled kernels when available, else the Python ones.

Set ``NOFL_PURE_PYTHON=1`` to force the fallback.
"""

import os

if os.environ.get("NOFL_PURE_PYTHON"):
    from ._kernels_py import BACKEND, next_hole, scan_end, scan_state, try_mark
else:
    try:
        from ._kernels import BACKEND, next_hole, scan_end, scan_state, try_mark
    except ImportError:
        from ._kernels_py import BACKEND, next_hole, scan_end, scan_state, try_mark

__all__ = ["BACKEND", "next_hole", "scan_end", "scan_state", "try_mark"]
