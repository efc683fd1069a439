"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``SRFIELD_PURE_PYTHON=1`` to force the numpy path.
"""

import os

from . import _kernels_py

if os.environ.get("SRFIELD_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND
render_forward = _impl.render_forward
render_backward = _impl.render_backward
splat_zbuffer = _impl.splat_zbuffer
