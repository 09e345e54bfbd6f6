"""Hot-loop kernels with backend selection at import time.

The compiled Cython core is used when present; otherwise the numpy fallback
takes over. Both backends are bit-identical by contract (see the parity
tests), so the choice only affects speed. Set FINEFLOW_NO_EXT=1 to force the
numpy backend, e.g. for benchmarking.
"""

import os

from . import _npk

if os.environ.get("FINEFLOW_NO_EXT"):
    _impl = _npk
    BACKEND = "numpy"
else:
    try:
        from . import _ck as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _npk
        BACKEND = "numpy"

im2col = _impl.im2col
col2im = _impl.col2im
warp_bilinear = _impl.warp_bilinear

__all__ = ["BACKEND", "im2col", "col2im", "warp_bilinear"]
