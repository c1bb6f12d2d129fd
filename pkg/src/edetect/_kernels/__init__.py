"""Hot trajectory kernels with backend selection at import time.

The compiled Cython extension (``_core``) is preferred; the pure-NumPy
fallback (``_fallback``) is used when the extension is missing or when
``EDETECT_BACKEND=python`` is set.  ``benchmarks/bench_kernels.py``
compares the two.
"""

import os

from . import _fallback

if os.environ.get("EDETECT_BACKEND", "").lower() == "python":
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _core as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

sr_path_log = _impl.sr_path_log
cusum_path_log = _impl.cusum_path_log
conformal_pvalues = _impl.conformal_pvalues
additive_sign_sr_path = _impl.additive_sign_sr_path

__all__ = [
    "BACKEND",
    "sr_path_log",
    "cusum_path_log",
    "conformal_pvalues",
    "additive_sign_sr_path",
]
