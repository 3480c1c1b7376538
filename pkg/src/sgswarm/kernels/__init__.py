"""Kernel backend selection.

The compiled extension is used when it imported cleanly; otherwise the
NumPy implementation takes over. Set SGSWARM_PURE=1 to force the fallback
(useful for benchmarking and for debugging the extension).
"""

import os

from . import pure

OUT_NONE = pure.OUT_NONE
OUT_TANH = pure.OUT_TANH
LEAKY_SLOPE = pure.LEAKY_SLOPE

if os.environ.get("SGSWARM_PURE", "") not in ("", "0"):
    _impl = pure
else:
    try:
        from . import _speedups as _impl
    except ImportError:
        _impl = pure

mlp_forward = _impl.mlp_forward
mlp_forward_cached = _impl.mlp_forward_cached
mlp_backward = _impl.mlp_backward
sgd_step = _impl.sgd_step
adam_step = _impl.adam_step


def backend_name():
    return "compiled" if _impl is not pure else "pure"


def get_backends():
    """All importable backends, for equivalence tests and benchmarks."""
    out = {"pure": pure}
    try:
        from . import _speedups
        out["compiled"] = _speedups
    except ImportError:
        pass
    return out
