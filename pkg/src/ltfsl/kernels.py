"""Hot-kernel dispatch.

Imports the compiled ``_ckernels`` extension when it is available and falls
back to the numpy implementations otherwise. Set ``LTFSL_PURE_PYTHON=1`` to
force the fallback. ``BACKEND`` names the active implementation.
"""
import os

from ltfsl import _pykernels

try:
    if os.environ.get("LTFSL_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from ltfsl import _ckernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

logsumexp_rows = _impl.logsumexp_rows
log_softmax_rows = _impl.log_softmax_rows
softmax_xent = _impl.softmax_xent
focal_xent = _impl.focal_xent
sq_euclidean_matrix = _impl.sq_euclidean_matrix
cosine_matrix = _impl.cosine_matrix


def available_backends():
    """Return ``{name: module}`` for every importable backend."""
    out = {"python": _pykernels}
    try:
        from ltfsl import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
