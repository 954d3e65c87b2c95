"""Tree kernels: compiled core with a numpy fallback.

The compiled module is used when it imports cleanly.  Setting
``TOKDPO_PURE_PYTHON=1`` in the environment forces the fallback.
"""

import os

from . import _pytree

if os.environ.get("TOKDPO_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pytree
else:
    try:
        from . import _ctree as _impl
    except ImportError:
        _impl = _pytree

BACKEND = "cython" if _impl is not _pytree else "python"

soft_backup = _impl.soft_backup
soft_value = _impl.soft_value
bellman_invert = _impl.bellman_invert
log_softmax = _impl.log_softmax
path_sums = _impl.path_sums
subtree_scatter = _impl.subtree_scatter


def compiled():
    """The compiled module, or ``None`` when it is not built."""
    try:
        from . import _ctree
    except ImportError:
        return None
    return _ctree


__all__ = [
    "BACKEND",
    "bellman_invert",
    "compiled",
    "log_softmax",
    "path_sums",
    "soft_backup",
    "soft_value",
    "subtree_scatter",
]
