"""Backend selection for the hot kernels.

The compiled core is used when it imports; otherwise (or when
``SHAPEFAT_PURE_PYTHON=1``) the numpy fallback is used. ``use_backend``
switches at runtime, mainly for tests and the benchmark.
"""
import logging
import os

from . import _fallback

logger = logging.getLogger(__name__)

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _fallback}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

_active = None


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name):
    """Select ``"compiled"`` or ``"python"``; returns the previous name."""
    global _active, im2col, col2im, bn_train_forward, bn_train_backward
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {available_backends()}")
    prev = _active
    mod = _BACKENDS[name]
    im2col = mod.im2col
    col2im = mod.col2im
    bn_train_forward = mod.bn_train_forward
    bn_train_backward = mod.bn_train_backward
    _active = name
    return prev


def active_backend():
    return _active


if os.environ.get("SHAPEFAT_PURE_PYTHON", "") not in ("", "0") or _compiled is None:
    if _compiled is None:
        logger.debug("compiled kernels not built; using numpy fallback")
    use_backend("python")
else:
    use_backend("compiled")
