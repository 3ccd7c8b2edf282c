"""Kernel backend selection.

The compiled extension is used when it imports; otherwise, or when
``CHAINREC_KERNELS=python`` is set, the numpy implementation is used.
"""

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("CHAINREC_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback


def match_forward(phat, qhat, H, keep=None, scale=1.0, num_threads=1, backend=None):
    impl = _pick(backend)
    return impl.match_forward(phat, qhat, H, keep, scale, num_threads)


def match_backward(phat, qhat, H, keep, scale, arg, dR1, backend=None):
    impl = _pick(backend)
    return impl.match_backward(phat, qhat, H, keep, scale, arg, dR1)


def available_backends():
    out = ["python"]
    if BACKEND == "compiled" or _compiled() is not None:
        out.append("compiled")
    return out


def _compiled():
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels


def _pick(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _fallback
    if backend == "compiled":
        mod = _compiled()
        if mod is None:
            raise RuntimeError("compiled kernels are not built")
        return mod
    raise ValueError(f"unknown kernel backend {backend!r}")
