"""Backend selection for the scalar hot kernels.

The compiled extension ``evimr._ckernels`` is used when it imports cleanly;
otherwise (or when ``EVIMR_PURE_PYTHON=1``) the numpy fallback in
``evimr._pykernels`` is used. Both expose the same functions.
"""

import os

from evimr import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("EVIMR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from evimr import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

lgamma = _impl.lgamma
digamma = _impl.digamma
nig_nll = _impl.nig_nll
nig_nll_grad = _impl.nig_nll_grad
iou_1d = _impl.iou_1d
nms = _impl.nms
envelope_ap = _impl.envelope_ap


def backends():
    """Return ``{name: module}`` for every importable kernel backend."""
    found = {"python": _pykernels}
    try:
        from evimr import _ckernels
        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
