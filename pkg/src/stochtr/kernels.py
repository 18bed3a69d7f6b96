"""Backend selection for the renewal hot loops.

The compiled module is used when it imports; setting ``STOCHTR_PURE_PYTHON=1``
forces the fallback. ``BACKEND`` names whichever one is active.
"""

import os

from . import _pykernels

MODE_DETERMINISTIC = _pykernels.MODE_DETERMINISTIC
MODE_TWO_POINT = _pykernels.MODE_TWO_POINT

_compiled = None
if os.environ.get("STOCHTR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:  # pragma: no cover - depends on the build
        _compiled = None

if _compiled is not None:
    BACKEND = "cython"
    walk = _compiled.walk
    phi_delta = _compiled.phi_delta
else:
    BACKEND = "python"
    walk = _pykernels.walk
    phi_delta = _pykernels.phi_delta


def backends():
    """Map backend name to kernel module for every backend built here.

    Ignores ``STOCHTR_PURE_PYTHON`` so both paths can be compared.
    """
    out = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:  # pragma: no cover
        return out
    out["cython"] = _ckernels
    return out
