"""Backend selection for the Bernstein flow kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation. Set ``DEEPTRAFO_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("DEEPTRAFO_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels_c as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = _impl.BACKEND

bernstein_basis = _impl.bernstein_basis
bernstein_values = _impl.bernstein_values
slope_theta_grad = _impl.slope_theta_grad
flow_transform = _impl.flow_transform
invert_flow = _impl.invert_flow


def available_backends():
    """Map backend name to kernel module for every backend that imports."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels_c
    except ImportError:
        pass
    else:
        out["cython"] = _kernels_c
    return out
