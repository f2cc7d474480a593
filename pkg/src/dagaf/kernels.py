"""Hot-loop kernels, compiled when available.

The Cython extension ``dagaf._kernels`` is used if it was built; otherwise
(or when ``DAGAF_PURE_PYTHON=1`` is set) the numpy implementation in
``dagaf._kernels_py`` is used. Both expose the same functions.
"""
import os

from . import _kernels_py

BACKEND = "python"
gaussian_kernel_sum = _kernels_py.gaussian_kernel_sum

if os.environ.get("DAGAF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        gaussian_kernel_sum = _kernels.gaussian_kernel_sum


def backends():
    """Return ``{name: module}`` for every importable backend."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        found["cython"] = _kernels
    return found
