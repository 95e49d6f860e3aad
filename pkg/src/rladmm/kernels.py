"""Backend selection for the branch kernel.

The compiled extension is used when it was built; set ``RLADMM_PURE_PYTHON=1``
to force the pure-Python implementation.
"""

import os

if os.environ.get("RLADMM_PURE_PYTHON", "") not in ("", "0"):
    from . import _kernels_py as _impl
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        from . import _kernels_py as _impl

BACKEND = _impl.BACKEND
branch_eval = _impl.branch_eval
solve_branches = _impl.solve_branches
norm2 = _impl.norm2

__all__ = ["BACKEND", "branch_eval", "solve_branches", "norm2"]
