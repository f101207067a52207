"""Hot kernels: compiled extension when available, numpy otherwise.

Set ``RIGIDFLOW_PURE_PYTHON=1`` to force the numpy versions.
"""
import os

from . import _kernels_py

BACKEND = "python"
cutoff_derivatives = _kernels_py.cutoff_derivatives
lambda_derivs = _kernels_py.lambda_derivs
flow_rhs = _kernels_py.flow_rhs
velocity_element_matrices = _kernels_py.velocity_element_matrices

if os.environ.get("RIGIDFLOW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        BACKEND = "cython"
        lambda_derivs = _compiled.lambda_derivs
        flow_rhs = _compiled.flow_rhs
        velocity_element_matrices = _compiled.velocity_element_matrices
