"""Backend selection for the rollout/BFGS and weight-fit kernels.

The compiled extension is used when importable; set ``MLVI_MPC_PURE_PYTHON=1``
to force the pure-Python fallback.
"""

from __future__ import annotations

import os

from mlvi_mpc import _kernels_py

BACKEND = "python"
_compiled = None

if not os.environ.get("MLVI_MPC_PURE_PYTHON"):
    try:
        from mlvi_mpc import _kernels as _compiled  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py

rotquad_rollout = _impl.rotquad_rollout
rotquad_solve = _impl.rotquad_solve
gd_fit = _impl.gd_fit


def compiled_available() -> bool:
    return _compiled is not None


def get_backend(name: str):
    """Return the kernel module for ``"cython"`` or ``"python"`` (for benchmarks and tests)."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            try:
                from mlvi_mpc import _kernels  # type: ignore[attr-defined]
            except ImportError as exc:
                raise ImportError("compiled kernels are not built") from exc
            return _kernels
        return _compiled
    raise ValueError(f"unknown backend {name!r}")
