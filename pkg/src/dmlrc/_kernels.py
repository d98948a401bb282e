"""Backend selection for the coordinate-descent kernel.

The compiled extension is used when importable. Setting the environment
variable ``DMLRC_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _cd_py

if os.environ.get("DMLRC_PURE_PYTHON", "") not in ("", "0"):
    cd_path = _cd_py.cd_path
    BACKEND = "python"
else:
    try:
        from ._cd_ext import cd_path
        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        cd_path = _cd_py.cd_path
        BACKEND = "python"
