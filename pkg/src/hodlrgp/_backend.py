"""Select the compiled core when it is importable, else the numpy fallback.

Set ``HODLRGP_BACKEND=python`` to force the fallback.
"""
import os

from . import _pycore

core = _pycore
NAME = "python"

if os.environ.get("HODLRGP_BACKEND", "").lower() != "python":
    try:
        from . import _core as core  # noqa: F811
        NAME = "compiled"
    except ImportError:
        core = _pycore


def get(name=None):
    """Return the backend module by name (``"compiled"``/``"python"``)."""
    if name is None:
        return core
    if name == "python":
        return _pycore
    if name == "compiled":
        from . import _core
        return _core
    raise ValueError(f"unknown backend {name!r}")
