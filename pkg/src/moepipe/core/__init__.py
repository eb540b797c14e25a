"""Hot scheduling kernel, compiled when available.

``list_schedule`` comes from the Cython extension ``_listsched`` if it was
built, else from the pure-Python twin.  Set ``MOEPIPE_PURE_PYTHON=1`` to force
the fallback.  ``BACKEND`` names the selected implementation.
"""
import os

from ._listsched_py import list_schedule as list_schedule_py

list_schedule_compiled = None
if os.environ.get("MOEPIPE_PURE_PYTHON", "").strip().lower() not in {"1", "true", "yes"}:
    try:
        from ._listsched import list_schedule as list_schedule_compiled
    except ImportError:
        list_schedule_compiled = None

if list_schedule_compiled is not None:
    list_schedule = list_schedule_compiled
    BACKEND = "cython"
else:
    list_schedule = list_schedule_py
    BACKEND = "python"

__all__ = ["list_schedule", "list_schedule_py", "list_schedule_compiled", "BACKEND"]
