"""Kernel selection: compiled extension if importable, pure-Python otherwise.

Set ``FANPIPE_FORCE_PURE=1`` to force the fallback (used by tests and by
``fanpipe bench kernels`` to compare both).
"""

import os
import tempfile

from fanpipe import _kernels_py

try:
    from fanpipe import _kernels  # type: ignore[attr-defined]

    HAVE_COMPILED = True
except ImportError:  # extension not built; everything still works, slower
    _kernels = None  # type: ignore[assignment]
    HAVE_COMPILED = False

_FORCE_PURE_ENV = "FANPIPE_FORCE_PURE"


def force_pure_env() -> bool:
    return os.environ.get(_FORCE_PURE_ENV, "") not in ("", "0")


def active_backend(force_pure: bool | None = None) -> str:
    if force_pure is None:
        force_pure = force_pure_env()
    return "pure" if (force_pure or not HAVE_COMPILED) else "compiled"


def lock_path_for(region_os_name: str) -> str:
    """Lockfile backing the pure fallback's serialization, derived from the
    region name so every process agrees on it."""
    return os.path.join(tempfile.gettempdir(), f"fanpipe-{region_os_name}.lock")


def make_atomics(buf, region_os_name: str, force_pure: bool | None = None):
    """Atomic word accessor over ``buf`` (compiled or lock-serialized)."""
    if active_backend(force_pure) == "compiled":
        return _kernels.AtomicBuffer(buf)
    return _kernels_py.AtomicBuffer(buf, lock_path_for(region_os_name))


def busy_spin_ns(duration_ns: int, force_pure: bool | None = None) -> None:
    if active_backend(force_pure) == "compiled":
        _kernels.busy_spin_ns(duration_ns)
    else:
        _kernels_py.busy_spin_ns(duration_ns)
