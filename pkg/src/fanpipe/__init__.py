"""fanpipe: a multi-process inference pipeline engine.

One foundation worker computes shared feature tensors; many independently
rate-limited head workers receive them by reference through preallocated
shared-memory channels. Hot channel operations run on a compiled extension
when available, with a pure-Python fallback selected at import.
"""

from fanpipe.kernels import HAVE_COMPILED, active_backend

__version__ = "0.1.0"

__all__ = ["HAVE_COMPILED", "active_backend", "__version__"]
