"""Process-level tuning for the numpy-heavy training loop."""
from __future__ import annotations

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3
_tuned = False


def tune_allocator() -> bool:
    """Keep large freed blocks in the glibc heap instead of returning them to the OS.

    Convolution buffers of a few MB are allocated and freed every step; with
    glibc defaults each one is a fresh mmap whose pages fault in on first
    touch, which costs more than the arithmetic.  Returns False where glibc
    is not available.  Numerical results are unaffected.
    """
    global _tuned
    if _tuned:
        return True
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = (libc.mallopt(_M_MMAP_THRESHOLD, 32 * 1024 * 1024)
              and libc.mallopt(_M_TRIM_THRESHOLD, 256 * 1024 * 1024)
              and libc.mallopt(_M_TOP_PAD, 64 * 1024 * 1024))
    except (OSError, AttributeError):
        return False
    _tuned = bool(ok)
    return _tuned
