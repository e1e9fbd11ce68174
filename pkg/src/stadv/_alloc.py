"""Keep freed memory in the process heap.

Convolution temporaries are tens of megabytes; glibc returns such blocks to
the OS on free, and faulting them back in on every batch can cost more than
the arithmetic. Raising the mmap/trim thresholds avoids that. No-op off glibc.
"""

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3
_done = False


def keep_heap():
    """Best-effort: returns True if the allocator options were applied."""
    global _done
    if _done:
        return True
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = (
        mallopt(_M_MMAP_THRESHOLD, 1 << 30)
        and mallopt(_M_TRIM_THRESHOLD, (1 << 31) - 1)
        and mallopt(_M_TOP_PAD, 256 << 20)
    )
    _done = bool(ok)
    return _done
