"""Pure-Python fallback for the compiled kernels.

Python cannot express a cross-process compare-and-swap, so every
read-modify-write here is serialized through an ``flock``-ed lockfile shared
by all users of the region. Much slower than the compiled path, but the
observable semantics are identical; `fanpipe.kernels` picks one at import.
"""

import fcntl
import struct
import time

BACKEND = "pure"

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class AtomicBuffer:
    """Lock-serialized word access over a writable buffer, by byte offset."""

    def __init__(self, buf, lock_path: str):
        self._mv = memoryview(buf)
        self._size = self._mv.nbytes
        self._lockfile = open(lock_path, "ab")

    def _check(self, off: int, width: int) -> None:
        if off < 0 or off + width > self._size or off % width != 0:
            raise ValueError(f"bad u{width * 8} offset {off} (size {self._size})")

    def u32_load(self, off: int) -> int:
        self._check(off, 4)
        fcntl.flock(self._lockfile, fcntl.LOCK_EX)
        try:
            return _U32.unpack_from(self._mv, off)[0]
        finally:
            fcntl.flock(self._lockfile, fcntl.LOCK_UN)

    def u32_store(self, off: int, value: int) -> None:
        self._check(off, 4)
        fcntl.flock(self._lockfile, fcntl.LOCK_EX)
        try:
            _U32.pack_into(self._mv, off, value)
        finally:
            fcntl.flock(self._lockfile, fcntl.LOCK_UN)

    def u32_cas(self, off: int, expected: int, desired: int) -> int:
        self._check(off, 4)
        fcntl.flock(self._lockfile, fcntl.LOCK_EX)
        try:
            prev = _U32.unpack_from(self._mv, off)[0]
            if prev == expected:
                _U32.pack_into(self._mv, off, desired)
            return prev
        finally:
            fcntl.flock(self._lockfile, fcntl.LOCK_UN)

    def u64_load(self, off: int) -> int:
        self._check(off, 8)
        fcntl.flock(self._lockfile, fcntl.LOCK_EX)
        try:
            return _U64.unpack_from(self._mv, off)[0]
        finally:
            fcntl.flock(self._lockfile, fcntl.LOCK_UN)

    def u64_store(self, off: int, value: int) -> None:
        self._check(off, 8)
        fcntl.flock(self._lockfile, fcntl.LOCK_EX)
        try:
            _U64.pack_into(self._mv, off, value)
        finally:
            fcntl.flock(self._lockfile, fcntl.LOCK_UN)

    def u64_add(self, off: int, delta: int) -> int:
        self._check(off, 8)
        fcntl.flock(self._lockfile, fcntl.LOCK_EX)
        try:
            prev = _U64.unpack_from(self._mv, off)[0]
            _U64.pack_into(self._mv, off, (prev + delta) & 0xFFFFFFFFFFFFFFFF)
            return prev
        finally:
            fcntl.flock(self._lockfile, fcntl.LOCK_UN)

    def close(self) -> None:
        self._mv.release()
        self._lockfile.close()


def busy_spin_ns(duration_ns: int) -> None:
    deadline = time.perf_counter_ns() + duration_ns
    while time.perf_counter_ns() < deadline:
        pass
