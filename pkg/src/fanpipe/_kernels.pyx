# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled hot kernels: lock-free atomics on shared-memory buffers and a
calibrated busy-spin.

The atomic ops target aligned 32/64-bit words inside a writable buffer
(typically ``SharedMemory.buf``) and are safe across processes mapping the
same region. ``u32_cas`` returns the previous value; the swap succeeded iff
that equals ``expected``.
"""

from libc.stdint cimport int64_t, uint8_t, uint32_t, uint64_t, uintptr_t

cdef extern from *:
    """
    #include <stdint.h>
    #include <time.h>

    static inline uint32_t fp_ld32(const volatile uint32_t *p) {
        return __atomic_load_n(p, __ATOMIC_ACQUIRE);
    }
    static inline void fp_st32(volatile uint32_t *p, uint32_t v) {
        __atomic_store_n(p, v, __ATOMIC_RELEASE);
    }
    static inline uint32_t fp_cas32(volatile uint32_t *p, uint32_t expected, uint32_t desired) {
        __atomic_compare_exchange_n(p, &expected, desired, 0,
                                    __ATOMIC_ACQ_REL, __ATOMIC_ACQUIRE);
        return expected;  /* holds the previous value on failure, expected on success */
    }
    static inline uint64_t fp_ld64(const volatile uint64_t *p) {
        return __atomic_load_n(p, __ATOMIC_ACQUIRE);
    }
    static inline void fp_st64(volatile uint64_t *p, uint64_t v) {
        __atomic_store_n(p, v, __ATOMIC_RELEASE);
    }
    static inline uint64_t fp_add64(volatile uint64_t *p, uint64_t v) {
        return __atomic_fetch_add(p, v, __ATOMIC_ACQ_REL);
    }
    static inline int64_t fp_now_ns(void) {
        struct timespec ts;
        clock_gettime(CLOCK_MONOTONIC, &ts);
        return (int64_t)ts.tv_sec * 1000000000 + ts.tv_nsec;
    }
    """
    uint32_t fp_ld32(const uint32_t *p) nogil
    void fp_st32(uint32_t *p, uint32_t v) nogil
    uint32_t fp_cas32(uint32_t *p, uint32_t expected, uint32_t desired) nogil
    uint64_t fp_ld64(const uint64_t *p) nogil
    void fp_st64(uint64_t *p, uint64_t v) nogil
    uint64_t fp_add64(uint64_t *p, uint64_t v) nogil
    int64_t fp_now_ns() nogil


BACKEND = "compiled"


cdef class AtomicBuffer:
    """Atomic word access over a writable buffer, by byte offset."""

    cdef uint8_t[::1] _mv
    cdef Py_ssize_t _size

    def __init__(self, buf):
        self._mv = buf
        self._size = self._mv.shape[0]
        if self._size > 0 and (<uintptr_t>&self._mv[0]) % 8 != 0:
            raise ValueError("buffer base address must be 8-byte aligned")

    cdef inline uint32_t* _p32(self, Py_ssize_t off) except NULL:
        if off < 0 or off + 4 > self._size or off % 4 != 0:
            raise ValueError(f"bad u32 offset {off} (size {self._size})")
        return <uint32_t*>&self._mv[off]

    cdef inline uint64_t* _p64(self, Py_ssize_t off) except NULL:
        if off < 0 or off + 8 > self._size or off % 8 != 0:
            raise ValueError(f"bad u64 offset {off} (size {self._size})")
        return <uint64_t*>&self._mv[off]

    cpdef uint32_t u32_load(self, Py_ssize_t off):
        return fp_ld32(self._p32(off))

    cpdef void u32_store(self, Py_ssize_t off, uint32_t value):
        fp_st32(self._p32(off), value)

    cpdef uint32_t u32_cas(self, Py_ssize_t off, uint32_t expected, uint32_t desired):
        return fp_cas32(self._p32(off), expected, desired)

    cpdef uint64_t u64_load(self, Py_ssize_t off):
        return fp_ld64(self._p64(off))

    cpdef void u64_store(self, Py_ssize_t off, uint64_t value):
        fp_st64(self._p64(off), value)

    cpdef uint64_t u64_add(self, Py_ssize_t off, uint64_t delta):
        return fp_add64(self._p64(off), delta)

    def close(self):
        self._mv = None
        self._size = 0


def busy_spin_ns(int64_t duration_ns):
    """Burn CPU for ``duration_ns`` without sleeping (saturating-kernel model)."""
    cdef int64_t deadline
    if duration_ns <= 0:
        return
    with nogil:
        deadline = fp_now_ns() + duration_ns
        while fp_now_ns() < deadline:
            pass
