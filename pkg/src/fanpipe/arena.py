"""Preallocated shared-memory tensor arenas.

An arena is one named shared region holding fixed-layout tensor slots. The
creator allocates it once, zero-initialized; any process in the same engine
run imports it by handle and sees the same physical bytes. The arena itself
never synchronizes access: ordering is imposed by the channel slot state
machine.

Region format: a 64-byte header (magic ``PEAR1\\0`` at offset 0, region
total_bytes as u64 LE at offset 8, slot count as u32 LE at offset 16),
followed by the slot data area. Slot offsets are relative to the data area
and 64-byte aligned. OS-level region name is ``<namespace>.<region_name>``
(POSIX shm names cannot contain ``/``).
"""

import atexit
import mmap
import os
import re
import struct
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from multiprocessing import resource_tracker, shared_memory

import numpy as np

from fanpipe.errors import AlreadyExists, CorruptHandle, NotFound, ResourceError, ShapeError

ARENA_MAGIC = b"PEAR1\x00"
HEADER_BYTES = 64
ALIGNMENT = 64
PAGE = mmap.PAGESIZE

# Labels and region names must stay clear of every separator the wire and
# naming formats use ('/', '.', '|', whitespace).
_NAME_RE = re.compile(r"^[A-Za-z0-9_\-]{1,64}$")
_LABEL_RE = re.compile(r"^[A-Za-z0-9_]{1,64}$")


class DType(Enum):
    F32 = "f32"
    F16_RAW = "f16_raw"  # opaque 16-bit payload, transport only
    U8 = "u8"
    I32 = "i32"
    I64 = "i64"

    @property
    def itemsize(self) -> int:
        return _ITEMSIZE[self]

    @property
    def np_dtype(self) -> np.dtype:
        return _NPDTYPE[self]


_ITEMSIZE = {DType.F32: 4, DType.F16_RAW: 2, DType.U8: 1, DType.I32: 4, DType.I64: 8}
_NPDTYPE = {
    DType.F32: np.dtype("<f4"),
    DType.F16_RAW: np.dtype("<u2"),
    DType.U8: np.dtype("u1"),
    DType.I32: np.dtype("<i4"),
    DType.I64: np.dtype("<i8"),
}


@dataclass(frozen=True)
class TensorSpec:
    label: str
    dtype: DType
    dims: tuple[int, ...]

    def __post_init__(self):
        if not _LABEL_RE.match(self.label):
            raise ShapeError(f"bad label {self.label!r}: 1-64 chars of [A-Za-z0-9_]")
        if not 1 <= len(self.dims) <= 4:
            raise ShapeError(f"{self.label}: rank must be 1-4, got {len(self.dims)}")
        if any(d <= 0 for d in self.dims):
            raise ShapeError(f"{self.label}: dims must be positive, got {self.dims}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def elements(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n

    @property
    def byte_size(self) -> int:
        return self.elements * self.dtype.itemsize

    def to_dict(self) -> dict:
        return {"label": self.label, "dtype": self.dtype.value, "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "TensorSpec":
        return cls(label=d["label"], dtype=DType(d["dtype"]), dims=tuple(d["dims"]))


def _align(n: int, a: int) -> int:
    return (n + a - 1) // a * a


@dataclass(frozen=True)
class ArenaLayout:
    """Ordered (slot_id, spec) pairs with computed 64-byte-aligned offsets."""

    slots: tuple[tuple[int, TensorSpec], ...]
    offsets: tuple[int, ...] = field(init=False)
    data_extent: int = field(init=False)

    def __post_init__(self):
        if not self.slots:
            raise ShapeError("layout needs at least one slot")
        ids = [sid for sid, _ in self.slots]
        if len(set(ids)) != len(ids):
            raise ShapeError("duplicate slot ids in layout")
        offsets, cursor = [], 0
        for _, spec in self.slots:
            off = _align(cursor, ALIGNMENT)
            offsets.append(off)
            cursor = off + spec.byte_size
        object.__setattr__(self, "offsets", tuple(offsets))
        object.__setattr__(self, "data_extent", cursor)

    @classmethod
    def from_specs(cls, specs) -> "ArenaLayout":
        return cls(slots=tuple((i, s) for i, s in enumerate(specs)))

    @property
    def total_bytes(self) -> int:
        """Region size: header + data area, rounded up to the page size."""
        return _align(HEADER_BYTES + self.data_extent, PAGE)

    def offset_of(self, slot_id: int) -> int:
        for (sid, _), off in zip(self.slots, self.offsets):
            if sid == slot_id:
                return off
        raise NotFound(f"slot {slot_id} not in layout")

    def spec_of(self, slot_id: int) -> TensorSpec:
        for sid, spec in self.slots:
            if sid == slot_id:
                return spec
        raise NotFound(f"slot {slot_id} not in layout")


@dataclass(frozen=True)
class ShareHandle:
    """Names a shared region so any process in the run can import it."""

    namespace: str
    region_name: str
    total_bytes: int

    @property
    def os_name(self) -> str:
        return f"{self.namespace}.{self.region_name}"

    def to_dict(self) -> dict:
        return {
            "namespace": self.namespace,
            "region_name": self.region_name,
            "total_bytes": self.total_bytes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShareHandle":
        return cls(d["namespace"], d["region_name"], d["total_bytes"])


@dataclass(frozen=True)
class SlotRef:
    """One tensor slot inside an arena: handle + data-relative offset."""

    arena: ShareHandle
    slot_id: int
    spec: TensorSpec
    offset: int

    def __post_init__(self):
        if self.offset % ALIGNMENT != 0:
            raise ShapeError(f"slot offset {self.offset} not {ALIGNMENT}-byte aligned")
        if HEADER_BYTES + self.offset + self.spec.byte_size > self.arena.total_bytes:
            raise ShapeError("slot extends past the arena region")


class _CopyCounter:
    """Per-process copy accounting; only copy_out() may increment it."""

    def __init__(self):
        self._lock = threading.Lock()
        self._n = 0

    def bump(self) -> None:
        with self._lock:
            self._n += 1

    def value(self) -> int:
        with self._lock:
            return self._n


_copies = _CopyCounter()

# Every region this process *created*: (os_name, total_bytes, monotonic ns).
# The static-footprint audit asserts this log stops growing after engine init.
_creation_log: list[tuple[str, int, int]] = []
_creation_lock = threading.Lock()

# Process-local attachments so the free functions can resolve a SlotRef.
_attached: dict[str, "Arena"] = {}
_attach_lock = threading.Lock()


def copy_counter() -> int:
    return _copies.value()


def allocation_audit() -> tuple[tuple[str, int], ...]:
    with _creation_lock:
        return tuple((name, size) for name, size, _ in _creation_log)


def generate_namespace(prefix: str = "fp") -> str:
    """Per-run unique id: timestamp plus random suffix."""
    stamp = time.strftime("%Y%m%d%H%M%S")
    return f"{prefix}{stamp}{os.urandom(3).hex()}"


def _validate_name(kind: str, value: str) -> None:
    if not _NAME_RE.match(value):
        raise ResourceError(f"bad {kind} {value!r}: 1-64 chars of [A-Za-z0-9_-]")


def _untrack(shm: shared_memory.SharedMemory) -> None:
    # Python 3.10's resource tracker unlinks regions when any process that
    # touched them exits. Lifecycle is ours (explicit `clean`), so opt out.
    try:
        resource_tracker.unregister(shm._name, "shared_memory")  # noqa: SLF001
    except Exception:
        pass


class Arena:
    """Accessor over one mapped region; usable as creator or importer."""

    def __init__(self, handle: ShareHandle, shm: shared_memory.SharedMemory):
        self.handle = handle
        self._shm = shm
        self._buf = shm.buf

    @property
    def buf(self) -> memoryview:
        return self._buf

    def data_view(self, offset: int, spec: TensorSpec) -> np.ndarray:
        """Zero-copy ndarray over a slot; never touches the copy counter."""
        start = HEADER_BYTES + offset
        arr = np.frombuffer(self._buf, dtype=spec.dtype.np_dtype, count=spec.elements, offset=start)
        return arr.reshape(spec.dims)

    def raw_bytes(self, offset: int, nbytes: int) -> memoryview:
        start = HEADER_BYTES + offset
        return self._buf[start : start + nbytes]

    def close(self) -> None:
        with _attach_lock:
            _attached.pop(self.handle.os_name, None)
        try:
            self._buf.release()
            self._shm.close()
        except BufferError:
            pass  # live views pin the mapping; process exit reclaims it

    def unlink(self) -> None:
        try:
            self._shm.unlink()
        except FileNotFoundError:
            pass


def create_region(namespace: str, region_name: str, nbytes: int) -> tuple[shared_memory.SharedMemory, ShareHandle]:
    """Allocate a raw zero-initialized shared region and log the allocation."""
    _validate_name("namespace", namespace)
    _validate_name("region_name", region_name)
    handle = ShareHandle(namespace, region_name, nbytes)
    try:
        shm = shared_memory.SharedMemory(name=handle.os_name, create=True, size=nbytes)
    except FileExistsError:
        raise AlreadyExists(f"region {handle.os_name} already exists") from None
    except OSError as exc:
        raise ResourceError(f"cannot create region {handle.os_name}: {exc}") from exc
    _untrack(shm)
    with _creation_lock:
        _creation_log.append((handle.os_name, nbytes, time.monotonic_ns()))
    return shm, handle


def attach_region(handle: ShareHandle) -> shared_memory.SharedMemory:
    try:
        shm = shared_memory.SharedMemory(name=handle.os_name, create=False)
    except FileNotFoundError:
        raise NotFound(f"region {handle.os_name} not found") from None
    except OSError as exc:
        raise ResourceError(f"cannot import region {handle.os_name}: {exc}") from exc
    _untrack(shm)
    if shm.size < handle.total_bytes:
        shm.close()
        raise CorruptHandle(f"handle says {handle.total_bytes} bytes, region maps {shm.size}")
    return shm


def create_arena(layout: ArenaLayout, namespace: str, region_name: str) -> tuple[Arena, ShareHandle]:
    """Allocate a zero-initialized shared region for `layout`.

    After this returns, no further allocation ever happens for the arena.
    """
    shm, handle = create_region(namespace, region_name, layout.total_bytes)
    struct.pack_into("<6sxx", shm.buf, 0, ARENA_MAGIC)
    struct.pack_into("<Q", shm.buf, 8, layout.total_bytes)
    struct.pack_into("<I", shm.buf, 16, len(layout.slots))
    arena = Arena(handle, shm)
    with _attach_lock:
        _attached[handle.os_name] = arena
    return arena, handle


def import_arena(handle: ShareHandle) -> Arena:
    """Map an existing region; bytes written anywhere are visible here."""
    shm = attach_region(handle)
    magic, = struct.unpack_from("<6s", shm.buf, 0)
    recorded, = struct.unpack_from("<Q", shm.buf, 8)
    if magic != ARENA_MAGIC or recorded != handle.total_bytes:
        shm.close()
        raise CorruptHandle(
            f"handle says {handle.total_bytes} bytes, region header says {recorded}"
        )
    arena = Arena(handle, shm)
    with _attach_lock:
        _attached[handle.os_name] = arena
    return arena


def _resolve(ref: SlotRef) -> Arena:
    with _attach_lock:
        arena = _attached.get(ref.arena.os_name)
    if arena is None:
        arena = import_arena(ref.arena)
    return arena


def write_tensor(slot: SlotRef, data: bytes) -> None:
    if len(data) != slot.spec.byte_size:
        raise ShapeError(f"{slot.spec.label}: expected {slot.spec.byte_size} bytes, got {len(data)}")
    arena = _resolve(slot)
    arena.raw_bytes(slot.offset, slot.spec.byte_size)[:] = data


def read_view(slot: SlotRef) -> np.ndarray:
    """View aliasing the shared bytes; the copy counter is untouched."""
    return _resolve(slot).data_view(slot.offset, slot.spec)


def copy_out(src: SlotRef, dst: SlotRef) -> None:
    """The single permitted copy: channel slot into a processing slot."""
    if src.spec != dst.spec:
        raise ShapeError(f"spec mismatch: {src.spec} vs {dst.spec}")
    n = src.spec.byte_size
    _resolve(dst).raw_bytes(dst.offset, n)[:] = _resolve(src).raw_bytes(src.offset, n)
    _copies.bump()


def shm_dir() -> str:
    return "/dev/shm"


def shm_census(namespace: str) -> dict[str, int]:
    """Resident shared regions of a run, straight from the OS."""
    out = {}
    prefix = f"{namespace}."
    try:
        for entry in os.scandir(shm_dir()):
            if entry.name.startswith(prefix):
                out[entry.name] = entry.stat().st_size
    except FileNotFoundError:
        pass
    return out


def clean_namespace(namespace: str) -> list[str]:
    """Remove stale regions (and fallback lockfiles) of a crashed run.

    Never called automatically; `fanpipe clean` is the only path.
    """
    from fanpipe.kernels import lock_path_for

    removed = []
    for name in list(shm_census(namespace)):
        try:
            os.unlink(os.path.join(shm_dir(), name))
            removed.append(name)
        except FileNotFoundError:
            pass
        lock = lock_path_for(name)
        if os.path.exists(lock):
            try:
                os.unlink(lock)
            except FileNotFoundError:
                pass
    return removed
