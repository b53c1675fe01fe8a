"""Inter-process channels: ordered FIFO queues and latest-wins rings.

A channel is a control header region plus a tensor arena holding
``capacity`` slot groups (one group = the channel's labeled tensor set).
Every slot group moves through an atomic state machine

    FREE -> WRITING -> READY -> { LEASED(k) <-> READY, FREE }

driven by compare-and-swap on a per-slot state word, so a frame is never
read while it is being written and a leased slot is never overwritten.
Consumption copies slot tensors into caller-owned processing slots via
``arena.copy_out`` -- the single copy the engine permits per label.

Header region layout (all integers little-endian; natural alignment
padding between the documented fields so the atomic words stay aligned):

    offset 0    magic  b"PECH1\\0"
    offset 6    mode   u8 (0=FIFO, 1=LATEST)
    offset 8    capacity u32
    offset 16   per-slot records, stride 24:
                  +0 state u32, +8 frame_id u64, +16 capture_ts u64
    then        consumer cursor table, 16 entries, stride 16:
                  +0 consumer_id u32, +8 last_frame u64
    then        producer_drops u64, evictions u64
    then        engine-internal counters: pushed u64, consumed u64
"""

import logging
import os
import struct
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Mapping, Sequence

import numpy as np

from fanpipe import arena as ar
from fanpipe import kernels
from fanpipe.errors import (
    ConfigError,
    LabelError,
    NotFound,
    ResourceError,
    ShapeError,
    UseAfterConsume,
    WriterError,
)

log = logging.getLogger("fanpipe.channels")

CH_MAGIC = b"PECH1\x00"

STATE_FREE = 0
STATE_WRITING = 1
STATE_READY = 2  # >= READY means data is valid; READY + k means k leases held

MAX_CONSUMERS = 16

_SLOT0 = 16
_SLOT_STRIDE = 24
_CURSOR_STRIDE = 16

# Poll backoff for blocking waits, capped well below the engine's IPC budget.
_BACKOFF_CAP_S = 100e-6


class ChannelMode(Enum):
    FIFO = 0
    LATEST = 1


@dataclass(frozen=True)
class FrameEnvelope:
    """Identity of one frame's slot group: id, capture time, label set."""

    frame_id: int
    capture_ts: int  # ns since engine epoch
    labels: tuple[str, ...]


class PushKind(Enum):
    ACCEPTED = "accepted"
    ACCEPTED_EVICTING = "accepted_evicting"
    OVERFLOW_REJECTED = "overflow_rejected"


@dataclass(frozen=True)
class PushOutcome:
    kind: PushKind
    evicted_frame_id: int | None = None

    @property
    def accepted(self) -> bool:
        return self.kind is not PushKind.OVERFLOW_REJECTED


@dataclass
class Lease:
    """Hold on a slot that blocks overwrite until consume() releases it."""

    channel: "Channel"
    slot_index: int
    frame_id: int
    capture_ts: int
    consumer_id: int
    consumed: bool = False


@dataclass(frozen=True)
class ChannelCounters:
    pushed: int
    producer_drops: int
    evictions: int
    consumed: int
    resident: int


@dataclass(frozen=True)
class ChannelHandle:
    """Everything a process needs to open a channel created elsewhere."""

    name: str
    namespace: str
    mode: ChannelMode
    capacity: int
    specs: tuple[ar.TensorSpec, ...]
    header: ar.ShareHandle
    data: ar.ShareHandle

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "namespace": self.namespace,
            "mode": self.mode.name.lower(),
            "capacity": self.capacity,
            "specs": [s.to_dict() for s in self.specs],
            "header": self.header.to_dict(),
            "data": self.data.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelHandle":
        return cls(
            name=d["name"],
            namespace=d["namespace"],
            mode=ChannelMode[d["mode"].upper()],
            capacity=d["capacity"],
            specs=tuple(ar.TensorSpec.from_dict(s) for s in d["specs"]),
            header=ar.ShareHandle.from_dict(d["header"]),
            data=ar.ShareHandle.from_dict(d["data"]),
        )


class SlotGroup:
    """Caller-owned processing slots: one arena slot per channel label."""

    def __init__(self, accessor: ar.Arena, refs: dict[str, ar.SlotRef]):
        self.arena = accessor
        self.refs = refs
        self._views = {lbl: accessor.data_view(ref.offset, ref.spec) for lbl, ref in refs.items()}

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(self.refs)

    def ref(self, label: str) -> ar.SlotRef:
        return self.refs[label]

    def view(self, label: str) -> np.ndarray:
        return self._views[label]

    def spec(self, label: str) -> ar.TensorSpec:
        return self.refs[label].spec


def create_processing_slots(namespace: str, region_name: str, specs: Sequence[ar.TensorSpec]) -> SlotGroup:
    """Preallocate a consumer-private destination group for consume()/pop()."""
    layout = ar.ArenaLayout.from_specs(list(specs))
    accessor, handle = ar.create_arena(layout, namespace, region_name)
    refs = {
        spec.label: ar.SlotRef(handle, sid, spec, layout.offset_of(sid))
        for sid, spec in layout.slots
    }
    return SlotGroup(accessor, refs)


def open_processing_slots(handle: ar.ShareHandle, specs: Sequence[ar.TensorSpec]) -> SlotGroup:
    accessor = ar.import_arena(handle)
    layout = ar.ArenaLayout.from_specs(list(specs))
    refs = {
        spec.label: ar.SlotRef(handle, sid, spec, layout.offset_of(sid))
        for sid, spec in layout.slots
    }
    return SlotGroup(accessor, refs)


class _Backoff:
    """sched_yield first, then exponential sleeps capped at 100 us."""

    def __init__(self):
        self._step = 0

    def pause(self) -> None:
        if self._step < 3:
            time.sleep(0)
        else:
            time.sleep(min(2 ** (self._step - 3) * 1e-6, _BACKOFF_CAP_S))
        self._step += 1

    def reset(self) -> None:
        self._step = 0


def _group_layout(specs: Sequence[ar.TensorSpec], capacity: int) -> ar.ArenaLayout:
    return ar.ArenaLayout.from_specs(list(specs) * capacity)


class Channel:
    """One endpoint of a channel (producer or consumer side of the topology).

    Endpoints are not thread-safe; confine each to one thread at a time.
    """

    def __init__(self, handle: ChannelHandle, hdr_shm, force_pure: bool | None = None):
        self.handle = handle
        self.name = handle.name
        self.mode = handle.mode
        self.capacity = handle.capacity
        self.specs = handle.specs
        self.labels = tuple(s.label for s in handle.specs)
        self._hdr_shm = hdr_shm
        self._at = kernels.make_atomics(hdr_shm.buf, handle.header.os_name, force_pure)
        self._data = ar.import_arena(handle.data)
        self._layout = _group_layout(handle.specs, handle.capacity)
        nspecs = len(handle.specs)
        self._group_refs: list[dict[str, ar.SlotRef]] = []
        self._group_views: list[dict[str, np.ndarray]] = []
        for i in range(handle.capacity):
            refs, views = {}, {}
            for j, spec in enumerate(handle.specs):
                sid = i * nspecs + j
                off = self._layout.offset_of(sid)
                refs[spec.label] = ar.SlotRef(handle.data, sid, spec, off)
                views[spec.label] = self._data.data_view(off, spec)
            self._group_refs.append(refs)
            self._group_views.append(views)
        base = _SLOT0 + handle.capacity * _SLOT_STRIDE
        self._cursor0 = base
        self._drops_off = base + MAX_CONSUMERS * _CURSOR_STRIDE
        self._evict_off = self._drops_off + 8
        self._pushed_off = self._drops_off + 16
        self._consumed_off = self._drops_off + 24
        self._last_pushed_id = 0
        self._last_pushed_ts = 0
        self._cursor_slot: dict[int, int] = {}  # consumer_id -> cursor table index

    # -- header field access ------------------------------------------------

    def _state_off(self, i: int) -> int:
        return _SLOT0 + i * _SLOT_STRIDE

    def _fid_off(self, i: int) -> int:
        return _SLOT0 + i * _SLOT_STRIDE + 8

    def _ts_off(self, i: int) -> int:
        return _SLOT0 + i * _SLOT_STRIDE + 16

    def _cursor_off(self, idx: int) -> int:
        return self._cursor0 + idx * _CURSOR_STRIDE

    # -- producer side ------------------------------------------------------

    def push(
        self,
        frame_id: int,
        capture_ts: int,
        writer: Callable[[Mapping[str, np.ndarray]], None],
    ) -> PushOutcome:
        """Publish one frame; `writer` fills the claimed slot group in place.

        Only the channel's unique producer may call this.
        """
        if frame_id <= self._last_pushed_id:
            raise ValueError(f"frame_id must increase: {frame_id} after {self._last_pushed_id}")
        if capture_ts < self._last_pushed_ts:
            raise ValueError("capture_ts must be non-decreasing")

        slot, evicted = self._claim_slot()
        if slot is None:
            self._at.u64_add(self._drops_off, 1)
            self._at.u64_add(self._pushed_off, 1)
            return PushOutcome(PushKind.OVERFLOW_REJECTED)

        self._at.u64_store(self._fid_off(slot), frame_id)
        self._at.u64_store(self._ts_off(slot), capture_ts)
        try:
            writer(self._group_views[slot])
        except Exception as exc:
            self._at.u32_store(self._state_off(slot), STATE_FREE)
            raise WriterError(f"writer failed for frame {frame_id}: {exc}") from exc
        self._at.u32_store(self._state_off(slot), STATE_READY)
        self._at.u64_add(self._pushed_off, 1)
        self._last_pushed_id = frame_id
        self._last_pushed_ts = capture_ts
        if evicted is not None:
            self._at.u64_add(self._evict_off, 1)
            return PushOutcome(PushKind.ACCEPTED_EVICTING, evicted_frame_id=evicted)
        return PushOutcome(PushKind.ACCEPTED)

    def _claim_slot(self) -> tuple[int | None, int | None]:
        """Claim a slot for writing: a FREE one, else (LATEST only) evict the
        oldest un-leased READY one. Returns (slot index, evicted frame id)."""
        while True:
            for i in range(self.capacity):
                if self._at.u32_load(self._state_off(i)) == STATE_FREE:
                    if self._at.u32_cas(self._state_off(i), STATE_FREE, STATE_WRITING) == STATE_FREE:
                        return i, None
            if self.mode is ChannelMode.FIFO:
                return None, None
            oldest, oldest_fid = -1, None
            for i in range(self.capacity):
                if self._at.u32_load(self._state_off(i)) == STATE_READY:
                    fid = self._at.u64_load(self._fid_off(i))
                    if oldest_fid is None or fid < oldest_fid:
                        oldest, oldest_fid = i, fid
            if oldest < 0:
                return None, None  # everything leased or mid-write
            if self._at.u32_cas(self._state_off(oldest), STATE_READY, STATE_WRITING) == STATE_READY:
                return oldest, oldest_fid
            # lost the race with a consumer lease; rescan

    # -- consumer side ------------------------------------------------------

    def register_consumer(self, consumer_id: int) -> None:
        """Claim (or resume) a cursor-table entry for this consumer."""
        if not 1 <= consumer_id <= 0xFFFFFFFF - 1:
            raise ConfigError(f"consumer_id must be a positive u32, got {consumer_id}")
        registered = 0
        for idx in range(MAX_CONSUMERS):
            cur = self._at.u32_load(self._cursor_off(idx))
            if cur == consumer_id:
                self._cursor_slot[consumer_id] = idx  # restart: cursor survives
                return
            if cur != 0:
                registered += 1
        for idx in range(MAX_CONSUMERS):
            if self._at.u32_load(self._cursor_off(idx)) == 0:
                if self._at.u32_cas(self._cursor_off(idx), 0, consumer_id) == 0:
                    self._cursor_slot[consumer_id] = idx
                    if self.mode is ChannelMode.LATEST and registered + 2 > self.capacity:
                        log.warning(
                            "channel %s: capacity %d below consumer count %d + 1; "
                            "producer may see OverflowRejected under load",
                            self.name, self.capacity, registered + 1,
                        )
                    return
        raise ResourceError(f"channel {self.name}: cursor table full ({MAX_CONSUMERS})")

    def _cursor_idx(self, consumer_id: int) -> int:
        try:
            return self._cursor_slot[consumer_id]
        except KeyError:
            raise NotFound(f"consumer {consumer_id} not registered on {self.name}") from None

    def last_consumed(self, consumer_id: int) -> int:
        return self._at.u64_load(self._cursor_off(self._cursor_idx(consumer_id)) + 8)

    def _check_dst(self, dst: SlotGroup, labels: Sequence[str]) -> None:
        for lbl in labels:
            want = next(s for s in self.specs if s.label == lbl)
            if lbl not in dst.refs:
                raise ShapeError(f"dst group missing slot for label {lbl!r}")
            if dst.spec(lbl) != want:
                raise ShapeError(f"dst spec mismatch for {lbl!r}: {dst.spec(lbl)} != {want}")

    def pop(self, consumer_id: int, dst: SlotGroup, block: bool = False,
            timeout: float | None = None) -> FrameEnvelope | None:
        """FIFO: copy the oldest READY frame into `dst` and free its slot.

        Returns None when empty (non-blocking or timed out).
        """
        if self.mode is not ChannelMode.FIFO:
            raise ConfigError(f"pop() requires a FIFO channel, {self.name} is {self.mode.name}")
        cidx = self._cursor_idx(consumer_id)
        self._check_dst(dst, self.labels)
        backoff = _Backoff()
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            claimed = self._claim_oldest_ready()
            if claimed is not None:
                slot, fid = claimed
                ts = self._at.u64_load(self._ts_off(slot))
                refs = self._group_refs[slot]
                for lbl in self.labels:
                    ar.copy_out(refs[lbl], dst.ref(lbl))
                self._at.u64_store(self._cursor_off(cidx) + 8, fid)
                self._at.u64_add(self._consumed_off, 1)
                # claim was exclusive (READY->LEASED(1)), so release straight
                # to FREE: the intermediate READY would invite double-pops
                self._at.u32_store(self._state_off(slot), STATE_FREE)
                return FrameEnvelope(fid, ts, self.labels)
            if not block:
                return None
            if deadline is not None and time.monotonic() >= deadline:
                return None
            backoff.pause()

    def _claim_oldest_ready(self) -> tuple[int, int] | None:
        while True:
            best, best_fid = -1, None
            for i in range(self.capacity):
                if self._at.u32_load(self._state_off(i)) == STATE_READY:
                    fid = self._at.u64_load(self._fid_off(i))
                    if best_fid is None or fid < best_fid:
                        best, best_fid = i, fid
            if best < 0:
                return None
            if self._at.u32_cas(self._state_off(best), STATE_READY, STATE_READY + 1) == STATE_READY:
                return best, self._at.u64_load(self._fid_off(best))
            # another consumer claimed it first; rescan

    def acquire_latest(self, consumer_id: int) -> Lease | None:
        """Lease the newest READY frame the consumer has not yet consumed.

        Returns None when nothing newer exists (the caller should idle
        rather than reprocess).
        """
        cidx = self._cursor_idx(consumer_id)
        cursor = self._at.u64_load(self._cursor_off(cidx) + 8)
        while True:
            best, best_fid, best_state = -1, cursor, 0
            for i in range(self.capacity):
                state = self._at.u32_load(self._state_off(i))
                if state >= STATE_READY:
                    fid = self._at.u64_load(self._fid_off(i))
                    if fid > best_fid:
                        best, best_fid, best_state = i, fid, state
            if best < 0:
                return None
            state = best_state
            while state >= STATE_READY:
                prev = self._at.u32_cas(self._state_off(best), state, state + 1)
                if prev == state:
                    # Leased. The slot can no longer change under us; if the
                    # producer swapped in a newer frame between scan and CAS,
                    # the re-read id is newer still, which is fine.
                    fid = self._at.u64_load(self._fid_off(best))
                    ts = self._at.u64_load(self._ts_off(best))
                    return Lease(self, best, fid, ts, consumer_id)
                state = prev
            # evicted mid-acquire; rescan

    def consume(self, lease: Lease, dst: SlotGroup, labels: Sequence[str] | None = None) -> FrameEnvelope:
        """Copy the leased frame's selected labels into `dst`, then release.

        Exactly one copy_out per selected label; advances the consumer cursor.
        """
        if lease.consumed:
            raise UseAfterConsume(f"lease on frame {lease.frame_id} already consumed")
        chosen = tuple(labels) if labels is not None else self.labels
        unknown = [lbl for lbl in chosen if lbl not in self.labels]
        if unknown:
            raise LabelError(f"labels {unknown} not in channel label set {self.labels}")
        self._check_dst(dst, chosen)
        refs = self._group_refs[lease.slot_index]
        for lbl in chosen:
            ar.copy_out(refs[lbl], dst.ref(lbl))
        cidx = self._cursor_idx(lease.consumer_id)
        self._at.u64_store(self._cursor_off(cidx) + 8, lease.frame_id)
        self._at.u64_add(self._consumed_off, 1)
        self._release(lease.slot_index)
        lease.consumed = True
        return FrameEnvelope(lease.frame_id, lease.capture_ts, chosen)

    def release(self, lease: Lease) -> None:
        """Drop a lease without consuming (error-path cleanup)."""
        if lease.consumed:
            return
        self._release(lease.slot_index)
        lease.consumed = True

    def _release(self, slot: int) -> None:
        while True:
            state = self._at.u32_load(self._state_off(slot))
            if state <= STATE_READY:
                raise RuntimeError(f"slot {slot} released while not leased (state {state})")
            if self._at.u32_cas(self._state_off(slot), state, state - 1) == state:
                return

    # -- introspection --------------------------------------------------

    def counters(self) -> ChannelCounters:
        resident = sum(
            1 for i in range(self.capacity)
            if self._at.u32_load(self._state_off(i)) >= STATE_READY
        )
        return ChannelCounters(
            pushed=self._at.u64_load(self._pushed_off),
            producer_drops=self._at.u64_load(self._drops_off),
            evictions=self._at.u64_load(self._evict_off),
            consumed=self._at.u64_load(self._consumed_off),
            resident=resident,
        )

    def slot_states(self) -> list[tuple[int, int]]:
        return [
            (self._at.u32_load(self._state_off(i)), self._at.u64_load(self._fid_off(i)))
            for i in range(self.capacity)
        ]

    def group_views(self, slot_index: int) -> dict[str, np.ndarray]:
        return self._group_views[slot_index]

    def close(self) -> None:
        self._at.close()
        self._data.close()
        try:
            self._hdr_shm.buf.release()
            self._hdr_shm.close()
        except BufferError:
            pass

    def unlink(self) -> None:
        for shm_handle in (self.handle.header, self.handle.data):
            try:
                os.unlink(os.path.join(ar.shm_dir(), shm_handle.os_name))
            except FileNotFoundError:
                pass


def header_region_bytes(capacity: int) -> int:
    need = _SLOT0 + capacity * _SLOT_STRIDE + MAX_CONSUMERS * _CURSOR_STRIDE + 32
    return max(4096, (need + 4095) // 4096 * 4096)


def create_channel(
    name: str,
    mode: ChannelMode,
    capacity: int,
    slot_group: Sequence[ar.TensorSpec],
    namespace: str,
    expected_consumers: int | None = None,
    force_pure: bool | None = None,
) -> tuple[Channel, ChannelHandle]:
    """Create the header region and backing arena; all slots start FREE."""
    if capacity < 2:
        raise ConfigError(f"channel capacity must be >= 2, got {capacity}")
    specs = tuple(slot_group)
    if not specs:
        raise ConfigError("channel needs a non-empty slot group spec list")
    seen = set()
    for s in specs:
        if s.label in seen:
            raise ConfigError(f"duplicate label {s.label!r} in slot group")
        seen.add(s.label)
    if (
        mode is ChannelMode.LATEST
        and expected_consumers is not None
        and capacity < expected_consumers + 1
    ):
        log.warning(
            "channel %s: LATEST capacity %d < expected consumers %d + 1",
            name, capacity, expected_consumers,
        )
    layout = _group_layout(specs, capacity)
    _, data_handle = ar.create_arena(layout, namespace, f"{name}-d")
    hdr_shm, hdr_handle = ar.create_region(namespace, f"{name}-c", header_region_bytes(capacity))
    struct.pack_into("<6s", hdr_shm.buf, 0, CH_MAGIC)
    struct.pack_into("<B", hdr_shm.buf, 6, mode.value)
    struct.pack_into("<I", hdr_shm.buf, 8, capacity)
    handle = ChannelHandle(
        name=name, namespace=namespace, mode=mode, capacity=capacity,
        specs=specs, header=hdr_handle, data=data_handle,
    )
    return Channel(handle, hdr_shm, force_pure=force_pure), handle


def open_channel(handle: ChannelHandle, force_pure: bool | None = None) -> Channel:
    """Attach to a channel created elsewhere, validating the header."""
    hdr_shm = ar.attach_region(handle.header)
    magic, = struct.unpack_from("<6s", hdr_shm.buf, 0)
    mode_b, = struct.unpack_from("<B", hdr_shm.buf, 6)
    cap, = struct.unpack_from("<I", hdr_shm.buf, 8)
    if magic != CH_MAGIC:
        hdr_shm.close()
        raise ConfigError(f"region {handle.header.os_name} is not a channel header")
    if mode_b != handle.mode.value or cap != handle.capacity:
        hdr_shm.close()
        raise ConfigError(
            f"channel {handle.name}: handle says mode={handle.mode.name} cap={handle.capacity}, "
            f"header says mode={mode_b} cap={cap}"
        )
    return Channel(handle, hdr_shm, force_pure=force_pure)
