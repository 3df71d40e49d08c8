"""Simulated CUDA-style driver with lock/checkpoint/restore/unlock actions.

Device state of a task can be drained into an opaque host blob held by the
driver. The blob layout is a simulator convention (length-prefixed records
followed by a CRC32), not anything a real driver exposes.
"""

from __future__ import annotations

import hashlib
import itertools
import random
import threading
import zlib
from dataclasses import dataclass, field
from enum import Enum

from .codec import Packer, Truncated, Unpacker
from .errors import (DeviceLocked, ImageCorrupt, InvalidState, MissingBlob, NotLocked,
                     TaskNotRunning, TimeoutExpired, TopologyMismatch)

DEFAULT_LOCK_TIMEOUT = 10.0
BLOB_MAGIC = b"CUHB"
BLOB_VERSION = 1
DEVICE_VA_BASE = 0x7000_0000_0000

_boot_ids = itertools.count(1)


class CudaPhase(Enum):
    RUNNING = "running"
    LOCKED = "locked"
    CHECKPOINTED = "checkpointed"


@dataclass
class CudaDevice:
    ordinal: int
    model: str
    memory: int
    used: int = 0
    mutations: int = 0

    @property
    def path(self) -> str:
        return f"/dev/nvidia{self.ordinal}"


@dataclass
class DeviceAlloc:
    alloc_id: int
    ordinal: int
    addr: int
    size: int
    contents: bytearray


@dataclass
class StreamState:
    stream_id: int
    ordinal: int
    completed: int = 0


@dataclass
class CallbackSpec:
    id: int
    completion_delay: float | None  # None: never completes


@dataclass(frozen=True)
class LeftoverHandle:
    """Query-only device reference (NVML style) the driver cannot checkpoint."""

    handle: int
    ordinal: int


@dataclass
class CudaTaskState:
    pid: int
    phase: CudaPhase = CudaPhase.RUNNING
    device_allocs: dict[int, DeviceAlloc] = field(default_factory=dict)
    streams: list[StreamState] = field(default_factory=list)
    contexts: list[int] = field(default_factory=list)
    pending_callbacks: list[CallbackSpec] = field(default_factory=list)
    host_blob: bytes | None = None
    leftover_handles: list[LeftoverHandle] = field(default_factory=list)
    next_alloc_id: int = 1
    next_stream_id: int = 1
    next_addr: int = DEVICE_VA_BASE
    next_callback_id: int = 1


@dataclass
class BlobContents:
    """Decoded view of a host blob."""

    pid: int
    device_count: int
    devices: list[tuple[int, str, int]]  # only devices the task touches
    allocs: list[DeviceAlloc]
    streams: list[StreamState]
    contexts: list[int]
    leftover_handles: list[LeftoverHandle]
    next_alloc_id: int
    next_stream_id: int
    next_addr: int
    next_callback_id: int


def encode_blob(state: CudaTaskState, devices: list[CudaDevice]) -> bytes:
    p = Packer().raw(BLOB_MAGIC).u16(BLOB_VERSION).u32(state.pid)
    p.u32(state.next_alloc_id).u32(state.next_stream_id).u64(state.next_addr)
    p.u32(state.next_callback_id)
    used = set(state.contexts) | {a.ordinal for a in state.device_allocs.values()}
    used |= {s.ordinal for s in state.streams} | {h.ordinal for h in state.leftover_handles}
    p.u32(len(devices)).u32(len(used))
    for d in devices:
        if d.ordinal in used:
            p.u32(d.ordinal).string(d.model).u64(d.memory)
    allocs = sorted(state.device_allocs.values(), key=lambda a: a.alloc_id)
    p.u32(len(allocs))
    for a in allocs:
        p.u32(a.alloc_id).u32(a.ordinal).u64(a.addr).u64(a.size).raw(bytes(a.contents))
    p.u32(len(state.streams))
    for s in state.streams:
        p.u32(s.stream_id).u32(s.ordinal).u64(s.completed)
    p.u32(len(state.contexts))
    for c in state.contexts:
        p.u32(c)
    p.u32(len(state.leftover_handles))
    for h in state.leftover_handles:
        p.u32(h.handle).u32(h.ordinal)
    body = p.bytes()
    return body + zlib.crc32(body).to_bytes(4, "little")


def decode_blob(blob: bytes) -> BlobContents:
    if len(blob) < 8 or zlib.crc32(blob[:-4]) != int.from_bytes(blob[-4:], "little"):
        raise ImageCorrupt("CUDA host blob checksum mismatch")
    u = Unpacker(blob[:-4])
    try:
        if u.raw(4) != BLOB_MAGIC:
            raise ImageCorrupt("bad CUDA host blob magic")
        if u.u16() != BLOB_VERSION:
            raise ImageCorrupt("unsupported CUDA host blob version")
        pid = u.u32()
        next_alloc_id, next_stream_id, next_addr = u.u32(), u.u32(), u.u64()
        next_callback_id = u.u32()
        device_count = u.u32()
        devices = [(u.u32(), u.string(), u.u64()) for _ in range(u.u32())]
        allocs = []
        for _ in range(u.u32()):
            alloc_id, ordinal, addr, size = u.u32(), u.u32(), u.u64(), u.u64()
            allocs.append(DeviceAlloc(alloc_id, ordinal, addr, size, bytearray(u.raw(size))))
        streams = [StreamState(u.u32(), u.u32(), u.u64()) for _ in range(u.u32())]
        contexts = [u.u32() for _ in range(u.u32())]
        leftovers = [LeftoverHandle(u.u32(), u.u32()) for _ in range(u.u32())]
        u.expect_end()
    except Truncated as e:
        raise ImageCorrupt(f"malformed CUDA host blob: {e}") from None
    return BlobContents(pid, device_count, devices, allocs, streams, contexts, leftovers,
                        next_alloc_id, next_stream_id, next_addr, next_callback_id)


def kernel_transform(old: bytes, arg: bytes) -> bytes:
    """Deterministic stand-in for a kernel: output depends on prior contents."""
    return bytes(((o * 31) ^ a ^ (i * 7)) & 0xFF for i, (o, a) in enumerate(zip(old, arg)))


class CudaDriver:
    """One driver instance per simulated machine.

    All state is guarded by one mutex; multi-pid actions run under it and so
    look atomic to every other caller.
    """

    def __init__(self, clock, cost, devices=()):
        self.clock = clock
        self.cost = cost
        self.devices: list[CudaDevice] = list(devices)
        self.tasks: dict[int, CudaTaskState] = {}
        self._mutex = threading.RLock()
        self.api_calls = 0
        # Interception surface: callables invoked on every API call. Nothing in
        # the checkpoint path installs one.
        self.interposers: list = []
        self.intercepted_calls = 0
        self.boot_id = next(_boot_ids)
        self._entropy = random.Random(f"boot-{self.boot_id}")

    # -- task management ----------------------------------------------------

    def attach(self, pid: int) -> CudaTaskState:
        with self._mutex:
            if pid in self.tasks:
                raise InvalidState(f"pid {pid} already attached to the CUDA driver")
            st = self.tasks[pid] = CudaTaskState(pid)
            return st

    def task(self, pid: int) -> CudaTaskState:
        try:
            return self.tasks[pid]
        except KeyError:
            raise InvalidState(f"pid {pid} is not a CUDA task") from None

    def drop(self, pid: int) -> None:
        with self._mutex:
            st = self.tasks.pop(pid, None)
            if st is not None:
                for a in st.device_allocs.values():
                    self.devices[a.ordinal].used -= a.size

    def device(self, ordinal: int) -> CudaDevice:
        if not 0 <= ordinal < len(self.devices):
            raise TopologyMismatch(f"no CUDA device with ordinal {ordinal}")
        return self.devices[ordinal]

    # -- API surface ---------------------------------------------------------

    def _api(self, pid: int, name: str) -> CudaTaskState:
        st = self.task(pid)
        if st.phase is not CudaPhase.RUNNING:
            raise DeviceLocked(f"{name}: pid {pid} is {st.phase.value}")
        self.api_calls += 1
        for hook in self.interposers:
            self.intercepted_calls += 1
            hook(pid, name)
        self.clock.advance(self.cost.api_call)
        return st

    def _context_for(self, st: CudaTaskState, ordinal: int) -> None:
        self.device(ordinal)
        if ordinal not in st.contexts:
            st.contexts.append(ordinal)

    def malloc(self, pid: int, ordinal: int, size: int, init: bytes | None = None) -> int:
        with self._mutex:
            st = self._api(pid, "cuMemAlloc")
            dev = self.device(ordinal)
            if size <= 0 or dev.used + size > dev.memory:
                raise InvalidState(f"cannot allocate {size} bytes on device {ordinal}")
            self._context_for(st, ordinal)
            contents = bytearray(init) if init is not None else bytearray(size)
            if len(contents) != size:
                raise ValueError("init size mismatch")
            a = DeviceAlloc(st.next_alloc_id, ordinal, st.next_addr, size, contents)
            st.device_allocs[a.alloc_id] = a
            st.next_alloc_id += 1
            st.next_addr += (size + 0xFFFF) & ~0xFFFF
            dev.used += size
            dev.mutations += 1
            return a.alloc_id

    def _alloc(self, st: CudaTaskState, alloc_id: int) -> DeviceAlloc:
        try:
            return st.device_allocs[alloc_id]
        except KeyError:
            raise InvalidState(f"pid {st.pid}: unknown allocation {alloc_id}") from None

    def memcpy_htod(self, pid: int, alloc_id: int, offset: int, data: bytes) -> None:
        with self._mutex:
            st = self._api(pid, "cuMemcpyHtoD")
            a = self._alloc(st, alloc_id)
            if offset < 0 or offset + len(data) > a.size:
                raise InvalidState("copy out of bounds")
            a.contents[offset:offset + len(data)] = data
            self.devices[a.ordinal].mutations += 1
            self.clock.advance(len(data) * self.cost.h2d_per_byte)

    def memcpy_dtoh(self, pid: int, alloc_id: int, offset: int, n: int) -> bytes:
        with self._mutex:
            st = self._api(pid, "cuMemcpyDtoH")
            a = self._alloc(st, alloc_id)
            if offset < 0 or offset + n > a.size:
                raise InvalidState("copy out of bounds")
            self.clock.advance(n * self.cost.d2h_per_byte)
            return bytes(a.contents[offset:offset + n])

    def memcpy_htod_async(self, pid: int, stream_id: int, alloc_id: int, offset: int,
                          data: bytes) -> None:
        with self._mutex:
            st = self._api(pid, "cuMemcpyHtoDAsync")
            s = self._stream(st, stream_id)
            a = self._alloc(st, alloc_id)
            if offset < 0 or offset + len(data) > a.size:
                raise InvalidState("copy out of bounds")
            a.contents[offset:offset + len(data)] = data
            s.completed += 1
            self.devices[a.ordinal].mutations += 1

    def stream_create(self, pid: int, ordinal: int) -> int:
        with self._mutex:
            st = self._api(pid, "cuStreamCreate")
            self._context_for(st, ordinal)
            s = StreamState(st.next_stream_id, ordinal)
            st.streams.append(s)
            st.next_stream_id += 1
            return s.stream_id

    def _stream(self, st: CudaTaskState, stream_id: int) -> StreamState:
        for s in st.streams:
            if s.stream_id == stream_id:
                return s
        raise InvalidState(f"pid {st.pid}: unknown stream {stream_id}")

    def launch_kernel(self, pid: int, stream_id: int, alloc_id: int, offset: int,
                      arg: bytes, nondeterministic: bool = False) -> bytes:
        """Run the stand-in kernel over ``len(arg)`` bytes at ``offset``.

        A nondeterministic kernel (think unordered atomics) mixes in per-boot
        entropy, so two driver instances never agree on its output.
        """
        with self._mutex:
            st = self._api(pid, "cuLaunchKernel")
            s = self._stream(st, stream_id)
            a = self._alloc(st, alloc_id)
            if offset < 0 or offset + len(arg) > a.size:
                raise InvalidState("kernel range out of bounds")
            if nondeterministic:
                arg = bytes(x ^ y for x, y in zip(arg, self._entropy.randbytes(len(arg))))
            new = kernel_transform(a.contents[offset:offset + len(arg)], arg)
            a.contents[offset:offset + len(arg)] = new
            s.completed += 1
            self.devices[a.ordinal].mutations += 1
            return new

    def synchronize(self, pid: int, stream_id: int) -> int:
        with self._mutex:
            st = self._api(pid, "cuStreamSynchronize")
            return self._stream(st, stream_id).completed

    def add_callback(self, pid: int, completion_delay: float | None) -> int:
        with self._mutex:
            st = self._api(pid, "cuLaunchHostFunc")
            cb = CallbackSpec(st.next_callback_id, completion_delay)
            st.next_callback_id += 1
            st.pending_callbacks.append(cb)
            return cb.id

    def add_leftover(self, pid: int, ordinal: int) -> LeftoverHandle:
        with self._mutex:
            st = self.task(pid)
            self.device(ordinal)
            h = LeftoverHandle(0x4E560000 + len(st.leftover_handles), ordinal)
            st.leftover_handles.append(h)
            return h

    # -- checkpoint actions ---------------------------------------------------

    def lock(self, pids, timeout: float = DEFAULT_LOCK_TIMEOUT) -> float:
        """Block all device APIs of ``pids`` once their active callbacks finish.

        Returns the simulated time spent waiting. On timeout every task that
        was already locked is put back to Running and the clock has advanced by
        exactly ``timeout``.
        """
        pids = list(pids)
        with self._mutex:
            states = [self.task(p) for p in pids]
            for st in states:
                if st.phase is not CudaPhase.RUNNING:
                    raise TaskNotRunning(f"pid {st.pid} is {st.phase.value}")
            locked = []
            waited = 0.0
            for st in states:
                delays = [cb.completion_delay for cb in st.pending_callbacks]
                if any(d is None for d in delays) or max(delays, default=0.0) > timeout:
                    for done in locked:
                        done.phase = CudaPhase.RUNNING
                    self.clock.advance(timeout)
                    raise TimeoutExpired(
                        f"lock of pid {st.pid} did not complete within {timeout}s; "
                        f"{len(locked)} task(s) rolled back to running",
                        pids=pids, waited=timeout)
                waited = max(waited, max(delays, default=0.0))
                st.phase = CudaPhase.LOCKED
                locked.append(st)
            # callbacks run concurrently, so the wait is the slowest one
            for st in states:
                st.pending_callbacks.clear()
            self.clock.advance(waited + self.cost.lock_per_task * len(states))
            return waited

    def checkpoint_to_host(self, pids) -> int:
        """Drain device memory of locked tasks into host blobs. Returns bytes moved."""
        pids = list(pids)
        with self._mutex:
            states = [self.task(p) for p in pids]
            for st in states:
                if st.phase is not CudaPhase.LOCKED:
                    raise NotLocked(f"pid {st.pid} is {st.phase.value}")
            moved = 0
            for st in states:
                st.host_blob = encode_blob(st, self.devices)
                for a in st.device_allocs.values():
                    self.devices[a.ordinal].used -= a.size
                    moved += a.size
                st.device_allocs = {}
                st.phase = CudaPhase.CHECKPOINTED
            self.clock.advance(moved * self.cost.d2h_per_byte)
            return moved

    def check_device_map(self, device_count: int, recorded: list[tuple[int, str, int]],
                         device_map: dict[int, int] | None = None) -> dict[int, int]:
        """Validate (and default) a recorded-ordinal to local-ordinal map.

        The source machine must have had as many GPUs as this one, and every
        device the task used must map onto one of the same model and memory.
        """
        if device_count != len(self.devices):
            raise TopologyMismatch(
                f"checkpoint was taken with {device_count} GPU(s), "
                f"this machine has {len(self.devices)}")
        if device_map is None:
            device_map = {o: o for o in range(device_count)}
        if not {o for o, _, _ in recorded} <= set(device_map):
            raise TopologyMismatch("device map does not cover the recorded devices")
        if len(set(device_map.values())) != len(device_map):
            raise TopologyMismatch("device map is not one-to-one")
        for ordinal, model, memory in recorded:
            target = self.device(device_map[ordinal])
            if target.model != model or target.memory != memory:
                raise TopologyMismatch(
                    f"device {ordinal} was {model}/{memory}, target "
                    f"{target.ordinal} is {target.model}/{target.memory}")
        return dict(device_map)

    def adopt(self, pid: int, blob: bytes) -> CudaTaskState:
        """Install a checkpointed task from a host blob (restore side)."""
        with self._mutex:
            decode_blob(blob)
            if pid in self.tasks:
                raise InvalidState(f"pid {pid} already attached to the CUDA driver")
            st = self.tasks[pid] = CudaTaskState(pid, phase=CudaPhase.CHECKPOINTED,
                                                 host_blob=bytes(blob))
            return st

    def restore_from_host(self, pids, device_map: dict[int, int] | None = None) -> int:
        pids = list(pids)
        with self._mutex:
            states = [self.task(p) for p in pids]
            decoded = []
            for st in states:
                if st.host_blob is None or st.phase is not CudaPhase.CHECKPOINTED:
                    raise MissingBlob(f"pid {st.pid} has no checkpoint to restore")
                c = decode_blob(st.host_blob)
                decoded.append((st, c, self.check_device_map(c.device_count, c.devices,
                                                             device_map)))
            need = {}
            for _, c, dmap in decoded:
                for a in c.allocs:
                    need[dmap[a.ordinal]] = need.get(dmap[a.ordinal], 0) + a.size
            for ordinal, n in need.items():
                dev = self.devices[ordinal]
                if dev.used + n > dev.memory:
                    raise TopologyMismatch(f"device {ordinal} lacks memory for restore")
            moved = 0
            for st, c, dmap in decoded:
                st.device_allocs = {}
                for a in c.allocs:
                    a.ordinal = dmap[a.ordinal]
                    st.device_allocs[a.alloc_id] = a
                    self.devices[a.ordinal].used += a.size
                    moved += a.size
                st.streams = [StreamState(s.stream_id, dmap[s.ordinal], s.completed)
                              for s in c.streams]
                st.contexts = [dmap.get(x, x) for x in c.contexts]
                st.leftover_handles = list(c.leftover_handles)
                st.next_alloc_id, st.next_stream_id = c.next_alloc_id, c.next_stream_id
                st.next_addr, st.next_callback_id = c.next_addr, c.next_callback_id
                st.host_blob = None
                st.phase = CudaPhase.LOCKED
            self.clock.advance(moved * self.cost.h2d_per_byte)
            return moved

    def unlock(self, pids) -> None:
        pids = list(pids)
        with self._mutex:
            states = [self.task(p) for p in pids]
            for st in states:
                if st.phase is not CudaPhase.LOCKED:
                    raise NotLocked(f"pid {st.pid} is {st.phase.value}")
            for st in states:
                st.phase = CudaPhase.RUNNING
            self.clock.advance(self.cost.unlock_per_task * len(states))


def state_digest(st: CudaTaskState) -> str:
    h = hashlib.sha256()
    h.update(repr(cuda_view(st)).encode())
    return h.hexdigest()


def cuda_view(st: CudaTaskState) -> tuple:
    """Canonical, comparable view of a task's CUDA state."""
    return (
        st.pid, st.phase.value,
        tuple((a.alloc_id, a.ordinal, a.addr, a.size, bytes(a.contents))
              for a in sorted(st.device_allocs.values(), key=lambda a: a.alloc_id)),
        tuple((s.stream_id, s.ordinal, s.completed) for s in st.streams),
        tuple(st.contexts),
        tuple((c.id, c.completion_delay) for c in st.pending_callbacks),
        st.host_blob,
        tuple((h.handle, h.ordinal) for h in st.leftover_handles),
        st.next_alloc_id, st.next_stream_id, st.next_addr, st.next_callback_id,
    )
