"""Simulated KFD-style driver: buffer objects, user-mode queues, events,
device topology, and the checkpoint/restore ioctls.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import struct
import threading
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum

from .errors import (BadGpuidMap, DeviceBusy, DeviceLocked, InvalidState, NoKfdFd,
                     NotPaused, NotRestored, PermissionDenied, TopologyIncompatible)

CAP_CHECKPOINT_RESTORE = "CAP_CHECKPOINT_RESTORE"
CAP_SYS_ADMIN = "CAP_SYS_ADMIN"
CHECKPOINT_CAPS = frozenset({CAP_CHECKPOINT_RESTORE, CAP_SYS_ADMIN})

KFD_PATH = "/dev/kfd"
RENDER_MINOR_BASE = 128
EVENT_SLOT_SIZE = 8
PACKET_SIZE = 64


class BoKind(Enum):
    VRAM = "vram"
    GTT = "gtt"
    USERPTR = "userptr"
    DOORBELL = "doorbell"
    MMIO = "mmio"


CONTENT_KINDS = frozenset({BoKind.VRAM, BoKind.GTT, BoKind.USERPTR})


class QueueKind(Enum):
    COMPUTE = "compute"
    DMA = "dma"


class KfdPhase(Enum):
    RUNNING = "running"
    PAUSED = "paused"
    RESTORED = "restored"


@dataclass
class BufferObject:
    handle: int
    kind: BoKind
    size: int
    virtual_addr: int
    mmap_offset: int
    gpuid: int
    contents: bytearray | None = None


QUEUE_BO_ROLES = ("ring_buffer", "aql_queue", "eop_buffer", "ctx_save_area")


@dataclass
class QueueState:
    queue_id: int
    kind: QueueKind
    gpuid: int
    ring_size: int
    doorbell_offset: int
    user_bos: dict[str, int]
    read_ptr: int = 0
    write_ptr: int = 0
    aql_ptr: int = 0
    control_stack: bytes = b""
    mqd: bytes = b""
    preempted: bool = False


@dataclass
class KfdEvent:
    event_id: int
    signaled: bool = False


@dataclass(frozen=True)
class DeviceProps:
    instruction_set: str
    compute_units: int
    vram: int
    host_vram_accessible: bool = True


@dataclass(frozen=True)
class TopologyNode:
    gpuid: int
    props: DeviceProps
    location: int
    render_node: str
    links: frozenset = frozenset()


def compute_gpuid(props: DeviceProps, salt: str) -> int:
    """Derive a GPUID from the instruction set and compute-unit count.

    ``salt`` distinguishes otherwise identical devices (machine identity and
    bus location), so the same board gets a different id on another host.
    """
    h = hashlib.blake2b(f"{salt}|{props.instruction_set}|{props.compute_units}".encode(),
                        digest_size=4)
    return int.from_bytes(h.digest(), "little") | 0x1  # never zero


class GpuTopology:
    def __init__(self, nodes=()):
        self.nodes: list[TopologyNode] = list(nodes)
        ids = [n.gpuid for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise InvalidState("duplicate gpuid in topology")

    @classmethod
    def build(cls, devices, links=(), salt: str = "") -> GpuTopology:
        """``devices``: list of (props, location); ``links``: index pairs."""
        gpuids = [compute_gpuid(p, f"{salt}:{loc}") for p, loc in devices]
        adj = defaultdict(set)
        for a, b in links:
            adj[a].add(gpuids[b])
            adj[b].add(gpuids[a])
        return cls(TopologyNode(g, p, loc, f"/dev/dri/renderD{RENDER_MINOR_BASE + i}",
                                frozenset(adj[i]))
                   for i, (g, (p, loc)) in enumerate(zip(gpuids, devices)))

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, gpuid: int) -> TopologyNode:
        for n in self.nodes:
            if n.gpuid == gpuid:
                return n
        raise InvalidState(f"unknown gpuid {gpuid:#x}")

    def by_render_node(self, path: str) -> TopologyNode | None:
        for n in self.nodes:
            if n.render_node == path:
                return n
        return None

    @property
    def gpuids(self) -> list[int]:
        return [n.gpuid for n in self.nodes]


def topology_diff(source: list[TopologyNode], target: GpuTopology,
                  gpuid_map: dict[int, int]) -> list[str]:
    """Differences that make ``target`` unable to host ``source`` under the map."""
    diff = []
    if len(source) != len(target):
        diff.append(f"device count {len(source)} != {len(target)}")
        return diff
    tmap = {n.gpuid: n for n in target.nodes}
    for s in source:
        t = tmap.get(gpuid_map.get(s.gpuid))
        if t is None:
            diff.append(f"gpuid {s.gpuid:#x} has no target")
            continue
        for f in ("instruction_set", "compute_units", "vram", "host_vram_accessible"):
            if getattr(s.props, f) != getattr(t.props, f):
                diff.append(f"{s.gpuid:#x}->{t.gpuid:#x}: {f} "
                            f"{getattr(s.props, f)!r} != {getattr(t.props, f)!r}")
        want = {gpuid_map.get(x) for x in s.links}
        if want != set(t.links):
            diff.append(f"{s.gpuid:#x}->{t.gpuid:#x}: links differ")
    return diff


def check_gpuid_map(source: list[TopologyNode], target: GpuTopology,
                    gpuid_map: dict[int, int]) -> None:
    src_ids = {n.gpuid for n in source}
    if set(gpuid_map) != src_ids:
        raise BadGpuidMap("gpuid map must cover exactly the checkpointed gpuids")
    if len(set(gpuid_map.values())) != len(gpuid_map):
        raise BadGpuidMap("gpuid map is not one-to-one")
    if not set(gpuid_map.values()) <= set(target.gpuids):
        if len(source) == len(target):
            raise BadGpuidMap("gpuid map targets unknown devices")
    diff = topology_diff(source, target, gpuid_map)
    if diff:
        raise TopologyIncompatible("incompatible GPU topology: " + "; ".join(diff), diff)


def match_topology(source: list[TopologyNode], target: GpuTopology) -> dict[int, int]:
    """Find a gpuid map under which ``target`` can host ``source``.

    Identity is preferred when every source gpuid exists on the target;
    otherwise device orderings are tried in order, so the result is stable.
    """
    if not source:
        return {}
    if len(source) != len(target):
        raise TopologyIncompatible(
            f"checkpoint used {len(source)} GPU(s), target has {len(target)}",
            [f"device count {len(source)} != {len(target)}"])
    ident = {n.gpuid: n.gpuid for n in source}
    if set(ident) <= set(target.gpuids) and not topology_diff(source, target, ident):
        return ident
    first_diff = None
    for perm in itertools.permutations(target.nodes):
        m = {s.gpuid: t.gpuid for s, t in zip(source, perm)}
        diff = topology_diff(source, target, m)
        if not diff:
            return m
        first_diff = first_diff or diff
    raise TopologyIncompatible("no compatible device assignment: " + "; ".join(first_diff),
                               first_diff)


@dataclass
class Caller:
    pid: int
    caps: frozenset = frozenset()


@dataclass
class ProcessInfo:
    bos: int
    queues: int
    events: int
    gpuids: list[int]


@dataclass
class KfdCheckpointBundle:
    pid: int
    bos: list[BufferObject]
    queues: list[QueueState]
    events: list[KfdEvent]
    topology: list[TopologyNode]
    event_page: int = 0

    def content_bytes(self) -> int:
        return sum(len(b.contents) for b in self.bos if b.contents is not None)


@dataclass
class KfdProcessState:
    pid: int
    opener: int
    bos: dict[int, BufferObject] = field(default_factory=dict)
    queues: dict[int, QueueState] = field(default_factory=dict)
    events: dict[int, KfdEvent] = field(default_factory=dict)
    phase: KfdPhase = KfdPhase.RUNNING
    event_page: int = 0
    next_handle: int = 1
    next_queue_id: int = 0
    next_event_id: int = 1
    userptr_pending: dict[int, bytes] = field(default_factory=dict)


def _control_stack(q: QueueState) -> bytes:
    return struct.pack("<IQQ", q.queue_id, q.read_ptr, q.write_ptr)


def _mqd(q: QueueState) -> bytes:
    return struct.pack("<IIIQQQI", q.queue_id, 1 if q.kind is QueueKind.DMA else 0,
                       q.gpuid, q.read_ptr, q.write_ptr, q.aql_ptr, q.doorbell_offset)


class KfdDriver:
    def __init__(self, clock, cost, topology: GpuTopology, host=None, offset_base: int = 0):
        self.clock = clock
        self.cost = cost
        self.topology = topology
        self.host = host  # resolves userptr memory: host.task(pid).read_mem/write_mem
        self.processes: dict[int, KfdProcessState] = {}
        self.offset_base = offset_base
        self._offsets = {n.gpuid: offset_base for n in topology.nodes}
        self._live = defaultdict(dict)  # gpuid -> {mmap_offset: (size, pid)}
        self.mutations = defaultdict(int)
        self._pid_locks = defaultdict(threading.Lock)

    # -- plumbing -------------------------------------------------------------

    @contextmanager
    def _exclusive(self, pid: int):
        lk = self._pid_locks[pid]
        if not lk.acquire(blocking=False):
            raise DeviceBusy(f"another ioctl is in flight for pid {pid}")
        try:
            yield
        finally:
            lk.release()

    def render_node(self, gpuid: int) -> str:
        return self.topology.node(gpuid).render_node

    def process(self, pid: int) -> KfdProcessState:
        try:
            return self.processes[pid]
        except KeyError:
            raise NoKfdFd(f"pid {pid} has no open kfd descriptor") from None

    def drop(self, pid: int) -> None:
        self.processes.pop(pid, None)
        for live in self._live.values():
            for off in [o for o, (_, p) in live.items() if p == pid]:
                del live[off]

    def _next_offset(self, gpuid: int, size: int, pid: int, want: int | None = None) -> int:
        """Reserve an mmap offset range on ``gpuid``'s render node.

        ``want`` is kept when it lies in this driver's offset space and is
        free, so a restore on the same host keeps its original offsets.
        """
        span = (size + 0xFFF) & ~0xFFF
        live = self._live[gpuid]
        if want is not None and self.offset_base <= want < self.offset_base + (1 << 32) \
                and not any(o < want + span and want < o + s for o, (s, _) in live.items()):
            off = want
            self._offsets[gpuid] = max(self._offsets[gpuid], want + span)
        else:
            off = self._offsets[gpuid]
            self._offsets[gpuid] = off + span
        live[off] = (span, pid)
        return off

    def _host_read(self, pid: int, addr: int, n: int) -> bytes:
        return self.host.task(pid).read_mem(addr, n)

    def _host_write(self, pid: int, addr: int, data: bytes) -> None:
        self.host.task(pid).write_mem(addr, data)

    # -- normal operation -------------------------------------------------------

    def open_kfd(self, pid: int) -> str:
        if pid in self.processes:
            raise InvalidState(f"pid {pid} already opened {KFD_PATH}")
        self.processes[pid] = KfdProcessState(pid, opener=pid)
        return KFD_PATH

    def alloc_bo(self, pid: int, kind: BoKind, size: int, gpuid: int, virtual_addr: int,
                 contents: bytes | None = None) -> BufferObject:
        st = self.process(pid)
        self.topology.node(gpuid)
        if kind in (BoKind.VRAM, BoKind.GTT):
            data = bytearray(contents) if contents is not None else bytearray(size)
            if len(data) != size:
                raise ValueError("contents size mismatch")
        else:
            data = None
        bo = BufferObject(st.next_handle, kind, size, virtual_addr,
                          self._next_offset(gpuid, size, pid), gpuid, data)
        st.bos[bo.handle] = bo
        st.next_handle += 1
        return bo

    def create_queue(self, pid: int, kind: QueueKind, gpuid: int, user_bos: dict[str, int],
                     doorbell: int) -> QueueState:
        st = self.process(pid)
        for role in QUEUE_BO_ROLES:
            if user_bos.get(role) not in st.bos:
                raise InvalidState(f"queue {role} buffer missing")
        if st.bos.get(doorbell) is None or st.bos[doorbell].kind is not BoKind.DOORBELL:
            raise InvalidState("queue needs a doorbell BO")
        ring = st.bos[user_bos["ring_buffer"]]
        q = QueueState(st.next_queue_id, kind, gpuid, ring_size=ring.size // PACKET_SIZE,
                       doorbell_offset=st.next_queue_id * 8, user_bos=dict(user_bos))
        q.mqd = _mqd(q)
        q.control_stack = _control_stack(q)
        st.queues[q.queue_id] = q
        st.next_queue_id += 1
        return q

    def set_event_page(self, pid: int, handle: int) -> None:
        st = self.process(pid)
        if handle not in st.bos or st.bos[handle].kind is not BoKind.GTT:
            raise InvalidState("event page must be a GTT BO")
        st.event_page = handle

    def create_event(self, pid: int) -> KfdEvent:
        st = self.process(pid)
        if not st.event_page:
            raise InvalidState("no event page")
        page = st.bos[st.event_page]
        if st.next_event_id * EVENT_SLOT_SIZE + EVENT_SLOT_SIZE > page.size:
            raise InvalidState("event page full")
        ev = KfdEvent(st.next_event_id)
        st.events[ev.event_id] = ev
        st.next_event_id += 1
        return ev

    def _running(self, pid: int) -> KfdProcessState:
        st = self.process(pid)
        if st.phase is not KfdPhase.RUNNING:
            raise DeviceLocked(f"pid {pid} GPU queues are {st.phase.value}")
        return st

    def bo_read(self, pid: int, handle: int, offset: int, n: int) -> bytes:
        st = self.process(pid)
        bo = st.bos[handle]
        if bo.kind is BoKind.USERPTR:
            return self._host_read(pid, bo.virtual_addr + offset, n)
        return bytes(bo.contents[offset:offset + n])

    def submit(self, pid: int, queue_id: int, handle: int, offset: int, data: bytes) -> None:
        """Dispatch one packet that writes ``data`` into a buffer object."""
        st = self._running(pid)
        q = st.queues[queue_id]
        bo = st.bos[handle]
        if bo.kind not in CONTENT_KINDS or offset < 0 or offset + len(data) > bo.size:
            raise InvalidState("bad dispatch target")
        if bo.kind is BoKind.USERPTR:
            self._host_write(pid, bo.virtual_addr + offset, data)
        else:
            bo.contents[offset:offset + len(data)] = data
        ring = st.bos[q.user_bos["ring_buffer"]]
        slot = (q.write_ptr % q.ring_size) * PACKET_SIZE
        packet = struct.pack("<IIQ", handle, len(data), offset).ljust(PACKET_SIZE, b"\0")
        ring.contents[slot:slot + PACKET_SIZE] = packet
        q.write_ptr += 1
        q.aql_ptr = q.write_ptr * PACKET_SIZE
        q.read_ptr = q.write_ptr  # dispatches complete synchronously
        q.mqd = _mqd(q)
        q.control_stack = _control_stack(q)
        self.mutations[bo.gpuid] += 1
        self.clock.advance(self.cost.api_call)

    def signal_event(self, pid: int, event_id: int, value: bytes) -> None:
        st = self._running(pid)
        ev = st.events[event_id]
        ev.signaled = not ev.signaled
        page = st.bos[st.event_page]
        off = event_id * EVENT_SLOT_SIZE
        page.contents[off:off + EVENT_SLOT_SIZE] = value[:EVENT_SLOT_SIZE].ljust(EVENT_SLOT_SIZE, b"\0")

    # -- ioctls -----------------------------------------------------------------

    def _authorize(self, caller: Caller, pid: int) -> KfdProcessState:
        st = self.process(pid)
        if caller.pid != st.opener:
            raise PermissionDenied(
                f"pid {caller.pid} did not open {KFD_PATH} for pid {pid}")
        if not (frozenset(caller.caps) & CHECKPOINT_CAPS):
            raise PermissionDenied("CAP_CHECKPOINT_RESTORE or CAP_SYS_ADMIN required")
        return st

    def ioctl_process_info(self, caller: Caller, pid: int) -> ProcessInfo:
        """Collect counts, pause the process and evict all of its queues."""
        with self._exclusive(pid):
            st = self._authorize(caller, pid)
            if st.phase is not KfdPhase.RUNNING:
                raise InvalidState(f"pid {pid} is {st.phase.value}")
            for q in st.queues.values():
                q.preempted = True
                q.control_stack = _control_stack(q)
                q.mqd = _mqd(q)
            st.phase = KfdPhase.PAUSED
            self.clock.advance(self.cost.ioctl)
            gpuids = sorted({b.gpuid for b in st.bos.values()})
            return ProcessInfo(len(st.bos), len(st.queues), len(st.events), gpuids)

    def ioctl_checkpoint(self, caller: Caller, pid: int) -> KfdCheckpointBundle:
        with self._exclusive(pid):
            st = self._authorize(caller, pid)
            if st.phase is not KfdPhase.PAUSED:
                raise NotPaused(f"pid {pid} must be paused before CHECKPOINT")
            bos = []
            for bo in sorted(st.bos.values(), key=lambda b: b.handle):
                c = copy.copy(bo)
                if bo.kind is BoKind.USERPTR:
                    c.contents = bytearray(self._host_read(pid, bo.virtual_addr, bo.size))
                elif bo.contents is not None:
                    c.contents = bytearray(bo.contents)
                bos.append(c)
            bundle = KfdCheckpointBundle(
                pid, bos,
                [copy.deepcopy(q) for q in sorted(st.queues.values(), key=lambda q: q.queue_id)],
                [copy.copy(e) for e in sorted(st.events.values(), key=lambda e: e.event_id)],
                list(self.topology.nodes),
                st.event_page)
            self.clock.advance(self.cost.ioctl + bundle.content_bytes() * self.cost.d2h_per_byte)
            return bundle

    def ioctl_unpause(self, caller: Caller, pid: int) -> None:
        with self._exclusive(pid):
            st = self._authorize(caller, pid)
            if st.phase is not KfdPhase.PAUSED:
                raise NotPaused(f"pid {pid} is not paused")
            for q in st.queues.values():
                q.preempted = False
            st.phase = KfdPhase.RUNNING
            self.clock.advance(self.cost.ioctl)

    def ioctl_restore(self, caller: Caller, pid: int, bundle: KfdCheckpointBundle,
                      gpuid_map: dict[int, int]) -> dict[tuple[str, int], tuple[str, int]]:
        """Recreate BOs, queues and events, rewriting every gpuid through
        ``gpuid_map``. Returns the (render node, mmap offset) translation."""
        with self._exclusive(pid):
            st = self._authorize(caller, pid)
            if st.bos or st.queues or st.events or st.phase is not KfdPhase.RUNNING:
                raise InvalidState(f"pid {pid} already has GPU state")
            check_gpuid_map(bundle.topology, self.topology, gpuid_map)
            old_nodes = {n.gpuid: n for n in bundle.topology}
            offsets = {}
            for b in bundle.bos:
                new_gpuid = gpuid_map[b.gpuid]
                bo = BufferObject(b.handle, b.kind, b.size, b.virtual_addr,
                                  self._next_offset(new_gpuid, b.size, pid, b.mmap_offset), new_gpuid, None)
                if b.kind is BoKind.USERPTR:
                    st.userptr_pending[b.handle] = bytes(b.contents)
                elif b.kind in CONTENT_KINDS:
                    bo.contents = bytearray(b.contents)
                st.bos[bo.handle] = bo
                offsets[(old_nodes[b.gpuid].render_node, b.mmap_offset)] = (
                    self.render_node(new_gpuid), bo.mmap_offset)
            for q in bundle.queues:
                nq = copy.deepcopy(q)
                nq.gpuid = gpuid_map[q.gpuid]
                nq.preempted = True
                nq.mqd = _mqd(nq)
                nq.control_stack = _control_stack(nq)
                st.queues[nq.queue_id] = nq
            for e in bundle.events:
                st.events[e.event_id] = KfdEvent(e.event_id, e.signaled)
            st.event_page = bundle.event_page
            st.next_handle = max(st.bos, default=0) + 1
            st.next_queue_id = max(st.queues, default=-1) + 1
            st.next_event_id = max(st.events, default=0) + 1
            st.phase = KfdPhase.RESTORED
            self.clock.advance(self.cost.ioctl + bundle.content_bytes() * self.cost.h2d_per_byte)
            return offsets

    def finalize_userptr(self, pid: int) -> int:
        """Re-bind userptr BOs to the restored host VMAs."""
        st = self.process(pid)
        for handle, expected in sorted(st.userptr_pending.items()):
            bo = st.bos[handle]
            if self._host_read(pid, bo.virtual_addr, bo.size) != expected:
                raise InvalidState(f"pid {pid}: userptr BO {handle} disagrees with host memory")
        n = len(st.userptr_pending)
        st.userptr_pending.clear()
        return n

    def ioctl_resume(self, caller: Caller, pid: int) -> None:
        with self._exclusive(pid):
            st = self._authorize(caller, pid)
            if st.phase is not KfdPhase.RESTORED:
                raise NotRestored(f"pid {pid} has not been restored")
            if st.userptr_pending:
                raise InvalidState(f"pid {pid}: userptr mappings not finalized")
            for q in st.queues.values():
                q.preempted = False
            st.phase = KfdPhase.RUNNING
            self.clock.advance(self.cost.ioctl)


def kfd_view(st: KfdProcessState, host=None) -> tuple:
    """Canonical, comparable view of one process's KFD state."""
    bos = []
    for b in sorted(st.bos.values(), key=lambda b: b.handle):
        if b.kind is BoKind.USERPTR and host is not None and not st.userptr_pending:
            data = host.task(st.pid).read_mem(b.virtual_addr, b.size)
        else:
            data = bytes(b.contents) if b.contents is not None else None
        bos.append((b.handle, b.kind.value, b.size, b.virtual_addr, b.mmap_offset, b.gpuid, data))
    queues = tuple(
        (q.queue_id, q.kind.value, q.gpuid, q.ring_size, q.doorbell_offset,
         tuple(sorted(q.user_bos.items())), q.read_ptr, q.write_ptr, q.aql_ptr,
         q.control_stack, q.mqd, q.preempted)
        for q in sorted(st.queues.values(), key=lambda q: q.queue_id))
    events = tuple((e.event_id, e.signaled) for e in sorted(st.events.values(), key=lambda e: e.event_id))
    return (st.pid, st.opener, st.phase.value, tuple(bos), queues, events, st.event_page,
            st.next_handle, st.next_queue_id, st.next_event_id)
