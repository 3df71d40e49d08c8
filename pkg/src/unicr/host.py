"""Simulated host OS: tasks, VMAs, the freezer cgroup and ptrace-style seize.

Nothing here touches the real kernel. Addresses are plain integers and task
memory is a ``bytearray`` per anonymous VMA.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

from .errors import InvalidState, NoSuchTask, SpecError

PAGE_SIZE = 4096


def page_align(n: int) -> int:
    return (n + PAGE_SIZE - 1) // PAGE_SIZE * PAGE_SIZE


class SimClock:
    """Simulated time in seconds. Advances only when something charges it."""

    def __init__(self, now: float = 0.0):
        self.now = now

    def advance(self, dt: float) -> float:
        if dt < 0:
            raise ValueError("time cannot go backwards")
        self.now += dt
        return self.now


@dataclass
class CostModel:
    """Per-operation costs in simulated seconds."""

    seize_per_task: float = 0.002
    freeze_per_task: float = 0.001
    thaw_per_task: float = 0.001
    lock_per_task: float = 0.01
    unlock_per_task: float = 0.005
    ioctl: float = 0.001
    api_call: float = 5e-6
    page_scan: float = 2e-6
    write_per_byte: float = 1e-9
    read_per_byte: float = 1e-9
    d2h_per_byte: float = 2e-10
    h2d_per_byte: float = 2e-10
    fork_per_task: float = 0.001
    vma_restore_per_page: float = 1e-6


class RunState(Enum):
    RUNNING = "running"
    SEIZED = "seized"
    FROZEN = "frozen"


class FreezerState(Enum):
    THAWED = "thawed"
    FROZEN = "frozen"


@dataclass(frozen=True)
class DeviceFile:
    """Backing of a device-mapped VMA."""

    device_name: str
    mmap_offset: int


@dataclass
class Vma:
    start: int
    length: int
    backing: DeviceFile | None = None
    contents: bytearray | None = None

    def __post_init__(self):
        if self.length <= 0:
            raise SpecError(f"VMA at {self.start:#x} has non-positive length")
        if self.backing is None:
            if self.contents is None:
                self.contents = bytearray(self.length)
            elif len(self.contents) != self.length:
                raise SpecError(f"VMA at {self.start:#x}: contents size mismatch")
        elif self.contents is not None:
            raise SpecError("device-backed VMAs carry no contents")

    @property
    def end(self) -> int:
        return self.start + self.length

    @property
    def is_device(self) -> bool:
        return self.backing is not None

    def overlaps(self, other: Vma) -> bool:
        return self.start < other.end and other.start < self.end

    def pages(self) -> int:
        return page_align(self.length) // PAGE_SIZE


@dataclass
class DeviceFd:
    fd: int
    path: str
    leftover: bool = False


@dataclass
class WorkloadState:
    """Seed-driven synthetic workload. ``steps`` is part of the task's memory
    image, so a restored task continues the same sequence."""

    seed: int
    steps: int = 0
    cpu_writes: int = 4
    device_writes: int = 2
    write_size: int = 32


@dataclass
class SimTask:
    pid: int
    ppid: int
    thread_ids: list[int]
    vmas: list[Vma] = field(default_factory=list)
    open_devices: list[DeviceFd] = field(default_factory=list)
    run_state: RunState = RunState.RUNNING
    workload: WorkloadState = field(default_factory=lambda: WorkloadState(seed=0))
    next_fd: int = 3

    def add_vma(self, vma: Vma) -> Vma:
        for other in self.vmas:
            if other.overlaps(vma):
                raise SpecError(
                    f"pid {self.pid}: VMA {vma.start:#x}+{vma.length:#x} overlaps "
                    f"{other.start:#x}+{other.length:#x}")
        self.vmas.append(vma)
        self.vmas.sort(key=lambda v: v.start)
        return vma

    def find_vma(self, addr: int) -> Vma:
        for v in self.vmas:
            if v.start <= addr < v.end:
                return v
        raise InvalidState(f"pid {self.pid}: no VMA maps {addr:#x}")

    def open_device(self, path: str, leftover: bool = False) -> DeviceFd:
        dfd = DeviceFd(self.next_fd, path, leftover)
        self.next_fd += 1
        self.open_devices.append(dfd)
        return dfd

    def anon_vmas(self) -> list[Vma]:
        return [v for v in self.vmas if not v.is_device]

    def device_vmas(self) -> list[Vma]:
        return [v for v in self.vmas if v.is_device]

    def read_mem(self, addr: int, n: int) -> bytes:
        v = self.find_vma(addr)
        if v.is_device or addr + n > v.end:
            raise InvalidState(f"pid {self.pid}: bad host read at {addr:#x}")
        off = addr - v.start
        return bytes(v.contents[off:off + n])

    def write_mem(self, addr: int, data: bytes) -> None:
        v = self.find_vma(addr)
        if v.is_device or addr + len(data) > v.end:
            raise InvalidState(f"pid {self.pid}: bad host write at {addr:#x}")
        off = addr - v.start
        v.contents[off:off + len(data)] = data


class FreezerCgroup:
    def __init__(self, tasks: dict[int, SimTask], member_pids=(), lock=None):
        self._tasks = tasks
        self.member_pids = set(member_pids)
        self.state = FreezerState.THAWED
        self.lock = lock or threading.RLock()

    def members(self) -> list[SimTask]:
        return [self._tasks[p] for p in sorted(self.member_pids) if p in self._tasks]


class SimProcessTree:
    """A process tree living on one simulated machine.

    Single owner: operations are serialized through ``self.lock``.
    """

    def __init__(self, machine, tasks: list[SimTask] = ()):
        self.machine = machine
        self.tasks: dict[int, SimTask] = {}
        self.lock = threading.RLock()
        for t in tasks:
            self.add_task(t)
        self.cgroup = FreezerCgroup(self.tasks, self.tasks.keys(), self.lock)

    def add_task(self, task: SimTask) -> SimTask:
        if task.pid in self.tasks:
            raise SpecError(f"duplicate pid {task.pid}")
        self.tasks[task.pid] = task
        if hasattr(self, "cgroup"):
            self.cgroup.member_pids.add(task.pid)
        return task

    def task(self, pid: int) -> SimTask:
        try:
            return self.tasks[pid]
        except KeyError:
            raise NoSuchTask(f"no task with pid {pid}") from None

    def __iter__(self) -> Iterator[SimTask]:
        return iter(self.tasks.values())

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def pids(self) -> list[int]:
        return list(self.tasks)

    @property
    def root(self) -> SimTask:
        for t in self.tasks.values():
            if t.ppid not in self.tasks:
                return t
        raise SpecError("process tree has no root")

    def children(self, pid: int) -> list[int]:
        return [t.pid for t in self.tasks.values() if t.ppid == pid]


# -- suspension ------------------------------------------------------------

def seize_interrupt(tree: SimProcessTree, pids) -> None:
    """Stop the listed tasks and all their threads, ptrace seize+interrupt style."""
    pids = list(pids)
    tasks = [tree.task(p) for p in pids]
    for t in tasks:
        if t.run_state is not RunState.RUNNING:
            raise InvalidState(
                f"pid {t.pid} is {t.run_state.value}; seize requires a runnable task")
    with tree.lock:
        cost = tree.machine.cost.seize_per_task if tree.machine else 0.0
        for t in tasks:
            t.run_state = RunState.SEIZED
            if tree.machine:
                tree.machine.clock.advance(cost)


def resume(tree: SimProcessTree, pids) -> None:
    """Detach from seized tasks and let them run again."""
    tasks = [tree.task(p) for p in pids]
    for t in tasks:
        if t.run_state is not RunState.SEIZED:
            raise InvalidState(f"pid {t.pid} is {t.run_state.value}, not seized")
    with tree.lock:
        for t in tasks:
            t.run_state = RunState.RUNNING


def _clock_charge(cgroup: FreezerCgroup, per_task: float, n: int, machine) -> None:
    if machine is not None:
        machine.clock.advance(per_task * n)


def freeze(cgroup: FreezerCgroup, machine=None) -> None:
    with cgroup.lock:
        members = cgroup.members()
        for t in members:
            if t.run_state is RunState.RUNNING:
                t.run_state = RunState.FROZEN
        cgroup.state = FreezerState.FROZEN
        if machine is not None:
            _clock_charge(cgroup, machine.cost.freeze_per_task, len(members), machine)


def thaw(cgroup: FreezerCgroup, machine=None) -> None:
    with cgroup.lock:
        members = cgroup.members()
        for t in members:
            if t.run_state is RunState.FROZEN:
                t.run_state = RunState.RUNNING
        cgroup.state = FreezerState.THAWED
        if machine is not None:
            _clock_charge(cgroup, machine.cost.thaw_per_task, len(members), machine)
