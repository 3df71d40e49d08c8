"""Process tree construction from a declarative spec, and the seeded
synthetic workload that mutates CPU and device memory one step at a time.
"""

from __future__ import annotations

import random
import zlib
from dataclasses import dataclass, field

from .errors import InvalidState, SpecError
from .host import (PAGE_SIZE, DeviceFile, RunState, SimProcessTree, SimTask, Vma,
                   WorkloadState, page_align)
from .kfd import KFD_PATH, QUEUE_BO_ROLES, BoKind, QueueKind
from .machine import NVIDIA_CONTROL_NODES, Machine

AUTO_VA_BASE = 0x7F00_0000_0000
QUEUE_RING_SLOTS = 16
EVENT_PAGE_SIZE = 4096


@dataclass
class CudaSpec:
    allocs: list[tuple[int, int]] = field(default_factory=list)  # (device, size)
    streams: int = 1
    callbacks: list[float | None] = field(default_factory=list)
    leftover: list[int] = field(default_factory=list)  # device ordinals


@dataclass
class KfdSpec:
    bos: list[tuple[str, int, int]] = field(default_factory=list)  # (kind, device, size)
    queues: list[tuple[str, int]] = field(default_factory=list)    # (kind, device)
    events: int = 0


@dataclass
class ProcessSpec:
    pid: int
    ppid: int = 0
    threads: int = 1
    vmas: list[tuple[int, int]] = field(default_factory=list)  # (start, length)
    seed: int | None = None
    cpu_writes: int = 4
    device_writes: int = 2
    write_size: int = 32
    cuda: CudaSpec | None = None
    kfd: KfdSpec | None = None


@dataclass
class ProcessTreeSpec:
    processes: list[ProcessSpec]
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> ProcessTreeSpec:
        try:
            procs = []
            for p in d["processes"]:
                cuda = kfd = None
                if "cuda" in p:
                    c = p["cuda"]
                    cuda = CudaSpec(
                        allocs=[(int(a.get("device", 0)), int(a["size"])) for a in c.get("allocs", [])],
                        streams=int(c.get("streams", 1)),
                        callbacks=[None if x in (None, "never") else float(x)
                                   for x in c.get("callbacks", [])],
                        leftover=[int(x) for x in c.get("leftover", [])])
                if "kfd" in p:
                    k = p["kfd"]
                    kfd = KfdSpec(
                        bos=[(str(b["kind"]), int(b.get("device", 0)), int(b["size"]))
                             for b in k.get("bos", [])],
                        queues=[(str(q.get("kind", "compute")), int(q.get("device", 0)))
                                for q in k.get("queues", [])],
                        events=int(k.get("events", 0)))
                w = p.get("workload", {})
                procs.append(ProcessSpec(
                    pid=int(p["pid"]), ppid=int(p.get("ppid", 0)), threads=int(p.get("threads", 1)),
                    vmas=[(int(v["start"]), int(v["length"])) for v in p.get("vmas", [])],
                    seed=p.get("seed"),
                    cpu_writes=int(w.get("cpu_writes", 4)),
                    device_writes=int(w.get("device_writes", 2)),
                    write_size=int(w.get("write_size", 32)),
                    cuda=cuda, kfd=kfd))
            return cls(procs, int(d.get("seed", 0)))
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise SpecError(f"bad process tree spec: {e!r}") from None

    def to_dict(self) -> dict:
        out = []
        for p in self.processes:
            d = {"pid": p.pid, "ppid": p.ppid, "threads": p.threads,
                 "vmas": [{"start": s, "length": n} for s, n in p.vmas],
                 "workload": {"cpu_writes": p.cpu_writes, "device_writes": p.device_writes,
                              "write_size": p.write_size}}
            if p.seed is not None:
                d["seed"] = p.seed
            if p.cuda is not None:
                d["cuda"] = {"allocs": [{"device": o, "size": n} for o, n in p.cuda.allocs],
                             "streams": p.cuda.streams,
                             "callbacks": ["never" if x is None else x for x in p.cuda.callbacks],
                             "leftover": list(p.cuda.leftover)}
            if p.kfd is not None:
                d["kfd"] = {"bos": [{"kind": k, "device": g, "size": n} for k, g, n in p.kfd.bos],
                            "queues": [{"kind": k, "device": g} for k, g in p.kfd.queues],
                            "events": p.kfd.events}
            out.append(d)
        return {"seed": self.seed, "processes": out}


class _VaAllocator:
    def __init__(self, task: SimTask):
        top = max((v.end for v in task.vmas), default=0)
        self.next = max(AUTO_VA_BASE, page_align(top) + PAGE_SIZE)

    def take(self, size: int) -> int:
        addr = self.next
        self.next += page_align(size) + PAGE_SIZE  # guard page
        return addr


def _rng(*parts) -> random.Random:
    return random.Random(":".join(str(p) for p in parts))


def _task_seed(tree_seed: int, p: ProcessSpec) -> int:
    if p.seed is not None:
        return int(p.seed)
    return zlib.crc32(f"{tree_seed}:{p.pid}".encode())


def spawn_tree(spec: ProcessTreeSpec, machine: Machine) -> SimProcessTree:
    """Create every process of ``spec`` on ``machine``, all Running."""
    if not spec.processes:
        raise SpecError("process tree spec needs at least one process")
    pids = [p.pid for p in spec.processes]
    if len(set(pids)) != len(pids):
        raise SpecError("duplicate pid in spec")
    for pid in pids:
        if pid in machine.tasks:
            raise SpecError(f"pid {pid} already in use on {machine.name}")

    tasks = []
    for p in spec.processes:
        if p.pid <= 0 or p.threads < 1:
            raise SpecError(f"pid {p.pid}: bad pid or thread count")
        seed = _task_seed(spec.seed, p)
        t = SimTask(p.pid, p.ppid, [p.pid] + [p.pid * 1000 + i for i in range(1, p.threads)],
                    workload=WorkloadState(seed, cpu_writes=p.cpu_writes,
                                           device_writes=p.device_writes,
                                           write_size=p.write_size))
        for start, length in p.vmas:
            t.add_vma(Vma(start, length, contents=bytearray(_rng(seed, "init", start).randbytes(length))))
        tasks.append(t)

    tree = SimProcessTree(machine, tasks)
    if not any(t.ppid == 0 or t.ppid not in tree.tasks for t in tasks):
        raise SpecError("process tree has no root")
    try:
        for p, t in zip(spec.processes, tasks):
            machine.register(t)
            va = _VaAllocator(t)
            if p.cuda is not None:
                _setup_cuda(machine, t, p.cuda, va)
            if p.kfd is not None:
                _setup_kfd(machine, t, p.kfd, va)
    except Exception:
        for t in tasks:
            if machine.tasks.get(t.pid) is t:
                machine.unregister(t.pid)
        raise
    return tree


def _setup_cuda(machine: Machine, t: SimTask, c: CudaSpec, va: _VaAllocator) -> None:
    drv = machine.cuda
    drv.attach(t.pid)
    used = sorted({o for o, _ in c.allocs} | set(c.leftover))
    for o in used:
        if not 0 <= o < len(drv.devices):
            raise SpecError(f"pid {t.pid}: no CUDA device {o} on {machine.name}")
    for path in NVIDIA_CONTROL_NODES:
        t.open_device(path)
    for o in sorted({o for o, _ in c.allocs}):
        t.open_device(drv.devices[o].path)
    seed = t.workload.seed
    for i, (o, size) in enumerate(c.allocs):
        drv.malloc(t.pid, o, size, init=_rng(seed, "cuda", i).randbytes(size))
    stream_devs = sorted({o for o, _ in c.allocs}) or [0]
    if c.allocs:
        for i in range(max(c.streams, 1)):
            drv.stream_create(t.pid, stream_devs[i % len(stream_devs)])
    for delay in c.callbacks:
        drv.add_callback(t.pid, delay)
    for o in c.leftover:
        drv.add_leftover(t.pid, o)
        path = drv.devices[o].path
        t.open_device(path, leftover=True)
        t.add_vma(Vma(va.take(PAGE_SIZE), PAGE_SIZE, backing=DeviceFile(path, 0)))


def _setup_kfd(machine: Machine, t: SimTask, k: KfdSpec, va: _VaAllocator) -> None:
    drv = machine.kfd
    nodes = drv.topology.nodes
    devs = sorted({g for _, g, _ in k.bos} | {g for _, g in k.queues})
    for g in devs:
        if not 0 <= g < len(nodes):
            raise SpecError(f"pid {t.pid}: no KFD device {g} on {machine.name}")
    drv.open_kfd(t.pid)
    t.open_device(KFD_PATH)
    for g in devs or ([0] if k.events and nodes else []):
        t.open_device(nodes[g].render_node)
    seed = t.workload.seed

    def mapped_bo(kind: BoKind, g: int, size: int, init: bytes | None = None):
        addr = va.take(size)
        bo = drv.alloc_bo(t.pid, kind, size, nodes[g].gpuid, addr, init)
        t.add_vma(Vma(addr, page_align(size),
                      backing=DeviceFile(nodes[g].render_node, bo.mmap_offset)))
        return bo

    if k.events:
        if not nodes:
            raise SpecError(f"pid {t.pid}: events need a KFD device")
        g0 = devs[0] if devs else 0
        page = mapped_bo(BoKind.GTT, g0, EVENT_PAGE_SIZE)
        drv.set_event_page(t.pid, page.handle)
    for i, (kind_name, g, size) in enumerate(k.bos):
        try:
            kind = BoKind(kind_name)
        except ValueError:
            raise SpecError(f"pid {t.pid}: unknown BO kind {kind_name!r}") from None
        if size <= 0:
            raise SpecError(f"pid {t.pid}: BO size must be positive")
        if kind is BoKind.USERPTR:
            addr = va.take(size)
            t.add_vma(Vma(addr, page_align(size),
                          contents=bytearray(_rng(seed, "userptr", i).randbytes(page_align(size)))))
            drv.alloc_bo(t.pid, kind, size, nodes[g].gpuid, addr)
        elif kind in (BoKind.VRAM, BoKind.GTT):
            mapped_bo(kind, g, size, _rng(seed, "bo", i).randbytes(size))
        else:
            mapped_bo(kind, g, size)
    doorbells = {}
    for kind_name, g in k.queues:
        try:
            qkind = QueueKind(kind_name)
        except ValueError:
            raise SpecError(f"pid {t.pid}: unknown queue kind {kind_name!r}") from None
        if g not in doorbells:
            doorbells[g] = mapped_bo(BoKind.DOORBELL, g, PAGE_SIZE).handle
        sizes = {"ring_buffer": QUEUE_RING_SLOTS * 64, "aql_queue": 4096,
                 "eop_buffer": 4096, "ctx_save_area": 8192}
        user_bos = {role: mapped_bo(BoKind.GTT, g, sizes[role]).handle for role in QUEUE_BO_ROLES}
        drv.create_queue(t.pid, qkind, nodes[g].gpuid, user_bos, doorbells[g])
    for _ in range(k.events):
        drv.create_event(t.pid)


# -- workload ----------------------------------------------------------------

@dataclass(frozen=True)
class MutationRecord:
    """Everything one workload step changed, in order.

    Entries are ``(space, target, offset, new_bytes)`` with space one of
    ``cpu`` (target = virtual address), ``cuda`` (allocation id), ``kfd``
    (BO handle) or ``event`` (event id, slot value).
    """

    pid: int
    step: int
    entries: tuple


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


def kfd_data_bos(machine: Machine, pid: int) -> list[int]:
    """BOs a workload may dispatch into: content BOs the driver does not own."""
    st = machine.kfd.processes.get(pid)
    if st is None:
        return []
    internal = {st.event_page}
    for q in st.queues.values():
        internal.update(q.user_bos.values())
    return [h for h, b in sorted(st.bos.items())
            if b.kind in (BoKind.VRAM, BoKind.GTT, BoKind.USERPTR) and h not in internal]


def run_workload_step(tree: SimProcessTree, pid: int) -> MutationRecord:
    """Advance ``pid``'s workload by one iteration.

    Every write mixes fresh seeded bytes with bytes already in memory, so a
    wrongly restored byte changes all later output.
    """
    with tree.lock:
        task = tree.task(pid)
        if task.run_state is not RunState.RUNNING:
            raise InvalidState(f"pid {pid} is {task.run_state.value}; cannot run")
        machine = tree.machine
        w = task.workload
        rng = _rng(w.seed, "step", w.steps)
        entries = []

        anon = task.anon_vmas()
        for _ in range(w.cpu_writes if anon else 0):
            v = rng.choice(anon)
            n = min(w.write_size, v.length)
            dst = rng.randrange(v.length - n + 1)
            src = rng.randrange(v.length - n + 1)
            new = _xor(rng.randbytes(n), v.contents[src:src + n])
            v.contents[dst:dst + n] = new
            entries.append(("cpu", v.start + dst, new))

        cst = machine.cuda.tasks.get(pid)
        if cst is not None and cst.device_allocs and cst.streams:
            ids = sorted(cst.device_allocs)
            for _ in range(w.device_writes):
                a = cst.device_allocs[rng.choice(ids)]
                n = min(w.write_size, a.size)
                off = rng.randrange(a.size - n + 1)
                stream = rng.choice(cst.streams).stream_id
                new = machine.cuda.launch_kernel(pid, stream, a.alloc_id, off, rng.randbytes(n))
                entries.append(("cuda", a.alloc_id, off, new))

        kst = machine.kfd.processes.get(pid)
        if kst is not None:
            data = kfd_data_bos(machine, pid)
            if data and kst.queues:
                qids = sorted(kst.queues)
                for _ in range(w.device_writes):
                    h = rng.choice(data)
                    bo = kst.bos[h]
                    n = min(w.write_size, bo.size)
                    off = rng.randrange(bo.size - n + 1)
                    src = rng.randrange(bo.size - n + 1)
                    new = _xor(rng.randbytes(n), machine.kfd.bo_read(pid, h, src, n))
                    machine.kfd.submit(pid, rng.choice(qids), h, off, new)
                    entries.append(("kfd", h, off, new))
            if kst.events:
                ev = rng.choice(sorted(kst.events))
                value = rng.randbytes(8)
                machine.kfd.signal_event(pid, ev, value)
                entries.append(("event", ev, 0, value))

        w.steps += 1
        return MutationRecord(pid, w.steps - 1, tuple(entries))


def run_steps(tree: SimProcessTree, n: int, pids=None) -> list[MutationRecord]:
    """Round-robin ``n`` steps over ``pids`` (default: every task)."""
    pids = list(tree.pids if pids is None else pids)
    out = []
    for _ in range(n):
        for pid in pids:
            out.append(run_workload_step(tree, pid))
    return out
