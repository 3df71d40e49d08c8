"""Device-proxy baseline: log every device API call, replay the log to rebuild
device state. Exists to contrast with the driver-based checkpoint path."""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field

from .cuda import CudaDriver, CudaTaskState
from .errors import NonDeterministicDivergence
from .machine import Machine, MachineSpec

DEFAULT_CALL_OVERHEAD = 20e-6


def _digest(*parts) -> str:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(p if isinstance(p, bytes) else repr(p).encode())
    return h.hexdigest()


@dataclass(frozen=True)
class CallEntry:
    api: str
    args: tuple
    params_digest: str
    handles: tuple        # handles created by the call
    result_digest: str    # digest of data the call produced, "" if none
    overhead: float


class CallLog:
    def __init__(self):
        self._entries: list[CallEntry] = []

    def append(self, e: CallEntry) -> None:
        self._entries.append(e)

    @property
    def entries(self) -> tuple[CallEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)


class DirectRuntime:
    """Application-facing API bound straight to the driver."""

    def __init__(self, driver: CudaDriver, pid: int):
        self.driver = driver
        self.pid = pid

    def malloc(self, ordinal, size, init=None):
        return self.driver.malloc(self.pid, ordinal, size, init)

    def stream_create(self, ordinal):
        return self.driver.stream_create(self.pid, ordinal)

    def memcpy_htod(self, alloc, offset, data):
        self.driver.memcpy_htod(self.pid, alloc, offset, data)

    def memcpy_htod_async(self, stream, alloc, offset, data):
        self.driver.memcpy_htod_async(self.pid, stream, alloc, offset, data)

    def memcpy_dtoh(self, alloc, offset, n):
        return self.driver.memcpy_dtoh(self.pid, alloc, offset, n)

    def launch_kernel(self, stream, alloc, offset, arg, nondeterministic=False):
        return self.driver.launch_kernel(self.pid, stream, alloc, offset, arg, nondeterministic)

    def synchronize(self, stream):
        return self.driver.synchronize(self.pid, stream)


class DeviceProxy(DirectRuntime):
    """Sits between application and driver: every call is serialized, logged
    and charged a fixed overhead. Async copies become synchronous copies."""

    def __init__(self, driver: CudaDriver, pid: int, clock, per_call_overhead=DEFAULT_CALL_OVERHEAD):
        super().__init__(driver, pid)
        self.clock = clock
        self.per_call_overhead = per_call_overhead
        self.log = CallLog()

    def _record(self, api, args, handles=(), result=b""):
        self.clock.advance(self.per_call_overhead)
        self.log.append(CallEntry(api, args, _digest(api, *args), tuple(handles),
                                  _digest(result) if result else "", self.per_call_overhead))

    def malloc(self, ordinal, size, init=None):
        h = super().malloc(ordinal, size, init)
        self._record("malloc", (ordinal, size, init), (h,))
        return h

    def stream_create(self, ordinal):
        h = super().stream_create(ordinal)
        self._record("stream_create", (ordinal,), (h,))
        return h

    def memcpy_htod(self, alloc, offset, data):
        super().memcpy_htod(alloc, offset, data)
        self._record("memcpy_htod", (alloc, offset, bytes(data)))

    def memcpy_htod_async(self, stream, alloc, offset, data):
        # forwarded as a synchronous copy; the stream argument is dropped
        self.memcpy_htod(alloc, offset, data)

    def memcpy_dtoh(self, alloc, offset, n):
        out = super().memcpy_dtoh(alloc, offset, n)
        self._record("memcpy_dtoh", (alloc, offset, n), result=out)
        return out

    def launch_kernel(self, stream, alloc, offset, arg, nondeterministic=False):
        out = super().launch_kernel(stream, alloc, offset, arg, nondeterministic)
        self._record("launch_kernel", (stream, alloc, offset, bytes(arg), nondeterministic),
                     result=out)
        return out

    def synchronize(self, stream):
        n = super().synchronize(stream)
        self._record("synchronize", (stream,))
        return n


@dataclass
class TrainingWorkload:
    """Synthetic training loop: per GPU one weight buffer and one stream;
    each iteration uploads a batch and runs a forward and a backward kernel."""

    gpus: int = 1
    model_bytes: int = 4096
    batch_bytes: int = 256
    iters_per_epoch: int = 4
    seed: int = 0
    nondeterministic: bool = False  # backward pass uses unordered atomics
    host_feedback: bool = False     # reads results back into host-only state
    host_state: list = field(default_factory=list)

    def setup(self, rt) -> dict:
        rng = random.Random(f"{self.seed}:init")
        bufs = {}
        for g in range(self.gpus):
            a = rt.malloc(g, self.model_bytes, rng.randbytes(self.model_bytes))
            s = rt.stream_create(g)
            bufs[g] = (a, s)
        return bufs

    def run_epoch(self, rt, bufs: dict, epoch: int) -> None:
        for i in range(self.iters_per_epoch):
            rng = random.Random(f"{self.seed}:{epoch}:{i}")
            for g, (a, s) in sorted(bufs.items()):
                off = rng.randrange(self.model_bytes - self.batch_bytes + 1)
                rt.memcpy_htod_async(s, a, off, rng.randbytes(self.batch_bytes))
                rt.launch_kernel(s, a, off, rng.randbytes(self.batch_bytes))
                rt.launch_kernel(s, a, off, rng.randbytes(self.batch_bytes),
                                 nondeterministic=self.nondeterministic)
                rt.synchronize(s)
                if self.host_feedback:
                    self.host_state.append(rt.memcpy_dtoh(a, off, 8))

    def calls_per_epoch(self) -> int:
        return self.iters_per_epoch * self.gpus * (4 + int(self.host_feedback))

    def init_calls(self) -> int:
        return 2 * self.gpus


@dataclass
class BenchResult:
    mode: str
    epochs: int
    call_count: int
    total_overhead: float
    sim_time: float
    machine: Machine
    pid: int
    log: CallLog | None = None


def _machine_for(workload: TrainingWorkload, machine: Machine | None) -> Machine:
    if machine is not None:
        return machine
    return MachineSpec(name="bench", salt="bench",
                       cuda=[{"model": "A100", "memory": 1 << 34}] * workload.gpus).build()


def run_intercepted(workload: TrainingWorkload, epochs: int, machine: Machine | None = None,
                    pid: int = 1, per_call_overhead: float = DEFAULT_CALL_OVERHEAD) -> BenchResult:
    m = _machine_for(workload, machine)
    m.cuda.attach(pid)
    start = m.clock.now
    proxy = DeviceProxy(m.cuda, pid, m.clock, per_call_overhead)
    bufs = workload.setup(proxy)
    for e in range(epochs):
        workload.run_epoch(proxy, bufs, e)
    return BenchResult("proxy", epochs, len(proxy.log), sum(e.overhead for e in proxy.log),
                       m.clock.now - start, m, pid, proxy.log)


def run_direct(workload: TrainingWorkload, epochs: int, machine: Machine | None = None,
               pid: int = 1) -> BenchResult:
    """Same workload with nothing between application and driver. The call
    count reported is what the driver's interception surface saw."""
    m = _machine_for(workload, machine)
    m.cuda.attach(pid)
    start = m.clock.now
    rt = DirectRuntime(m.cuda, pid)
    bufs = workload.setup(rt)
    for e in range(epochs):
        workload.run_epoch(rt, bufs, e)
    return BenchResult("driver", epochs, m.cuda.intercepted_calls, 0.0, m.clock.now - start, m, pid)


def replay_log(log: CallLog, fresh: Machine, pid: int = 1) -> CudaTaskState:
    """Re-execute ``log`` against a fresh driver, remapping handles.

    Raises NonDeterministicDivergence when a call produces different data
    than it did when recorded.
    """
    drv = fresh.cuda
    if pid not in drv.tasks:
        drv.attach(pid)
    rt = DirectRuntime(drv, pid)
    allocs: dict[int, int] = {}
    streams: dict[int, int] = {}
    for i, e in enumerate(log):
        if e.api == "malloc":
            allocs[e.handles[0]] = rt.malloc(*e.args)
            continue
        if e.api == "stream_create":
            streams[e.handles[0]] = rt.stream_create(*e.args)
            continue
        args = list(e.args)
        if e.api == "launch_kernel":
            args[0], args[1] = streams[args[0]], allocs[args[1]]
        elif e.api == "synchronize":
            args[0] = streams[args[0]]
        else:
            args[0] = allocs[args[0]]
        out = getattr(rt, e.api)(*args)
        if e.result_digest and _digest(out) != e.result_digest:
            raise NonDeterministicDivergence(
                f"call {i} ({e.api}) produced different data on replay")
    return drv.task(pid)
