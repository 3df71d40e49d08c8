"""Checkpoint/restore orchestration: the hook registry and the dump and
restore pipelines.

Device-specific work lives in plugins (see ``plugins.py``). The engine only
decides *when* each hook fires, suspends and resumes CPU tasks, dumps CPU
memory, and writes or reads the image set.
"""

from __future__ import annotations

import shutil
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

from .cuda import DEFAULT_LOCK_TIMEOUT
from .errors import (BadGpuidMap, CrError, DuplicatePlugin, HookOrderViolation, ImageError,
                     InvalidState, IoError, LockTimeout, PluginError, TimeoutExpired, TopologyMismatch,
                     UnknownDevice, Unsupported)
from .host import (DeviceFd, DeviceFile, FreezerState, RunState, SimProcessTree, SimTask, Vma,
                   WorkloadState, freeze, resume, seize_interrupt, thaw)
from .images import (CrStats, Inventory, Snapshot, TaskImage, VmaImage, encode_data_files,
                     payload_accounting, read_image_set, write_image_set)
from .kfd import CAP_CHECKPOINT_RESTORE


class HookId(Enum):
    PLUGIN_INIT = "plugin_init"
    PAUSE_DEVICES = "pause_devices"
    CHECKPOINT_DEVICES = "checkpoint_devices"
    DUMP_EXT_FILE = "dump_ext_file"
    RESTORE_EXT_FILE = "restore_ext_file"
    HANDLE_DEVICE_VMA = "handle_device_vma"
    UPDATE_VMA_MAP = "update_vma_map"
    RESUME_DEVICES_LATE = "resume_devices_late"
    PLUGIN_EXIT = "plugin_exit"


class Stage(Enum):
    DUMP = "dump"
    PRE_DUMP = "pre-dump"
    RESTORE = "restore"


class FinalState(Enum):
    RUNNING = "running"
    STOPPED = "stopped"
    FROZEN = "frozen"
    KILL = "kill"


@dataclass(frozen=True)
class TraceEvent:
    """One trace entry. ``name`` is a HookId name for hook invocations and a
    lower-case marker for engine milestones (``seize``, ``tasks_paused``...)."""

    name: str
    plugin: str | None
    target: object
    time: float

    @property
    def is_hook(self) -> bool:
        return self.plugin is not None


class HookTrace:
    """Append-only record of one engine run."""

    def __init__(self):
        self._events: list[TraceEvent] = []

    def record(self, name: str, plugin: str | None, target, t: float) -> None:
        self._events.append(TraceEvent(name, plugin, target, t))

    @property
    def events(self) -> tuple[TraceEvent, ...]:
        return tuple(self._events)

    def names(self) -> list[str]:
        return [e.name for e in self._events]

    def hooks(self) -> list[str]:
        return [e.name for e in self._events if e.is_hook]

    def positions(self, name: str) -> list[int]:
        return [i for i, e in enumerate(self._events) if e.name == name]

    def __len__(self) -> int:
        return len(self._events)


class Plugin:
    """Base class. Subclasses implement any of the hook methods; the method
    name is the lower-case HookId name."""

    id = "plugin"

    def handles(self, tree: SimProcessTree) -> bool:
        return False

    def plugin_init(self, ctx: RunContext, stage: Stage) -> None:
        pass

    def plugin_exit(self, ctx: RunContext, success: bool) -> None:
        pass

    def callbacks(self) -> dict[HookId, Callable]:
        out = {}
        for h in HookId:
            fn = getattr(self, h.value, None)
            if fn is not None:
                out[h] = fn
        return out


class HookRegistry:
    def __init__(self):
        self.plugins: list[Plugin] = []
        self._callbacks: dict[HookId, list[tuple[Plugin, Callable]]] = {h: [] for h in HookId}

    def register(self, plugin: Plugin) -> None:
        if any(p.id == plugin.id for p in self.plugins):
            raise DuplicatePlugin(f"plugin {plugin.id!r} already registered")
        self.plugins.append(plugin)
        for hook, fn in plugin.callbacks().items():
            self._callbacks[hook].append((plugin, fn))

    def callbacks(self, hook: HookId, active=None) -> list[tuple[Plugin, Callable]]:
        cbs = self._callbacks[hook]
        if active is None:
            return list(cbs)
        ids = {p.id for p in active}
        return [(p, fn) for p, fn in cbs if p.id in ids]

    def get(self, plugin_id: str) -> Plugin | None:
        for p in self.plugins:
            if p.id == plugin_id:
                return p
        return None


@dataclass
class DumpOptions:
    final_state: FinalState = FinalState.RUNNING
    timeout: float = DEFAULT_LOCK_TIMEOUT
    use_freezer: bool = False  # only honoured for trees without CUDA tasks
    # called with the run context while tasks are stopped; returns extra image records
    extra_files: Callable[[RunContext], dict[str, bytes]] | None = None


@dataclass
class RestoreOptions:
    device_map: dict[int, int] | None = None   # CUDA ordinal -> ordinal
    gpuid_map: dict[int, int] | None = None    # KFD gpuid -> gpuid


@dataclass
class RunContext:
    stage: Stage
    machine: object
    caps: frozenset
    trace: HookTrace
    tree: SimProcessTree | None = None
    opts: object = None
    snapshot: Snapshot | None = None
    scratch: dict = field(default_factory=dict)

    def data(self, plugin_id: str) -> dict:
        return self.scratch.setdefault(plugin_id, {})


# -- hook ordering ----------------------------------------------------------------

def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise HookOrderViolation(msg)


def _check_init_exit(trace: HookTrace) -> None:
    inits = [e.plugin for e in trace.events if e.name == "PLUGIN_INIT"]
    exits = [e.plugin for e in trace.events if e.name == "PLUGIN_EXIT"]
    _check(sorted(inits) == sorted(exits) and len(set(exits)) == len(exits),
           "every initialised plugin must exit exactly once")


def validate_dump_trace(trace: HookTrace, success: bool = True) -> None:
    n = trace.names()
    first = {x: trace.positions(x)[0] for x in set(n)}
    last = {x: trace.positions(x)[-1] for x in set(n)}

    def before(a, b):
        if a in last and b in first:
            _check(last[a] < first[b], f"{a} must precede {b}")

    _check_init_exit(trace)
    exits = trace.positions("PLUGIN_EXIT")
    inits = trace.positions("PLUGIN_INIT")
    if exits:
        for e in trace.events[exits[0]:]:
            _check(not e.is_hook or e.name == "PLUGIN_EXIT", "hook fired after PLUGIN_EXIT")
    if inits:
        for e in trace.events[:inits[-1]]:
            _check(not e.is_hook or e.name == "PLUGIN_INIT", "hook fired before PLUGIN_INIT")
    before("thaw", "seize")
    before("PAUSE_DEVICES", "seize")
    before("PAUSE_DEVICES", "freeze")
    before("PAUSE_DEVICES", "tasks_paused")
    before("tasks_paused", "CHECKPOINT_DEVICES")
    before("CHECKPOINT_DEVICES", "mem_dump")
    before("CHECKPOINT_DEVICES", "DUMP_EXT_FILE")
    before("CHECKPOINT_DEVICES", "HANDLE_DEVICE_VMA")
    before("DUMP_EXT_FILE", "mem_dump_done")
    before("HANDLE_DEVICE_VMA", "mem_dump_done")
    before("mem_dump_done", "images_written")
    before("images_written", "RESUME_DEVICES_LATE")
    if success:
        if "CHECKPOINT_DEVICES" in first:
            _check("tasks_paused" in first, "CHECKPOINT_DEVICES without paused tasks")
        _check("images_written" in first, "successful dump wrote no images")


def validate_restore_trace(trace: HookTrace, success: bool = True) -> None:
    n = trace.names()
    first = {x: trace.positions(x)[0] for x in set(n)}
    last = {x: trace.positions(x)[-1] for x in set(n)}

    def before(a, b):
        if a in last and b in first:
            _check(last[a] < first[b], f"{a} must precede {b}")

    _check_init_exit(trace)
    exits = trace.positions("PLUGIN_EXIT")
    if exits:
        for e in trace.events[exits[0]:]:
            _check(not e.is_hook or e.name == "PLUGIN_EXIT", "hook fired after PLUGIN_EXIT")
    before("PLUGIN_INIT", "RESTORE_EXT_FILE")
    before("images_read", "tasks_created")
    before("tasks_created", "RESTORE_EXT_FILE")
    before("RESTORE_EXT_FILE", "vmas_restored")
    before("UPDATE_VMA_MAP", "vmas_restored")
    before("vmas_restored", "RESUME_DEVICES_LATE")
    before("RESUME_DEVICES_LATE", "tasks_running")
    if success:
        _check("vmas_restored" in first and "tasks_running" in first,
               "successful restore skipped a phase")
        if "RESUME_DEVICES_LATE" in first:
            _check(first["vmas_restored"] < first["RESUME_DEVICES_LATE"],
                   "RESUME_DEVICES_LATE before all VMAs were restored")


# -- engine -------------------------------------------------------------------------

_PASS_THROUGH = (LockTimeout, PluginError, TopologyMismatch, UnknownDevice, ImageError,
                 BadGpuidMap, Unsupported)


class CheckpointEngine:
    """Runs one dump or restore at a time."""

    def __init__(self, plugins=None, caps=frozenset({CAP_CHECKPOINT_RESTORE})):
        self.registry = HookRegistry()
        if plugins is None:
            from .plugins import default_plugins
            plugins = default_plugins()
        for p in plugins:
            self.register_plugin(p)
        self.caps = frozenset(caps)
        self.trace = HookTrace()
        self.last_stats: CrStats | None = None
        self.last_restore: CrStats | None = None
        self._busy = threading.Lock()

    def register_plugin(self, plugin: Plugin) -> None:
        self.registry.register(plugin)

    # -- hook plumbing ----------------------------------------------------------

    def _invoke(self, ctx: RunContext, plugin: Plugin, fn, hook: HookId, target, *args):
        ctx.trace.record(hook.name, plugin.id, target, ctx.machine.clock.now)
        try:
            return fn(ctx, *args)
        except TimeoutExpired as e:
            raise LockTimeout(str(e)) from e
        except _PASS_THROUGH:
            raise
        except CrError as e:
            raise PluginError(plugin.id, f"{type(e).__name__}: {e}") from e
        except Exception as e:  # plugin bug: still report it against the plugin
            raise PluginError(plugin.id, repr(e)) from e

    def _fire(self, ctx, active, hook: HookId, target, *args) -> list:
        return [self._invoke(ctx, p, fn, hook, target, *args)
                for p, fn in self.registry.callbacks(hook, active)]

    def _claim(self, ctx, active, hook: HookId, target, *args):
        """First non-None answer from the plugins, in registration order."""
        for p, fn in self.registry.callbacks(hook, active):
            r = self._invoke(ctx, p, fn, hook, target, *args)
            if r is not None:
                return p, r
        return None, None

    def _init_all(self, ctx, active, stage: Stage) -> None:
        inited = ctx.scratch.setdefault("_inited", [])
        for p, fn in self.registry.callbacks(HookId.PLUGIN_INIT, active):
            inited.append(p.id)
            self._invoke(ctx, p, fn, HookId.PLUGIN_INIT, None, stage)

    def _exit_all(self, ctx, active, success: bool, errors: list) -> None:
        inited = set(ctx.scratch.get("_inited", ()))
        for p, fn in self.registry.callbacks(HookId.PLUGIN_EXIT, active):
            if p.id not in inited:
                continue
            try:
                self._invoke(ctx, p, fn, HookId.PLUGIN_EXIT, None, success)
            except CrError as e:
                errors.append(e)

    def _mark(self, ctx: RunContext, name: str, target=None) -> None:
        ctx.trace.record(name, None, target, ctx.machine.clock.now)

    # -- dump -------------------------------------------------------------------

    def pre_dump(self, tree, path, opts=None):
        raise Unsupported("iterative pre-dump is not implemented")

    def dump(self, tree: SimProcessTree, path, opts: DumpOptions | None = None) -> Path:
        if not self._busy.acquire(blocking=False):
            raise InvalidState("engine is already running an operation")
        try:
            return self._dump(tree, Path(path), opts or DumpOptions())
        finally:
            self._busy.release()

    def _dump(self, tree: SimProcessTree, path: Path, opts: DumpOptions) -> Path:
        machine = tree.machine
        clock = machine.clock
        ctx = RunContext(Stage.DUMP, machine, self.caps, HookTrace(), tree, opts)
        self.trace = ctx.trace
        if path.exists():
            raise IoError(f"{path} already exists")
        if not len(tree):
            raise InvalidState("nothing to dump: process tree is empty")
        seized = [t.pid for t in tree if t.run_state is RunState.SEIZED]
        if seized:
            raise InvalidState(f"pids {seized} are already seized by another tracer")

        active = [p for p in self.registry.plugins if p.handles(tree)]
        pids = sorted(tree.pids)
        has_cuda = any(pid in machine.cuda.tasks for pid in pids)
        was_frozen = tree.cgroup.state is FreezerState.FROZEN
        cpu = {"thawed": False, "seized": False, "froze": False}
        stats = CrStats()
        t0 = clock.now
        success = False
        written = False
        self._mark(ctx, "dump_start")
        try:
            self._init_all(ctx, active, Stage.DUMP)
            if was_frozen and has_cuda:
                # device locking needs runnable tasks: thaw, then use seize instead
                thaw(tree.cgroup, machine)
                cpu["thawed"] = True
                self._mark(ctx, "thaw")
            freezing_start = clock.now
            self._fire(ctx, active, HookId.PAUSE_DEVICES, tuple(pids))
            use_freezer = not has_cuda and (opts.use_freezer or was_frozen)
            if use_freezer:
                if not was_frozen:
                    freeze(tree.cgroup, machine)
                    cpu["froze"] = True
                    self._mark(ctx, "freeze")
            else:
                seize_interrupt(tree, pids)
                cpu["seized"] = True
                self._mark(ctx, "seize", tuple(pids))
            self._mark(ctx, "tasks_paused")
            stats.freezing_time = clock.now - freezing_start
            frozen_start = clock.now

            ctx.snapshot = snap = Snapshot(Inventory(created_at=time.time(), root_pid=tree.root.pid,
                                                     cgroup_frozen=was_frozen), [])
            self._fire(ctx, active, HookId.CHECKPOINT_DEVICES, tuple(pids))

            mem_start = clock.now
            self._mark(ctx, "mem_dump")
            for pid in pids:
                snap.tasks.append(self._dump_task(ctx, active, tree.task(pid), stats))
            if opts.extra_files is not None:
                snap.extras.update(opts.extra_files(ctx))
            snap.inventory.plugin_ids = [p.id for p in active]

            files = encode_data_files(snap)
            stats.gpu_bytes, stats.cpu_bytes = payload_accounting(files)
            write_start = clock.now
            clock.advance(sum(len(b) for b in files.values()) * machine.cost.write_per_byte)
            self._mark(ctx, "mem_dump_done")
            stats.mem_write_time = clock.now - write_start
            stats.mem_dump_time = clock.now - mem_start
            stats.frozen_time = clock.now - frozen_start
            stats.checkpoint_total = clock.now - t0
            snap.stats = stats
            write_image_set(snap, path)
            written = True
            self._mark(ctx, "images_written", str(path))

            self._finish_dump(ctx, active, tree, opts, cpu)
            success = True
        except BaseException:
            errors = []
            self._exit_all(ctx, active, False, errors)
            self._rollback_cpu(ctx, tree, cpu)
            if written:
                # a failed dump leaves no image set behind, even a complete one
                shutil.rmtree(path, ignore_errors=True)
            validate_dump_trace(ctx.trace, success=False)
            raise
        errors = []
        self._exit_all(ctx, active, True, errors)
        if errors:
            raise errors[0]
        validate_dump_trace(ctx.trace, success=success)
        self.last_stats = stats
        return path

    def _dump_task(self, ctx, active, task: SimTask, stats: CrStats) -> TaskImage:
        machine = ctx.machine
        records = []
        for dfd in task.open_devices:
            plugin, rec = self._claim(ctx, active, HookId.DUMP_EXT_FILE, (task.pid, dfd.path),
                                      task, dfd)
            if rec is None:
                raise UnknownDevice(f"pid {task.pid}: no plugin handles fd {dfd.fd} ({dfd.path})")
            records.append(rec)
        vmas = []
        for v in task.vmas:
            if v.is_device:
                plugin, ok = self._claim(ctx, active, HookId.HANDLE_DEVICE_VMA,
                                         (task.pid, v.backing.device_name), task, v)
                if not ok:
                    raise UnknownDevice(f"pid {task.pid}: no plugin handles the mapping of "
                                        f"{v.backing.device_name} at {v.start:#x}")
                vmas.append(VmaImage(v.start, v.length, v.backing.device_name,
                                     v.backing.mmap_offset, None))
            else:
                n = v.pages()
                stats.pages_scanned += n
                machine.clock.advance(n * machine.cost.page_scan)
                vmas.append(VmaImage(v.start, v.length, None, 0, bytes(v.contents)))
        w = task.workload
        return TaskImage(task.pid, task.ppid, list(task.thread_ids),
                         (w.seed, w.steps, w.cpu_writes, w.device_writes, w.write_size),
                         task.next_fd, vmas, records)

    def _finish_dump(self, ctx, active, tree, opts: DumpOptions, cpu) -> None:
        machine = ctx.machine
        pids = sorted(tree.pids)
        if opts.final_state is FinalState.KILL:
            with tree.lock:
                for pid in pids:
                    machine.unregister(pid)
                tree.tasks.clear()
                tree.cgroup.member_pids.clear()
            self._mark(ctx, "killed", tuple(pids))
            return
        for pid in pids:
            self._fire(ctx, active, HookId.RESUME_DEVICES_LATE, pid, pid)
        if opts.final_state is FinalState.RUNNING:
            self._rollback_cpu(ctx, tree, cpu)
            self._mark(ctx, "resumed")
        elif opts.final_state is FinalState.FROZEN:
            with tree.lock:
                if cpu["seized"]:
                    resume(tree, pids)
                freeze(tree.cgroup, machine)
            self._mark(ctx, "left_frozen")
        else:
            if not cpu["seized"]:
                raise Unsupported("leaving a freezer-stopped tree seized is not supported")
            self._mark(ctx, "left_stopped")

    def _rollback_cpu(self, ctx, tree, cpu) -> None:
        """Put CPU tasks back the way the dump found them."""
        machine = tree.machine
        with tree.lock:
            if cpu["seized"]:
                resume(tree, [t.pid for t in tree if t.run_state is RunState.SEIZED])
                cpu["seized"] = False
            if cpu["froze"]:
                thaw(tree.cgroup, machine)
                cpu["froze"] = False
            if cpu["thawed"]:
                freeze(tree.cgroup, machine)
                cpu["thawed"] = False

    # -- restore ----------------------------------------------------------------

    def restore(self, path, machine, opts: RestoreOptions | None = None) -> SimProcessTree:
        if not self._busy.acquire(blocking=False):
            raise InvalidState("engine is already running an operation")
        try:
            return self._restore(Path(path), machine, opts or RestoreOptions())
        finally:
            self._busy.release()

    def _restore(self, path: Path, machine, opts: RestoreOptions) -> SimProcessTree:
        clock = machine.clock
        ctx = RunContext(Stage.RESTORE, machine, self.caps, HookTrace(), None, opts)
        self.trace = ctx.trace
        t0 = clock.now
        snap = read_image_set(path)
        nbytes = sum(f.stat().st_size for f in path.iterdir())
        clock.advance(nbytes * machine.cost.read_per_byte)
        ctx.snapshot = snap
        self._mark(ctx, "images_read", str(path))
        if snap.inventory.has_gpu_state and machine.device_count == 0:
            raise TopologyMismatch(f"image holds GPU state but {machine.name} has no GPUs")
        active = []
        for pid_ in snap.inventory.plugin_ids:
            p = self.registry.get(pid_)
            if p is None:
                raise PluginError(pid_, "plugin needed by the image is not registered")
            active.append(p)
        busy = [t.pid for t in snap.tasks if t.pid in machine.tasks]
        if busy:
            raise InvalidState(f"pids {busy} already exist on {machine.name}")

        tree = SimProcessTree(machine)
        created = []
        success = False
        try:
            self._init_all(ctx, active, Stage.RESTORE)
            for ti in snap.tasks:
                seed, steps, cw, dw, ws = ti.workload
                t = SimTask(ti.pid, ti.ppid, list(ti.thread_ids),
                            workload=WorkloadState(seed, steps, cw, dw, ws), next_fd=ti.next_fd)
                machine.register(t)
                created.append(t.pid)
                tree.add_task(t)
                clock.advance(machine.cost.fork_per_task)
            ctx.tree = tree
            self._mark(ctx, "tasks_created", tuple(created))

            for ti in snap.tasks:
                t = tree.task(ti.pid)
                for rec in ti.fds:
                    plugin, new_path = self._claim(ctx, active, HookId.RESTORE_EXT_FILE,
                                                   (ti.pid, rec.path), ti.pid, rec)
                    if new_path is None:
                        raise UnknownDevice(f"pid {ti.pid}: no plugin restores {rec.path}")
                    t.open_devices.append(DeviceFd(rec.fd, new_path, rec.leftover))
            for ti in snap.tasks:
                t = tree.task(ti.pid)
                for vi in ti.vmas:
                    if vi.device_name is None:
                        t.add_vma(Vma(vi.start, vi.length, contents=bytearray(vi.contents)))
                    else:
                        plugin, new = self._claim(ctx, active, HookId.UPDATE_VMA_MAP,
                                                  (ti.pid, vi.device_name), ti.pid,
                                                  vi.device_name, vi.mmap_offset)
                        if new is None:
                            raise UnknownDevice(f"pid {ti.pid}: no plugin maps {vi.device_name}")
                        t.add_vma(Vma(vi.start, vi.length, backing=DeviceFile(*new)))
                    clock.advance(machine.cost.vma_restore_per_page
                                  * ((vi.length + 4095) // 4096))
            self._mark(ctx, "vmas_restored")
            for ti in snap.tasks:
                self._fire(ctx, active, HookId.RESUME_DEVICES_LATE, ti.pid, ti.pid)
            self._mark(ctx, "tasks_running", tuple(created))
            success = True
        except BaseException:
            errors = []
            self._exit_all(ctx, active, False, errors)
            for pid in created:
                machine.unregister(pid)
            validate_restore_trace(ctx.trace, success=False)
            raise
        errors = []
        self._exit_all(ctx, active, True, errors)
        if errors:
            for pid in created:
                machine.unregister(pid)
            raise errors[0]
        validate_restore_trace(ctx.trace)
        self.last_restore = CrStats(restore_total=clock.now - t0)
        return tree
