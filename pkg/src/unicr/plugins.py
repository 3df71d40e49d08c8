"""Device plugins: CUDA-style (driver actions) and KFD-style (ioctls)."""

from __future__ import annotations

import re

from .cuda import CudaPhase, decode_blob
from .engine import Plugin, RunContext, Stage
from .errors import InvalidState, TopologyMismatch
from .images import DeviceFileRecord
from .kfd import KFD_PATH, Caller, KfdPhase, check_gpuid_map, match_topology
from .machine import NVIDIA_CONTROL_NODES

_NV_DEVICE = re.compile(r"^/dev/nvidia(\d+)$")


def _is_nvidia(path: str) -> bool:
    return path in NVIDIA_CONTROL_NODES or bool(_NV_DEVICE.match(path))


class CudaPlugin(Plugin):
    """Checkpoints CUDA tasks through lock / checkpoint / restore / unlock."""

    id = "cuda"

    def handles(self, tree) -> bool:
        drv = tree.machine.cuda
        return any(t.pid in drv.tasks or any(_is_nvidia(d.path) for d in t.open_devices)
                   for t in tree)

    def _pids(self, ctx: RunContext) -> list[int]:
        return sorted(p for p in ctx.tree.pids if p in ctx.machine.cuda.tasks)

    def plugin_init(self, ctx: RunContext, stage: Stage) -> None:
        d = ctx.data(self.id)
        d["locked"] = []
        if stage is Stage.RESTORE:
            drv = ctx.machine.cuda
            dmap = None
            for pid, blob in sorted(ctx.snapshot.cuda.items()):
                c = decode_blob(blob)
                dmap = drv.check_device_map(c.device_count, c.devices, ctx.opts.device_map)
            d["device_map"] = dmap if dmap is not None else (
                ctx.opts.device_map or {o: o for o in range(len(drv.devices))})
            d["adopted"] = set()

    # dump side

    def pause_devices(self, ctx: RunContext) -> None:
        pids = self._pids(ctx)
        # one call covers every task on every GPU, so they lock together
        ctx.machine.cuda.lock(pids, ctx.opts.timeout)
        ctx.data(self.id)["locked"] = pids

    def checkpoint_devices(self, ctx: RunContext) -> None:
        drv = ctx.machine.cuda
        pids = ctx.data(self.id)["locked"]
        drv.checkpoint_to_host(pids)
        for pid in pids:
            ctx.snapshot.cuda[pid] = drv.task(pid).host_blob

    def dump_ext_file(self, ctx: RunContext, task, dfd):
        if not _is_nvidia(dfd.path):
            return None
        m = _NV_DEVICE.match(dfd.path)
        if m:
            ordinal = int(m.group(1))
            ctx.machine.cuda.device(ordinal)
            kind = "leftover" if dfd.leftover else "device"
        else:
            ordinal, kind = -1, "control"
        return DeviceFileRecord(dfd.fd, dfd.path, self.id, kind, dfd.leftover, 0, ordinal)

    def handle_device_vma(self, ctx: RunContext, task, vma):
        return True if _is_nvidia(vma.backing.device_name) else None

    def resume_devices_late(self, ctx: RunContext, pid: int) -> None:
        drv = ctx.machine.cuda
        if ctx.stage is Stage.DUMP:
            if pid in ctx.data(self.id)["locked"]:
                self._reinstate(drv, pid, None)
            return
        if pid in ctx.snapshot.cuda:
            self._adopt(ctx, pid)
            self._reinstate(drv, pid, ctx.data(self.id)["device_map"])

    @staticmethod
    def _reinstate(drv, pid: int, device_map) -> None:
        st = drv.task(pid)
        if st.phase is CudaPhase.CHECKPOINTED:
            drv.restore_from_host([pid], device_map)
        if st.phase is CudaPhase.LOCKED:
            drv.unlock([pid])

    def plugin_exit(self, ctx: RunContext, success: bool) -> None:
        if ctx.stage is Stage.DUMP and not success:
            drv = ctx.machine.cuda
            for pid in ctx.data(self.id)["locked"]:
                if pid in drv.tasks:
                    self._reinstate(drv, pid, None)

    # restore side

    def _adopt(self, ctx: RunContext, pid: int) -> None:
        d = ctx.data(self.id)
        if pid not in d["adopted"] and pid in ctx.snapshot.cuda:
            ctx.machine.cuda.adopt(pid, ctx.snapshot.cuda[pid])
            d["adopted"].add(pid)

    def _map_path(self, ctx: RunContext, path: str) -> str:
        m = _NV_DEVICE.match(path)
        if not m:
            return path
        dmap = ctx.data(self.id)["device_map"]
        old = int(m.group(1))
        if old not in dmap:
            raise TopologyMismatch(f"{path} has no counterpart on {ctx.machine.name}")
        return ctx.machine.cuda.device(dmap[old]).path

    def restore_ext_file(self, ctx: RunContext, pid: int, rec: DeviceFileRecord):
        if rec.plugin != self.id:
            return None
        self._adopt(ctx, pid)
        return self._map_path(ctx, rec.path)

    def update_vma_map(self, ctx: RunContext, pid: int, name: str, offset: int):
        if not _is_nvidia(name):
            return None
        return self._map_path(ctx, name), offset


class KfdPlugin(Plugin):
    """Checkpoints KFD processes through the process-info/checkpoint/unpause
    and restore/resume ioctls, translating gpuids and mmap offsets."""

    id = "kfd"

    def handles(self, tree) -> bool:
        drv = tree.machine.kfd
        return any(t.pid in drv.processes
                   or any(d.path == KFD_PATH or drv.topology.by_render_node(d.path)
                          for d in t.open_devices)
                   for t in tree)

    def plugin_init(self, ctx: RunContext, stage: Stage) -> None:
        d = ctx.data(self.id)
        d["paused"] = []
        if stage is Stage.RESTORE:
            target = ctx.machine.kfd.topology
            gmap = ctx.opts.gpuid_map
            source = None
            for bundle in ctx.snapshot.kfd.values():
                source = bundle.topology
                break
            if source is None:
                gmap = gmap or {}
            elif gmap is None:
                gmap = match_topology(source, target)
            else:
                check_gpuid_map(source, target, gmap)
            d["gpuid_map"] = gmap
            d["offsets"] = {}

    def _caller(self, ctx: RunContext, pid: int) -> Caller:
        # ioctls run in the context of the task that owns the descriptor
        return Caller(pid, ctx.caps)

    # dump side

    def pause_devices(self, ctx: RunContext) -> None:
        drv = ctx.machine.kfd
        d = ctx.data(self.id)
        for pid in sorted(p for p in ctx.tree.pids if p in drv.processes):
            drv.ioctl_process_info(self._caller(ctx, pid), pid)
            d["paused"].append(pid)

    def checkpoint_devices(self, ctx: RunContext) -> None:
        drv = ctx.machine.kfd
        for pid in ctx.data(self.id)["paused"]:
            ctx.snapshot.kfd[pid] = drv.ioctl_checkpoint(self._caller(ctx, pid), pid)

    def dump_ext_file(self, ctx: RunContext, task, dfd):
        if dfd.path == KFD_PATH:
            return DeviceFileRecord(dfd.fd, dfd.path, self.id, "kfd")
        node = ctx.machine.kfd.topology.by_render_node(dfd.path)
        if node is None:
            return None
        return DeviceFileRecord(dfd.fd, dfd.path, self.id, "render", gpuid=node.gpuid)

    def handle_device_vma(self, ctx: RunContext, task, vma):
        return True if ctx.machine.kfd.topology.by_render_node(vma.backing.device_name) else None

    def resume_devices_late(self, ctx: RunContext, pid: int) -> None:
        drv = ctx.machine.kfd
        if ctx.stage is Stage.DUMP:
            if pid in ctx.data(self.id)["paused"]:
                drv.ioctl_unpause(self._caller(ctx, pid), pid)
            return
        if pid in ctx.snapshot.kfd:
            # host VMAs exist now, so userptr BOs can be re-bound
            drv.finalize_userptr(pid)
            drv.ioctl_resume(self._caller(ctx, pid), pid)

    def plugin_exit(self, ctx: RunContext, success: bool) -> None:
        if ctx.stage is not Stage.DUMP or success:
            return
        drv = ctx.machine.kfd
        for pid in ctx.data(self.id)["paused"]:
            st = drv.processes.get(pid)
            if st is not None and st.phase is KfdPhase.PAUSED:
                drv.ioctl_unpause(self._caller(ctx, pid), pid)

    # restore side

    def restore_ext_file(self, ctx: RunContext, pid: int, rec: DeviceFileRecord):
        if rec.plugin != self.id:
            return None
        drv = ctx.machine.kfd
        d = ctx.data(self.id)
        if rec.kind == "kfd":
            drv.open_kfd(pid)
            bundle = ctx.snapshot.kfd.get(pid)
            if bundle is not None:
                d["offsets"][pid] = drv.ioctl_restore(self._caller(ctx, pid), pid, bundle,
                                                      d["gpuid_map"])
            return KFD_PATH
        new = d["gpuid_map"].get(rec.gpuid)
        if new is None:
            raise TopologyMismatch(f"render node of gpuid {rec.gpuid:#x} has no target")
        return drv.render_node(new)

    def update_vma_map(self, ctx: RunContext, pid: int, name: str, offset: int):
        drv = ctx.machine.kfd
        offsets = ctx.data(self.id)["offsets"].get(pid, {})
        if (name, offset) in offsets:
            return offsets[(name, offset)]
        if name == KFD_PATH or any(n.render_node == name for n in
                                   (ctx.snapshot.kfd[pid].topology if pid in ctx.snapshot.kfd
                                    else drv.topology.nodes)):
            raise InvalidState(f"pid {pid}: mapping {name}@{offset:#x} matches no restored BO")
        return None


def default_plugins() -> list[Plugin]:
    # CUDA first: its lock needs runnable tasks and is the stricter precondition
    return [CudaPlugin(), KfdPlugin()]



