"""Containers: layered root filesystem, GPU devices injected as external
mounts, and whole-container checkpoint/restore on top of the engine."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType

from .codec import Packer, Truncated, Unpacker
from .engine import CheckpointEngine, DumpOptions, FinalState, RestoreOptions
from .errors import ImageCorrupt, MissingLayer, SpecError, TopologyMismatch, UnknownDevice
from .host import FreezerState
from .images import read_image_set
from .kfd import KFD_PATH
from .machine import NVIDIA_CONTROL_NODES, Machine
from .workload import ProcessTreeSpec, run_workload_step, spawn_tree

COUNTER_PATH = "/var/run/unicr/step"
ROOTFS_IMAGE = "rootfs-diff"
CONFIG_IMAGE = "container"

# libraries a runtime hook would bind into the container, per driver and capability tag
_LIBRARIES = {
    ("cuda", "compute"): ["/usr/lib/x86_64-linux-gnu/libcuda.so.1"],
    ("cuda", "utility"): ["/usr/lib/x86_64-linux-gnu/libnvidia-ml.so.1"],
    ("kfd", "compute"): ["/opt/rocm/lib/libhsa-runtime64.so.1"],
    ("kfd", "utility"): ["/opt/rocm/lib/librocm_smi64.so.1"],
}
_DEVICE_ID = re.compile(r"^(cuda|kfd):(\d+)$")


class Layer:
    """An immutable file map; identified by the digest of its contents."""

    def __init__(self, files: dict[str, bytes]):
        self._files = MappingProxyType({k: bytes(v) for k, v in files.items()})

    @property
    def files(self):
        return self._files

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._files):
            h.update(name.encode() + b"\0" + len(self._files[name]).to_bytes(8, "little"))
            h.update(self._files[name])
        return "sha256:" + h.hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, Layer) and dict(self._files) == dict(other._files)

    def __hash__(self) -> int:
        return hash(self.digest)


@dataclass
class RootFs:
    ro_layers: list[Layer]
    rw_layer: dict[str, bytes] = field(default_factory=dict)

    def read(self, path: str) -> bytes:
        if path in self.rw_layer:
            return self.rw_layer[path]
        for layer in reversed(self.ro_layers):
            if path in layer.files:
                return layer.files[path]
        raise FileNotFoundError(path)

    def write(self, path: str, data: bytes) -> None:
        self.rw_layer[path] = bytes(data)

    def view(self) -> dict[str, bytes]:
        out = {}
        for layer in self.ro_layers:
            out.update(layer.files)
        out.update(self.rw_layer)
        return out


class MountKind(Enum):
    GPU_DEVICE = "gpu-device"
    LIBRARY = "library"


@dataclass(frozen=True)
class Mount:
    source: str
    target: str
    kind: MountKind


@dataclass
class GpuConfig:
    """CDI-style request: device ids (``cuda:N`` / ``kfd:N``) plus capability tags."""

    devices: list[str] = field(default_factory=list)
    capabilities: list[str] = field(default_factory=lambda: ["compute", "utility"])

    @classmethod
    def from_dict(cls, d: dict) -> GpuConfig:
        return cls(list(d.get("devices", [])), list(d.get("capabilities", ["compute", "utility"])))

    def to_dict(self) -> dict:
        return {"devices": list(self.devices), "capabilities": list(self.capabilities)}


@dataclass
class SimContainer:
    id: str
    machine: Machine
    tree: object
    rootfs: RootFs
    external_mounts: list[Mount]
    gpu_config: GpuConfig
    config: dict
    steps: int = 0

    @property
    def freezer(self):
        return self.tree.cgroup

    @property
    def frozen(self) -> bool:
        return self.tree.cgroup.state is FreezerState.FROZEN

    @property
    def has_gpu(self) -> bool:
        return bool(self.gpu_config.devices)


def device_mounts(gpu: GpuConfig, machine: Machine) -> list[Mount]:
    """Device nodes and libraries for ``gpu`` on ``machine``."""
    mounts: dict[str, Mount] = {}
    drivers = set()
    for dev in gpu.devices:
        m = _DEVICE_ID.match(dev)
        if not m:
            raise UnknownDevice(f"malformed device id {dev!r}")
        drv, idx = m.group(1), int(m.group(2))
        if drv == "cuda":
            if idx >= len(machine.cuda.devices):
                raise UnknownDevice(f"{dev}: {machine.name} has no such CUDA device")
            paths = list(NVIDIA_CONTROL_NODES) + [machine.cuda.devices[idx].path]
        else:
            nodes = machine.kfd.topology.nodes
            if idx >= len(nodes):
                raise UnknownDevice(f"{dev}: {machine.name} has no such KFD device")
            paths = [KFD_PATH, nodes[idx].render_node]
        drivers.add(drv)
        for p in paths:
            mounts.setdefault(p, Mount(p, p, MountKind.GPU_DEVICE))
    for drv in sorted(drivers):
        for cap in gpu.capabilities:
            for lib in _LIBRARIES.get((drv, cap), []):
                mounts.setdefault(lib, Mount(lib, lib, MountKind.LIBRARY))
    return list(mounts.values())


def _runtime_config(cid: str, layers: list[Layer], mounts: list[Mount], gpu: GpuConfig) -> dict:
    return {"id": cid, "layers": [layer.digest for layer in layers],
            "mounts": [{"source": m.source, "target": m.target, "kind": m.kind.value}
                       for m in mounts],
            "gpu": gpu.to_dict()}


def create_container(cid: str, image_layers: list[Layer], gpu_config: GpuConfig,
                     machine: Machine, spec: ProcessTreeSpec) -> SimContainer:
    """Assemble the rootfs, inject device mounts into the config, then start
    the process tree."""
    if not image_layers:
        raise SpecError("a container needs at least one image layer")
    mounts = device_mounts(gpu_config, machine)
    config = _runtime_config(cid, image_layers, mounts, gpu_config)
    tree = spawn_tree(spec, machine)
    allowed = {m.target for m in mounts if m.kind is MountKind.GPU_DEVICE}
    for t in tree:
        for d in t.open_devices:
            if d.path not in allowed:
                for pid in tree.pids:
                    machine.unregister(pid)
                raise UnknownDevice(f"pid {t.pid} uses {d.path}, which the container does not expose")
    return SimContainer(cid, machine, tree, RootFs(list(image_layers)), mounts, gpu_config, config)


def run_step(c: SimContainer) -> None:
    """One workload step for every task, then bump the counter file."""
    with c.tree.lock:
        for pid in sorted(c.tree.pids):
            run_workload_step(c.tree, pid)
        c.steps += 1
        c.rootfs.write(COUNTER_PATH, str(c.steps).encode())


def encode_files(files: dict[str, bytes]) -> bytes:
    p = Packer().u32(len(files))
    for name in sorted(files):
        p.string(name).blob(files[name])
    return p.bytes()


def decode_files(data: bytes) -> dict[str, bytes]:
    u = Unpacker(data)
    try:
        out = {}
        for _ in range(u.u32()):
            name = u.string()
            out[name] = u.blob()
        u.expect_end()
    except Truncated as e:
        raise ImageCorrupt(f"{ROOTFS_IMAGE}: {e}") from None
    return out


def container_checkpoint(c: SimContainer, engine: CheckpointEngine, path,
                         timeout: float | None = None) -> Path:
    """Dump the container and leave it Frozen.

    The rw layer is copied from inside the dump while every task is stopped,
    so it matches the memory image.
    """
    def extras(ctx):
        return {ROOTFS_IMAGE: encode_files(c.rootfs.rw_layer),
                CONFIG_IMAGE: json.dumps({**c.config, "steps": c.steps}, sort_keys=True).encode()}

    opts = DumpOptions(final_state=FinalState.FROZEN, extra_files=extras,
                       use_freezer=not any(p in c.machine.cuda.tasks for p in c.tree.pids))
    if timeout is not None:
        opts.timeout = timeout
    return engine.dump(c.tree, path, opts)


def container_restore(path, machine: Machine, layer_store: dict[str, Layer],
                      engine: CheckpointEngine, opts: RestoreOptions | None = None) -> SimContainer:
    snap = read_image_set(path)
    if CONFIG_IMAGE not in snap.extras or ROOTFS_IMAGE not in snap.extras:
        raise ImageCorrupt("image set carries no container records")
    try:
        config = json.loads(snap.extras[CONFIG_IMAGE])
    except ValueError as e:
        raise ImageCorrupt(f"{CONFIG_IMAGE}: {e}") from None
    layers = []
    for digest in config["layers"]:
        layer = layer_store.get(digest)
        if layer is None or layer.digest != digest:
            raise MissingLayer(f"read-only layer {digest} is not available")
        layers.append(layer)
    gpu = GpuConfig.from_dict(config["gpu"])
    try:
        mounts = device_mounts(gpu, machine)
    except UnknownDevice as e:
        raise TopologyMismatch(f"{machine.name} cannot provide the container's GPUs: {e}") from None
    # library mounts are re-bound verbatim, device mounts re-derived on this host
    tree = engine.restore(path, machine, opts)
    rootfs = RootFs(layers, decode_files(snap.extras[ROOTFS_IMAGE]))
    new_config = _runtime_config(config["id"], layers, mounts, gpu)
    return SimContainer(config["id"], machine, tree, rootfs, mounts, gpu, new_config,
                        steps=int(config.get("steps", 0)))
