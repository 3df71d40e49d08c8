"""A simulated host: clock, cost model, task table and both GPU drivers."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

from .cuda import CudaDevice, CudaDriver
from .errors import NoSuchTask, SpecError
from .host import CostModel, SimClock, SimTask
from .kfd import KFD_PATH, DeviceProps, GpuTopology, KfdDriver

NVIDIA_CONTROL_NODES = ("/dev/nvidiactl", "/dev/nvidia-uvm")


@dataclass
class MachineSpec:
    """Declarative machine description (the ``machines`` entries of a scenario)."""

    name: str = "host"
    salt: str = ""
    cuda: list[dict] = field(default_factory=list)  # {"model", "memory"}
    kfd: list[dict] = field(default_factory=list)   # {"isa", "compute_units", "vram", ...}
    links: list[tuple[int, int]] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict, name: str | None = None) -> MachineSpec:
        try:
            return cls(name=d.get("name", name or "host"), salt=str(d.get("salt", d.get("name", name or ""))),
                       cuda=[dict(x) for x in d.get("cuda", [])],
                       kfd=[dict(x) for x in d.get("kfd", [])],
                       links=[tuple(x) for x in d.get("links", [])])
        except (TypeError, AttributeError) as e:
            raise SpecError(f"bad machine description: {e}") from None

    def to_dict(self) -> dict:
        return {"name": self.name, "salt": self.salt, "cuda": self.cuda, "kfd": self.kfd,
                "links": [list(x) for x in self.links]}

    def build(self, cost: CostModel | None = None) -> Machine:
        return Machine(self, cost)


class Machine:
    def __init__(self, spec: MachineSpec | None = None, cost: CostModel | None = None):
        self.spec = spec = spec or MachineSpec()
        self.name = spec.name
        self.clock = SimClock()
        self.cost = cost or CostModel()
        self.tasks: dict[int, SimTask] = {}
        try:
            cuda_devs = [CudaDevice(i, str(d["model"]), int(d["memory"]))
                         for i, d in enumerate(spec.cuda)]
            kfd_devs = [(DeviceProps(str(d["isa"]), int(d["compute_units"]), int(d["vram"]),
                                     bool(d.get("host_access", True))),
                         int(d.get("location", i)))
                        for i, d in enumerate(spec.kfd)]
        except (KeyError, TypeError, ValueError) as e:
            raise SpecError(f"machine {spec.name}: bad device entry ({e})") from None
        for a, b in spec.links:
            if not (0 <= a < len(kfd_devs) and 0 <= b < len(kfd_devs)):
                raise SpecError(f"machine {spec.name}: link {a}-{b} out of range")
        self.cuda = CudaDriver(self.clock, self.cost, cuda_devs)
        topo = GpuTopology.build(kfd_devs, spec.links, salt=spec.salt)
        # per-machine offset space so translated offsets never collide with the source
        base = (zlib.crc32(spec.salt.encode()) & 0xFFFF) << 32
        self.kfd = KfdDriver(self.clock, self.cost, topo, host=self, offset_base=base)

    # -- task table -----------------------------------------------------------

    def register(self, task: SimTask) -> None:
        if task.pid in self.tasks:
            raise SpecError(f"pid {task.pid} already in use on {self.name}")
        self.tasks[task.pid] = task

    def unregister(self, pid: int) -> None:
        self.tasks.pop(pid, None)
        self.cuda.drop(pid)
        self.kfd.drop(pid)

    def task(self, pid: int) -> SimTask:
        try:
            return self.tasks[pid]
        except KeyError:
            raise NoSuchTask(f"no task with pid {pid} on {self.name}") from None

    # -- devices --------------------------------------------------------------

    @property
    def device_count(self) -> int:
        return len(self.cuda.devices) + len(self.kfd.topology)

    def device_paths(self) -> set[str]:
        paths = {d.path for d in self.cuda.devices}
        if self.cuda.devices:
            paths.update(NVIDIA_CONTROL_NODES)
        if len(self.kfd.topology):
            paths.add(KFD_PATH)
            paths.update(n.render_node for n in self.kfd.topology.nodes)
        return paths

    def __repr__(self) -> str:
        return (f"Machine({self.name!r}, cuda={len(self.cuda.devices)}, "
                f"kfd={len(self.kfd.topology)})")
