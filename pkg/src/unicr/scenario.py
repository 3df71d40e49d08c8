"""Scenario files: machines, process trees, containers and a script of steps.

A scenario is a JSON document::

    {
      "version": 1,
      "machines": {"a": {"salt": "a", "cuda": [...], "kfd": [...], "links": [[0, 1]]}},
      "trees": {"t": {"machine": "a", "spec": {"seed": 1, "processes": [...]}}},
      "containers": {"c": {"machine": "a", "layers": [{"/etc/motd": "hi"}],
                           "gpu": {"devices": ["cuda:0"]}, "spec": {...}}},
      "steps": [
        {"op": "run", "target": "t", "steps": 3},
        {"op": "dump", "target": "t", "images": "ck", "final_state": "kill"},
        {"op": "restore", "images": "ck", "machine": "a", "as": "t2"},
        {"op": "verify", "target": "t2", "images": "ck"}
      ]
    }

Ops: run, dump, kill, freeze, thaw, restore, verify, checkpoint (container),
container_restore. Any step may carry ``"expect_error": "<ErrorClass>"``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .container import (COUNTER_PATH, GpuConfig, Layer, SimContainer, container_checkpoint,
                        container_restore, create_container, run_step)
from .engine import CheckpointEngine, DumpOptions, FinalState, RestoreOptions
from .errors import CrError, SpecError
from .host import freeze, thaw
from .machine import Machine, MachineSpec
from .state import content_view, tree_view
from .workload import ProcessTreeSpec, run_steps, spawn_tree

SCENARIO_VERSION = 1
OPS = {"run", "dump", "kill", "freeze", "thaw", "restore", "verify", "checkpoint",
       "container_restore"}


class VerifyFailed(CrError):
    pass


@dataclass
class Scenario:
    machines: dict[str, MachineSpec]
    trees: dict[str, dict] = field(default_factory=dict)
    containers: dict[str, dict] = field(default_factory=dict)
    steps: list[dict] = field(default_factory=list)
    version: int = SCENARIO_VERSION
    source: str | None = None

    @classmethod
    def from_dict(cls, d: dict, source: str | None = None) -> Scenario:
        if not isinstance(d, dict):
            raise SpecError("scenario must be a JSON object")
        version = int(d.get("version", SCENARIO_VERSION))
        if version > SCENARIO_VERSION:
            raise SpecError(f"scenario version {version} is not supported")
        machines = {name: MachineSpec.from_dict(m, name) for name, m in d.get("machines", {}).items()}
        if not machines:
            raise SpecError("scenario defines no machines")
        trees = {}
        for name, t in d.get("trees", {}).items():
            trees[name] = {"machine": t.get("machine", next(iter(machines))),
                           "spec": ProcessTreeSpec.from_dict(t["spec"])}
        containers = {}
        for name, c in d.get("containers", {}).items():
            containers[name] = {
                "machine": c.get("machine", next(iter(machines))),
                "layers": [Layer({k: v.encode() for k, v in layer.items()})
                           for layer in c.get("layers", [{}])],
                "gpu": GpuConfig.from_dict(c.get("gpu", {})),
                "spec": ProcessTreeSpec.from_dict(c["spec"]),
                "frozen": bool(c.get("frozen", False))}
        s = cls(machines, trees, containers, list(d.get("steps", [])), version, source)
        s.validate()
        return s

    @classmethod
    def load(cls, path) -> Scenario:
        try:
            with open(path) as f:
                data = json.load(f)
        except OSError as e:
            raise SpecError(f"cannot read scenario {path}: {e}") from None
        except ValueError as e:
            raise SpecError(f"{path}: invalid JSON ({e})") from None
        try:
            return cls.from_dict(data, str(path))
        except (KeyError, TypeError, AttributeError) as e:
            raise SpecError(f"{path}: bad scenario ({e!r})") from None

    def validate(self) -> None:
        """Every step must name entities defined earlier in the file."""
        for spec in list(self.trees.values()) + list(self.containers.values()):
            if spec["machine"] not in self.machines:
                raise SpecError(f"unknown machine {spec['machine']!r}")
        targets = set(self.trees) | set(self.containers)
        images = set()
        for i, st in enumerate(self.steps):
            op = st.get("op")
            if op not in OPS:
                raise SpecError(f"step {i}: unknown op {op!r}")
            if op in ("run", "dump", "kill", "freeze", "thaw", "verify", "checkpoint"):
                if st.get("target") not in targets:
                    raise SpecError(f"step {i}: unknown target {st.get('target')!r}")
            if op in ("dump", "checkpoint"):
                images.add(st.get("images", st["target"]))
            if op in ("restore", "container_restore"):
                if st.get("images") not in images:
                    raise SpecError(f"step {i}: images {st.get('images')!r} not produced earlier")
                if st.get("machine") not in self.machines:
                    raise SpecError(f"step {i}: unknown machine {st.get('machine')!r}")
                targets.add(st.get("as", st["images"] + "-restored"))
            if op == "verify" and "images" in st and st["images"] not in images:
                raise SpecError(f"step {i}: images {st['images']!r} not produced earlier")

    def machine_spec(self, name: str | None = None) -> MachineSpec:
        if name is None:
            return next(iter(self.machines.values()))
        try:
            return self.machines[name]
        except KeyError:
            raise SpecError(f"scenario has no machine {name!r}") from None


def _final_state(name: str) -> FinalState:
    try:
        return FinalState(name)
    except ValueError:
        raise SpecError(f"unknown final state {name!r}") from None


def _int_keys(d):
    return None if d is None else {int(k, 0) if isinstance(k, str) else int(k): int(v)
                                   for k, v in d.items()}


class ScenarioRunner:
    def __init__(self, scenario: Scenario, images_root, engine: CheckpointEngine | None = None):
        self.scenario = scenario
        self.images_root = Path(images_root)
        self.engine = engine or CheckpointEngine()
        self.machines: dict[str, Machine] = {}
        self.trees: dict[str, object] = {}
        self.containers: dict[str, SimContainer] = {}
        self.images: dict[str, Path] = {}
        self.dump_views: dict[str, tuple] = {}
        self.log: list[str] = []
        self.layer_store = {layer.digest: layer for c in scenario.containers.values()
                            for layer in c["layers"]}

    def machine(self, name: str) -> Machine:
        if name not in self.machines:
            self.machines[name] = self.scenario.machine_spec(name).build()
        return self.machines[name]

    def setup(self) -> None:
        for name, t in self.scenario.trees.items():
            self.trees[name] = spawn_tree(t["spec"], self.machine(t["machine"]))
        for name, c in self.scenario.containers.items():
            ct = create_container(name, c["layers"], c["gpu"], self.machine(c["machine"]), c["spec"])
            self.containers[name] = ct
            self.trees[name] = ct.tree
            if c["frozen"]:
                freeze(ct.tree.cgroup, ct.machine)

    def image_path(self, name: str) -> Path:
        return self.images_root / name

    def run(self, steps=None, overrides: dict | None = None) -> list[str]:
        for i, st in enumerate(self.scenario.steps if steps is None else steps):
            st = dict(st)
            if overrides and st["op"] in ("dump", "checkpoint"):
                st.update(overrides)
            expect = st.pop("expect_error", None)
            try:
                self._step(st)
            except CrError as e:
                if expect and _is_class(e, expect):
                    self.log.append(f"step {i} {st['op']}: expected {type(e).__name__}")
                    continue
                raise
            if expect:
                raise VerifyFailed(f"step {i} {st['op']}: expected {expect}, got success")
        return self.log

    def _step(self, st: dict) -> None:
        op = st["op"]
        getattr(self, f"_op_{op}")(st)

    def _op_run(self, st):
        n = int(st.get("steps", 1))
        name = st["target"]
        if name in self.containers:
            for _ in range(n):
                run_step(self.containers[name])
        else:
            run_steps(self.trees[name], n)
        self.log.append(f"run {name} x{n}")

    def _op_freeze(self, st):
        tree = self.trees[st["target"]]
        freeze(tree.cgroup, tree.machine)
        self.log.append(f"freeze {st['target']}")

    def _op_thaw(self, st):
        tree = self.trees[st["target"]]
        thaw(tree.cgroup, tree.machine)
        self.log.append(f"thaw {st['target']}")

    def _op_kill(self, st):
        tree = self.trees.pop(st["target"])
        for pid in tree.pids:
            tree.machine.unregister(pid)
        self.log.append(f"kill {st['target']}")

    def _dump_opts(self, st) -> DumpOptions:
        opts = DumpOptions(final_state=_final_state(st.get("final_state", "running")))
        if "timeout" in st:
            opts.timeout = float(st["timeout"])
        opts.use_freezer = bool(st.get("use_freezer", False))
        return opts

    def _op_dump(self, st):
        name = st["target"]
        images = st.get("images", name)
        tree = self.trees[name]
        view = tree_view(tree), content_view(tree)
        path = Path(st["path"]) if "path" in st else self.image_path(images)
        self.engine.dump(tree, path, self._dump_opts(st))
        self.images[images] = path
        self.dump_views[images] = view
        if not len(tree):
            self.trees.pop(name)
        self.log.append(f"dump {name} -> {path}")

    def _op_checkpoint(self, st):
        name = st["target"]
        images = st.get("images", name)
        c = self.containers[name]
        path = Path(st["path"]) if "path" in st else self.image_path(images)
        view = tree_view(c.tree), content_view(c.tree)
        container_checkpoint(c, self.engine, path, st.get("timeout"))
        self.images[images] = path
        self.dump_views[images] = view
        self.log.append(f"checkpoint {name} -> {path}")

    def _restore_opts(self, st) -> RestoreOptions:
        return RestoreOptions(device_map=_int_keys(st.get("device_map")),
                              gpuid_map=_int_keys(st.get("gpuid_map")))

    def _op_restore(self, st):
        images = st["images"]
        name = st.get("as", images + "-restored")
        path = self.images.get(images, self.image_path(images))
        self.trees[name] = self.engine.restore(path, self.machine(st["machine"]),
                                               self._restore_opts(st))
        self.log.append(f"restore {images} on {st['machine']} as {name} "
                        f"({self.engine.last_restore.restore_total:.6f}s)")

    def _op_container_restore(self, st):
        images = st["images"]
        name = st.get("as", images + "-restored")
        path = self.images.get(images, self.image_path(images))
        c = container_restore(path, self.machine(st["machine"]), self.layer_store, self.engine,
                              self._restore_opts(st))
        self.containers[name] = c
        self.trees[name] = c.tree
        self.log.append(f"container_restore {images} on {st['machine']} as {name}")

    def _op_verify(self, st):
        name = st["target"]
        tree = self.trees[name]
        if "images" in st:
            full, content = self.dump_views[st["images"]]
            if st.get("mode", "content") == "exact":
                ok = tree_view(tree) == full
            else:
                ok = content_view(tree) == _running(content)
            if not ok:
                raise VerifyFailed(f"{name} differs from the state captured in {st['images']}")
        if name in self.containers:
            c = self.containers[name]
            counter = int(c.rootfs.read(COUNTER_PATH)) if c.steps else 0
            root_steps = c.tree.root.workload.steps
            if counter != c.steps or (c.steps and root_steps < counter):
                raise VerifyFailed(f"{name}: counter file {counter} disagrees with {c.steps} steps")
        self.log.append(f"verify {name}: ok")


def _running(view: tuple) -> tuple:
    # a restored tree is always Running, whatever state the source was in
    return tuple((v[0], v[1], v[2], "running") + v[4:] for v in view)


def _is_class(e: Exception, name: str) -> bool:
    return any(k.__name__ == name for k in type(e).__mro__)


def default_images_dir() -> str | None:
    return os.environ.get("UNICR_IMAGES_DIR")

