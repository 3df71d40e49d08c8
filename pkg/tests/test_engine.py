import pytest
from hypothesis import given, settings, strategies as st

from gen import cases
from unicr.cuda import CudaPhase
from unicr.engine import (CheckpointEngine, DumpOptions, FinalState, HookId, HookTrace, Plugin,
                          RestoreOptions, validate_dump_trace, validate_restore_trace)
from unicr.errors import (DuplicatePlugin, HookOrderViolation, InvalidState, IoError, LockTimeout,
                          PluginError, TopologyMismatch, UnknownDevice, Unsupported)
from unicr.host import FreezerState, RunState, freeze, seize_interrupt
from unicr.images import read_image_set
from unicr.kfd import KfdPhase
from unicr.machine import MachineSpec
from unicr.plugins import CudaPlugin, KfdPlugin
from unicr.state import state_hash, tree_view
from unicr.workload import ProcessTreeSpec, run_steps, spawn_tree


class Recorder(Plugin):
    """Claims nothing; raises at one chosen hook."""

    id = "recorder"

    def __init__(self, fail_at=None):
        self.fail_at = fail_at
        self.seen = []
        for h in HookId:
            if not hasattr(type(self), h.value):
                setattr(self, h.value, self._make(h))

    def _make(self, hook):
        def fn(ctx, *args):
            self.seen.append(hook)
            if hook is self.fail_at:
                raise RuntimeError(f"boom at {hook.name}")
        return fn

    def handles(self, tree):
        return True

    def plugin_init(self, ctx, stage):
        self._make(HookId.PLUGIN_INIT)(ctx)

    def plugin_exit(self, ctx, success):
        self.seen.append(HookId.PLUGIN_EXIT)
        self.exit_success = success


def build(machine_spec, tree_spec, steps=2):
    m = machine_spec.build()
    tree = spawn_tree(tree_spec, m)
    run_steps(tree, steps)
    return m, tree


def test_roundtrip_onto_fresh_machine(tmp_path, two_gpu_machine, mixed_tree_spec):
    m, tree = build(two_gpu_machine, mixed_tree_spec)
    v0 = tree_view(tree)
    e = CheckpointEngine()
    e.dump(tree, tmp_path / "img")
    assert tree_view(tree) == v0
    t2 = e.restore(tmp_path / "img", two_gpu_machine.build())
    assert tree_view(t2) == v0
    assert run_steps(t2, 3, sorted(t2.pids)) == run_steps(tree, 3, sorted(tree.pids))


def test_hook_sequence(tmp_path, two_gpu_machine, mixed_tree_spec):
    m, tree = build(two_gpu_machine, mixed_tree_spec)
    e = CheckpointEngine()
    e.dump(tree, tmp_path / "img")
    hooks = [h for h in e.trace.hooks()]
    assert hooks[:2] == ["PLUGIN_INIT", "PLUGIN_INIT"]
    assert hooks[2:4] == ["PAUSE_DEVICES", "PAUSE_DEVICES"]
    assert hooks[-2:] == ["PLUGIN_EXIT", "PLUGIN_EXIT"]
    names = e.trace.names()
    assert names.index("seize") > max(e.trace.positions("PAUSE_DEVICES"))
    assert names.index("tasks_paused") < min(e.trace.positions("CHECKPOINT_DEVICES"))
    assert "RESUME_DEVICES_LATE" in names

    e.restore(tmp_path / "img", two_gpu_machine.build())
    names = e.trace.names()
    assert max(e.trace.positions("UPDATE_VMA_MAP")) < names.index("vmas_restored")
    assert names.index("vmas_restored") < min(e.trace.positions("RESUME_DEVICES_LATE"))


def test_cpu_only_tree_fires_no_device_hooks(tmp_path):
    m = MachineSpec.from_dict({"cuda": [{"model": "A", "memory": 1 << 30}]}).build()
    tree = spawn_tree(ProcessTreeSpec.from_dict(
        {"processes": [{"pid": 1, "vmas": [{"start": 4096, "length": 9000}]}]}), m)
    e = CheckpointEngine()
    e.dump(tree, tmp_path / "img")
    assert e.trace.hooks() == []
    snap = read_image_set(tmp_path / "img")
    assert not snap.inventory.has_gpu_state and snap.inventory.plugin_ids == []
    assert e.last_stats.pages_scanned == 3 and e.last_stats.gpu_bytes == 0


@pytest.mark.parametrize("final,state", [
    (FinalState.RUNNING, RunState.RUNNING),
    (FinalState.STOPPED, RunState.SEIZED),
    (FinalState.FROZEN, RunState.FROZEN),
])
def test_final_states(tmp_path, two_gpu_machine, mixed_tree_spec, final, state):
    m, tree = build(two_gpu_machine, mixed_tree_spec)
    CheckpointEngine().dump(tree, tmp_path / "img", DumpOptions(final_state=final))
    assert all(t.run_state is state for t in tree)
    assert all(s.phase is CudaPhase.RUNNING for s in m.cuda.tasks.values())
    assert all(s.phase is KfdPhase.RUNNING for s in m.kfd.processes.values())


def test_kill_unregisters(tmp_path, two_gpu_machine, mixed_tree_spec):
    m, tree = build(two_gpu_machine, mixed_tree_spec)
    e = CheckpointEngine()
    e.dump(tree, tmp_path / "img", DumpOptions(final_state=FinalState.KILL))
    assert not m.tasks and not m.cuda.tasks and not m.kfd.processes and not len(tree)
    assert "RESUME_DEVICES_LATE" not in e.trace.names()
    t2 = e.restore(tmp_path / "img", m)
    assert sorted(t2.pids) == [1, 2, 3]


def test_stats_ordering_and_accounting(tmp_path, two_gpu_machine, mixed_tree_spec):
    m, tree = build(two_gpu_machine, mixed_tree_spec)
    e = CheckpointEngine()
    e.dump(tree, tmp_path / "img")
    s = e.last_stats
    assert s.ordering_holds() and s.freezing_time > 0 and s.mem_write_time > 0
    files = {f.name: f.stat().st_size - 20 for f in (tmp_path / "img").iterdir()}
    assert s.gpu_bytes == sum(v for k, v in files.items() if k.startswith(("cuda-", "kfd-")))
    assert s.cpu_bytes == sum(v for k, v in files.items() if k.startswith("pages-"))
    assert read_image_set(tmp_path / "img").stats == s


@pytest.mark.parametrize("hook", [HookId.PLUGIN_INIT, HookId.PAUSE_DEVICES,
                                  HookId.CHECKPOINT_DEVICES, HookId.DUMP_EXT_FILE,
                                  HookId.HANDLE_DEVICE_VMA, HookId.RESUME_DEVICES_LATE])
def test_dump_failure_rolls_back(tmp_path, two_gpu_machine, mixed_tree_spec, hook):
    m, tree = build(two_gpu_machine, mixed_tree_spec)
    h0 = state_hash(tree)
    rec = Recorder(fail_at=hook)
    # registered first so it sees claim hooks before the device plugins answer
    e = CheckpointEngine(plugins=[rec, CudaPlugin(), KfdPlugin()])
    with pytest.raises(PluginError) as ei:
        e.dump(tree, tmp_path / "img")
    assert ei.value.plugin_id == "recorder"
    assert rec.seen[-1] is HookId.PLUGIN_EXIT and rec.exit_success is False
    assert state_hash(tree) == h0
    assert not (tmp_path / "img").exists()
    assert not list(tmp_path.iterdir())
    run_steps(tree, 1)


class BrokenResumeCuda(CudaPlugin):
    def resume_devices_late(self, ctx, pid):
        super().resume_devices_late(ctx, pid)
        if ctx.stage.value == "restore" and pid == 2:
            raise RuntimeError("device refused to resume")


def test_restore_failure_cleans_up(tmp_path, two_gpu_machine, mixed_tree_spec):
    m, tree = build(two_gpu_machine, mixed_tree_spec)
    CheckpointEngine().dump(tree, tmp_path / "img")
    target = two_gpu_machine.build()
    e = CheckpointEngine(plugins=[BrokenResumeCuda(), KfdPlugin()])
    with pytest.raises(PluginError):
        e.restore(tmp_path / "img", target)
    assert not target.tasks and not target.cuda.tasks and not target.kfd.processes
    assert all(d.used == 0 for d in target.cuda.devices)
    # and a clean engine can still restore there
    CheckpointEngine().restore(tmp_path / "img", target)


def test_missing_plugin_on_restore(tmp_path, two_gpu_machine, mixed_tree_spec):
    m, tree = build(two_gpu_machine, mixed_tree_spec)
    CheckpointEngine().dump(tree, tmp_path / "img")
    with pytest.raises(PluginError):
        CheckpointEngine(plugins=[CudaPlugin()]).restore(tmp_path / "img", two_gpu_machine.build())


def test_unclaimed_device_fd(tmp_path):
    m = MachineSpec().build()
    tree = spawn_tree(ProcessTreeSpec.from_dict({"processes": [{"pid": 1}]}), m)
    tree.task(1).open_device("/dev/fpga0")
    h0 = state_hash(tree)
    with pytest.raises(UnknownDevice):
        CheckpointEngine().dump(tree, tmp_path / "img")
    assert state_hash(tree) == h0


def test_preconditions(tmp_path, two_gpu_machine, mixed_tree_spec):
    m, tree = build(two_gpu_machine, mixed_tree_spec)
    e = CheckpointEngine()
    (tmp_path / "exists").mkdir()
    with pytest.raises(IoError):
        e.dump(tree, tmp_path / "exists")
    with pytest.raises(Unsupported):
        e.pre_dump(tree, tmp_path / "x")
    seize_interrupt(tree, [2])
    with pytest.raises(InvalidState):
        e.dump(tree, tmp_path / "x")
    with pytest.raises(DuplicatePlugin):
        e.register_plugin(CudaPlugin())


def test_restore_refuses_pid_clash_and_gpu_less_host(tmp_path, two_gpu_machine, mixed_tree_spec):
    m, tree = build(two_gpu_machine, mixed_tree_spec)
    e = CheckpointEngine()
    e.dump(tree, tmp_path / "img")
    with pytest.raises(InvalidState):
        e.restore(tmp_path / "img", m)
    with pytest.raises(TopologyMismatch):
        e.restore(tmp_path / "img", MachineSpec().build())


def test_lock_timeout_is_reported_and_rolled_back(tmp_path, two_gpu_machine):
    spec = ProcessTreeSpec.from_dict({"processes": [
        {"pid": 1, "cuda": {"allocs": [{"size": 64}], "callbacks": ["never"]}},
        {"pid": 2, "ppid": 1, "cuda": {"allocs": [{"size": 64}]}}]})
    m, tree = build(two_gpu_machine, spec)
    h0 = state_hash(tree)
    t0 = m.clock.now
    with pytest.raises(LockTimeout):
        CheckpointEngine().dump(tree, tmp_path / "img", DumpOptions(timeout=3))
    assert m.clock.now - t0 >= 3
    assert state_hash(tree) == h0 and not (tmp_path / "img").exists()


def test_frozen_cuda_tree_is_thawed_then_seized(tmp_path, two_gpu_machine, mixed_tree_spec):
    m, tree = build(two_gpu_machine, mixed_tree_spec)
    freeze(tree.cgroup, m)
    e = CheckpointEngine()
    e.dump(tree, tmp_path / "img", DumpOptions(final_state=FinalState.FROZEN))
    n = e.trace.names()
    assert n.index("thaw") < n.index("PAUSE_DEVICES") < n.index("seize")
    assert "freeze" not in n
    assert tree.cgroup.state is FreezerState.FROZEN


def test_frozen_kfd_only_tree_uses_freezer(tmp_path, two_gpu_machine):
    spec = ProcessTreeSpec.from_dict({"processes": [
        {"pid": 7, "kfd": {"bos": [{"kind": "vram", "size": 4096}], "queues": [{}]}}]})
    m, tree = build(two_gpu_machine, spec)
    freeze(tree.cgroup, m)
    h0 = state_hash(tree)
    e = CheckpointEngine()
    e.dump(tree, tmp_path / "img")
    n = e.trace.names()
    assert "seize" not in n and "thaw" not in n
    assert state_hash(tree) == h0


def test_trace_validators_reject_bad_orders():
    t = HookTrace()
    for name, plugin in [("PLUGIN_INIT", "x"), ("seize", None), ("PAUSE_DEVICES", "x"),
                         ("tasks_paused", None), ("images_written", None), ("PLUGIN_EXIT", "x")]:
        t.record(name, plugin, None, 0.0)
    with pytest.raises(HookOrderViolation):
        validate_dump_trace(t)
    r = HookTrace()
    for name, plugin in [("PLUGIN_INIT", "x"), ("images_read", None), ("tasks_created", None),
                         ("RESUME_DEVICES_LATE", "x"), ("vmas_restored", None),
                         ("tasks_running", None), ("PLUGIN_EXIT", "x")]:
        r.record(name, plugin, None, 0.0)
    with pytest.raises(HookOrderViolation):
        validate_restore_trace(r)
    u = HookTrace()
    u.record("PLUGIN_INIT", "x", None, 0.0)
    with pytest.raises(HookOrderViolation):
        validate_restore_trace(u, success=False)


@settings(max_examples=40)
@given(cases, st.sampled_from([FinalState.RUNNING, FinalState.KILL]))
def test_random_roundtrip(tmp_path_factory, case, final):
    ms, ts, _ = case
    m = ms.build()
    tree = spawn_tree(ts, m)
    run_steps(tree, 2)
    v0 = tree_view(tree)
    path = tmp_path_factory.mktemp("img") / "i"
    e = CheckpointEngine()
    e.dump(tree, path, DumpOptions(final_state=final))
    target = m if final is FinalState.KILL else ms.build()
    assert tree_view(e.restore(path, target)) == v0
