import itertools
import zlib

import pytest
from hypothesis import given, strategies as st

from unicr.errors import (BadGpuidMap, DeviceBusy, InvalidState, NoKfdFd, NotPaused, NotRestored,
                          PermissionDenied, TopologyIncompatible)
from unicr.kfd import (CAP_CHECKPOINT_RESTORE, CAP_SYS_ADMIN, BoKind, Caller, DeviceProps,
                       GpuTopology, KfdPhase, check_gpuid_map, compute_gpuid, match_topology)
from unicr.machine import MachineSpec
from unicr.workload import ProcessTreeSpec, spawn_tree

CAPS = frozenset({CAP_CHECKPOINT_RESTORE})
MI = {"isa": "gfx90a", "compute_units": 104, "vram": 1 << 36}
MX = {"isa": "gfx942", "compute_units": 304, "vram": 1 << 37}


def machine(name, devs, links=()):
    return MachineSpec.from_dict({"name": name, "salt": name, "kfd": devs,
                                  "links": [list(x) for x in links]}).build()


def kfd_tree(m, pid=5):
    spec = ProcessTreeSpec.from_dict({"seed": 1, "processes": [
        {"pid": pid, "vmas": [{"start": 0x10000, "length": 4096}],
         "kfd": {"bos": [{"kind": "vram", "device": 0, "size": 8192},
                         {"kind": "userptr", "device": 1, "size": 4096},
                         {"kind": "doorbell", "device": 1, "size": 4096}],
                 "queues": [{"device": 0}, {"kind": "dma", "device": 1}], "events": 2}}]})
    return spawn_tree(spec, m)


def test_gpuid_oracle():
    import hashlib
    props = DeviceProps("gfx90a", 104, 1 << 36)
    h = hashlib.blake2b(b"s:0|gfx90a|104", digest_size=4).digest()
    assert compute_gpuid(props, "s:0") == int.from_bytes(h, "little") | 1


def test_gpuid_depends_on_salt_and_props():
    p = DeviceProps("gfx90a", 104, 1)
    assert compute_gpuid(p, "a") != compute_gpuid(p, "b")
    assert compute_gpuid(p, "a") != compute_gpuid(DeviceProps("gfx90a", 110, 1), "a")
    # vram does not enter the id
    assert compute_gpuid(p, "a") == compute_gpuid(DeviceProps("gfx90a", 104, 2), "a")


def test_offset_base_oracle():
    m = machine("host-7", [MI])
    assert m.kfd.offset_base == (zlib.crc32(b"host-7") & 0xFFFF) << 32
    tree = kfd_tree(machine("host-7", [MI, MX]))
    bos = tree.machine.kfd.process(5).bos.values()
    assert all(b.mmap_offset >> 32 == zlib.crc32(b"host-7") & 0xFFFF for b in bos)


def test_ioctl_sequence_and_phases():
    m = machine("a", [MI, MX], [(0, 1)])
    kfd_tree(m)
    drv, c = m.kfd, Caller(5, CAPS)
    with pytest.raises(NotPaused):
        drv.ioctl_checkpoint(c, 5)
    info = drv.ioctl_process_info(c, 5)
    assert (info.bos, info.queues, info.events) == (len(drv.process(5).bos), 2, 2)
    assert drv.process(5).phase is KfdPhase.PAUSED
    assert all(q.preempted for q in drv.process(5).queues.values())
    with pytest.raises(InvalidState):
        drv.ioctl_process_info(c, 5)
    bundle = drv.ioctl_checkpoint(c, 5)
    assert len(bundle.topology) == 2
    userptr = [b for b in bundle.bos if b.kind is BoKind.USERPTR][0]
    assert bytes(userptr.contents) == m.task(5).read_mem(userptr.virtual_addr, userptr.size)
    drv.ioctl_unpause(c, 5)
    assert drv.process(5).phase is KfdPhase.RUNNING
    with pytest.raises(NotRestored):
        drv.ioctl_resume(c, 5)
    with pytest.raises(NoKfdFd):
        drv.ioctl_process_info(c, 77)


def test_per_process_exclusivity():
    m = machine("a", [MI, MX])
    kfd_tree(m)
    lk = m.kfd._pid_locks[5]
    lk.acquire()
    try:
        with pytest.raises(DeviceBusy):
            m.kfd.ioctl_process_info(Caller(5, CAPS), 5)
    finally:
        lk.release()


@pytest.mark.parametrize("caps", [frozenset(), frozenset({"CAP_NET_ADMIN"})])
def test_capability_required(caps):
    m = machine("a", [MI, MX])
    kfd_tree(m)
    with pytest.raises(PermissionDenied):
        m.kfd.ioctl_process_info(Caller(5, caps), 5)
    assert m.kfd.process(5).phase is KfdPhase.RUNNING


def test_sys_admin_is_enough():
    m = machine("a", [MI, MX])
    kfd_tree(m)
    m.kfd.ioctl_process_info(Caller(5, frozenset({CAP_SYS_ADMIN})), 5)


@given(st.integers(1, 1000).filter(lambda p: p != 5))
def test_non_opener_denied(other):
    m = machine("a", [MI, MX])
    kfd_tree(m)
    with pytest.raises(PermissionDenied):
        m.kfd.ioctl_process_info(Caller(other, CAPS | {CAP_SYS_ADMIN}), 5)


def test_match_topology_prefers_identity():
    topo = machine("a", [MI, MX], [(0, 1)]).kfd.topology
    assert match_topology(topo.nodes, topo) == {g: g for g in topo.gpuids}


def test_match_topology_permuted():
    src = machine("a", [MI, MX], [(0, 1)]).kfd.topology
    dst = machine("b", [MX, MI], [(0, 1)]).kfd.topology
    m = match_topology(src.nodes, dst)
    assert m == {src.gpuids[0]: dst.gpuids[1], src.gpuids[1]: dst.gpuids[0]}


@pytest.mark.parametrize("dst", [
    [MI],                                   # fewer devices
    [MI, MX, MI],                           # more devices
    [dict(MX, vram=1 << 30), MI],           # smaller VRAM
    [MI, dict(MX, compute_units=300)],      # other CU count
])
def test_match_topology_incompatible(dst):
    src = machine("a", [MI, MX], [(0, 1)]).kfd.topology
    with pytest.raises(TopologyIncompatible) as ei:
        match_topology(src.nodes, machine("b", dst, [(0, 1)] if len(dst) > 1 else []).kfd.topology)
    assert ei.value.diff


def test_links_must_match():
    src = machine("a", [MI, MI, MI], [(0, 1)]).kfd.topology
    assert match_topology(src.nodes, machine("b", [MI, MI, MI], [(1, 2)]).kfd.topology)
    with pytest.raises(TopologyIncompatible):
        match_topology(src.nodes, machine("c", [MI, MI, MI], []).kfd.topology)


def test_check_gpuid_map_rules():
    src = machine("a", [MI, MX]).kfd.topology
    dst = machine("b", [MI, MX]).kfd.topology
    a, b = src.gpuids
    x, y = dst.gpuids
    check_gpuid_map(src.nodes, dst, {a: x, b: y})
    with pytest.raises(BadGpuidMap):
        check_gpuid_map(src.nodes, dst, {a: x})
    with pytest.raises(BadGpuidMap):
        check_gpuid_map(src.nodes, dst, {a: x, b: x})
    with pytest.raises(BadGpuidMap):
        check_gpuid_map(src.nodes, dst, {a: x, b: 12345})
    with pytest.raises(TopologyIncompatible):
        check_gpuid_map(src.nodes, dst, {a: y, b: x})


@given(st.permutations(list(range(4))))
def test_any_device_order_is_matched(perm):
    devs = [MI, MX, dict(MI, compute_units=110), dict(MX, vram=1 << 38)]
    src = machine("a", devs).kfd.topology
    dst = machine("b", [devs[i] for i in perm]).kfd.topology
    m = match_topology(src.nodes, dst)
    for i, g in enumerate(src.gpuids):
        assert m[g] == dst.gpuids[perm.index(i)]


def test_restore_translates_everything():
    src_m = machine("a", [MI, MX], [(0, 1)])
    kfd_tree(src_m)
    c = Caller(5, CAPS)
    src_m.kfd.ioctl_process_info(c, 5)
    bundle = src_m.kfd.ioctl_checkpoint(c, 5)

    dst_m = machine("b", [MX, MI], [(0, 1)])
    gmap = match_topology(bundle.topology, dst_m.kfd.topology)
    dst_m.kfd.open_kfd(5)
    offsets = dst_m.kfd.ioctl_restore(c, 5, bundle, gmap)
    st_ = dst_m.kfd.process(5)
    assert st_.phase is KfdPhase.RESTORED
    assert {b.gpuid for b in st_.bos.values()} <= set(dst_m.kfd.topology.gpuids)
    assert {q.gpuid for q in st_.queues.values()} <= set(dst_m.kfd.topology.gpuids)
    old_offsets = {b.mmap_offset for b in bundle.bos}
    assert not old_offsets & {b.mmap_offset for b in st_.bos.values()}
    assert len(offsets) == len(bundle.bos)
    with pytest.raises(InvalidState):
        dst_m.kfd.ioctl_restore(c, 5, bundle, gmap)


def test_same_host_restore_keeps_offsets():
    m = machine("a", [MI, MX])
    tree = kfd_tree(m)
    c = Caller(5, CAPS)
    m.kfd.ioctl_process_info(c, 5)
    bundle = m.kfd.ioctl_checkpoint(c, 5)
    before = {b.handle: b.mmap_offset for b in bundle.bos}
    m.unregister(5)
    m.register(tree.task(5))
    m.kfd.open_kfd(5)
    m.kfd.ioctl_restore(c, 5, bundle, {g: g for g in m.kfd.topology.gpuids})
    assert {h: b.mmap_offset for h, b in m.kfd.process(5).bos.items()} == before
    assert m.kfd.finalize_userptr(5) == 1
    m.kfd.ioctl_resume(c, 5)
    assert m.kfd.process(5).phase is KfdPhase.RUNNING


def test_offsets_never_collide():
    m = machine("a", [MI])
    spans = []
    for pid in range(1, 6):
        m.kfd.open_kfd(pid)
        for size in (1, 4096, 5000):
            b = m.kfd.alloc_bo(pid, BoKind.GTT, size, m.kfd.topology.gpuids[0], 0)
            spans.append((b.mmap_offset, b.mmap_offset + size))
    spans.sort()
    assert all(a[1] <= b[0] for a, b in zip(spans, spans[1:]))
