import struct
import zlib

import pytest
from hypothesis import given, strategies as st

from unicr.cuda import (BLOB_MAGIC, CudaDevice, CudaDriver, CudaPhase, decode_blob, encode_blob,
                        kernel_transform)
from unicr.errors import (DeviceLocked, ImageCorrupt, MissingBlob, NotLocked, TaskNotRunning,
                          TimeoutExpired, TopologyMismatch)
from unicr.host import CostModel, SimClock


def driver(n=2, model="A100", memory=1 << 30):
    return CudaDriver(SimClock(), CostModel(), [CudaDevice(i, model, memory) for i in range(n)])


def with_task(drv, pid=1, sizes=(64,), ordinal=0):
    drv.attach(pid)
    ids = [drv.malloc(pid, ordinal, n, bytes(range(256)) * (n // 256) + bytes(n % 256)) for n in sizes]
    s = drv.stream_create(pid, ordinal)
    return ids, s


def blob_size_oracle(pid_used_devices, alloc_sizes, n_streams, n_contexts, n_leftover):
    """Byte length of a host blob, from the layout alone."""
    header = 4 + 2 + 4 + 4 + 4 + 8 + 4 + 4 + 4
    devs = sum(4 + 2 + len(model) + 8 for model in pid_used_devices)
    allocs = 4 + sum(4 + 4 + 8 + 8 + n for n in alloc_sizes)
    return (header + devs + allocs + 4 + 16 * n_streams + 4 + 4 * n_contexts
            + 4 + 8 * n_leftover + 4)


def test_api_calls_cost_time_and_count():
    drv = driver()
    with_task(drv)
    assert drv.api_calls == 2
    assert drv.clock.now == pytest.approx(2 * CostModel().api_call + 64 * 0)
    assert drv.intercepted_calls == 0


def test_kernel_transform_oracle():
    old, arg = bytes([1, 2, 3]), bytes([9, 8, 7])
    want = bytes([(1 * 31) ^ 9, ((2 * 31) ^ 8 ^ 7) & 0xFF, ((3 * 31) ^ 7 ^ 14) & 0xFF])
    assert kernel_transform(old, arg) == want


def test_lock_blocks_api():
    drv = driver()
    (a,), s = with_task(drv)
    drv.lock([1])
    assert drv.task(1).phase is CudaPhase.LOCKED
    with pytest.raises(DeviceLocked):
        drv.launch_kernel(1, s, a, 0, b"x")
    with pytest.raises(TaskNotRunning):
        drv.lock([1])
    drv.unlock([1])
    drv.launch_kernel(1, s, a, 0, b"x")


def test_lock_waits_for_slowest_callback():
    drv = driver()
    with_task(drv, 1)
    with_task(drv, 2)
    drv.add_callback(1, 0.5)
    drv.add_callback(2, 2.0)
    t0 = drv.clock.now
    waited = drv.lock([1, 2], timeout=10)
    assert waited == 2.0
    assert drv.clock.now - t0 == pytest.approx(2.0 + 2 * CostModel().lock_per_task)


@pytest.mark.parametrize("delays", [[None], [0.1, None], [11.0]])
def test_lock_timeout_rolls_back(delays):
    drv = driver()
    with_task(drv, 1)
    with_task(drv, 2)
    for d in delays:
        drv.add_callback(2, d)
    t0 = drv.clock.now
    with pytest.raises(TimeoutExpired) as ei:
        drv.lock([1, 2], timeout=10)
    assert ei.value.waited == 10
    assert drv.clock.now - t0 == pytest.approx(10.0)
    assert all(drv.task(p).phase is CudaPhase.RUNNING for p in (1, 2))
    assert len(drv.task(2).pending_callbacks) == len(delays)


def test_checkpoint_requires_lock():
    drv = driver()
    with_task(drv)
    with pytest.raises(NotLocked):
        drv.checkpoint_to_host([1])
    with pytest.raises(MissingBlob):
        drv.restore_from_host([1])


def test_checkpoint_releases_device_memory():
    drv = driver()
    with_task(drv, sizes=(100, 300))
    assert drv.devices[0].used == 400
    drv.lock([1])
    assert drv.checkpoint_to_host([1]) == 400
    st_ = drv.task(1)
    assert st_.phase is CudaPhase.CHECKPOINTED and st_.device_allocs == {}
    assert drv.devices[0].used == 0
    with pytest.raises(NotLocked):
        drv.unlock([1])
    drv.restore_from_host([1])
    assert drv.devices[0].used == 400
    drv.unlock([1])


@given(st.lists(st.integers(1, 600), min_size=0, max_size=5), st.integers(0, 3))
def test_blob_layout_oracle(sizes, leftovers):
    drv = driver(4, model="H100")
    drv.attach(1)
    for n in sizes:
        drv.malloc(1, 1, n)
    for _ in range(leftovers):
        drv.add_leftover(1, 3)
    st_ = drv.task(1)
    blob = encode_blob(st_, drv.devices)
    used = ["H100"] * (bool(sizes) + bool(leftovers))
    assert len(blob) == blob_size_oracle(used, sizes, 0, len(st_.contexts), leftovers)
    assert blob[:4] == BLOB_MAGIC
    assert struct.unpack_from("<H", blob, 4)[0] == 1
    assert struct.unpack_from("<I", blob, 6)[0] == 1
    assert zlib.crc32(blob[:-4]) == int.from_bytes(blob[-4:], "little")
    c = decode_blob(blob)
    assert c.device_count == 4
    assert [a.size for a in c.allocs] == sizes


def test_blob_records_only_used_devices():
    drv = driver(4)
    with_task(drv, ordinal=2)
    c = decode_blob(encode_blob(drv.task(1), drv.devices))
    assert c.device_count == 4 and [d[0] for d in c.devices] == [2]


@given(st.integers(0, 200), st.integers(0, 7))
def test_blob_corruption_detected(pos, bit):
    drv = driver()
    with_task(drv)
    blob = bytearray(encode_blob(drv.task(1), drv.devices))
    blob[pos % len(blob)] ^= 1 << bit
    with pytest.raises(ImageCorrupt):
        decode_blob(bytes(blob))


def test_restore_onto_other_driver_with_device_map():
    src = driver(2)
    with_task(src, ordinal=1, sizes=(128,))
    before = bytes(src.task(1).device_allocs[1].contents)
    src.lock([1])
    src.checkpoint_to_host([1])
    blob = src.task(1).host_blob

    dst = driver(2)
    dst.adopt(1, blob)
    dst.restore_from_host([1], device_map={0: 1, 1: 0})
    dst.unlock([1])
    a = dst.task(1).device_allocs[1]
    assert a.ordinal == 0 and bytes(a.contents) == before
    assert dst.devices[0].used == 128


@pytest.mark.parametrize("target,dmap", [
    (lambda: driver(1), None),                 # fewer GPUs
    (lambda: driver(3), None),                 # more GPUs
    (lambda: driver(2, model="H100"), None),   # other model
    (lambda: driver(2, memory=1 << 20), None),  # other memory size
    (lambda: driver(2), {0: 1, 1: 1}),         # not one-to-one
    (lambda: driver(2), {0: 0}),               # does not cover device 1
])
def test_restore_topology_mismatch(target, dmap):
    src = driver(2)
    with_task(src, ordinal=1)
    src.lock([1])
    src.checkpoint_to_host([1])
    dst = target()
    dst.adopt(1, src.task(1).host_blob)
    with pytest.raises(TopologyMismatch):
        dst.restore_from_host([1], device_map=dmap)
    assert dst.task(1).phase is CudaPhase.CHECKPOINTED


def test_nondeterministic_kernel_differs_across_boots():
    outs = []
    for _ in range(2):
        drv = driver()
        (a,), s = with_task(drv)
        outs.append(drv.launch_kernel(1, s, a, 0, bytes(16), nondeterministic=True))
    assert outs[0] != outs[1]
