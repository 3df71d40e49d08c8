"""Canonical views of live simulator state, used for deep comparison and
hashing across pause windows and checkpoint/restore round trips."""

from __future__ import annotations

import hashlib

from .cuda import cuda_view
from .host import SimProcessTree
from .kfd import kfd_view


def task_view(tree: SimProcessTree, pid: int) -> tuple:
    t = tree.task(pid)
    m = tree.machine
    vmas = tuple(
        (v.start, v.length,
         (v.backing.device_name, v.backing.mmap_offset) if v.backing else None,
         bytes(v.contents) if v.contents is not None else None)
        for v in t.vmas)
    fds = tuple((d.fd, d.path, d.leftover) for d in t.open_devices)
    w = t.workload
    cuda = cuda_view(m.cuda.tasks[pid]) if pid in m.cuda.tasks else None
    kfd = kfd_view(m.kfd.processes[pid], m) if pid in m.kfd.processes else None
    return (t.pid, t.ppid, tuple(t.thread_ids), t.run_state.value,
            (w.seed, w.steps, w.cpu_writes, w.device_writes, w.write_size),
            vmas, fds, t.next_fd, cuda, kfd)


def tree_view(tree: SimProcessTree) -> tuple:
    return (tuple(task_view(tree, pid) for pid in sorted(tree.pids)),
            tuple(sorted(tree.cgroup.member_pids)), tree.cgroup.state.value)


def state_hash(tree: SimProcessTree) -> str:
    return hashlib.sha256(repr(tree_view(tree)).encode()).hexdigest()


def content_view(tree: SimProcessTree) -> tuple:
    """Placement-independent view: everything except device paths, gpuids
    and mmap offsets, which legitimately change on another machine."""
    m = tree.machine
    out = []
    for pid in sorted(tree.pids):
        t = tree.task(pid)
        w = t.workload
        anon = tuple((v.start, v.length, bytes(v.contents)) for v in t.anon_vmas())
        dev = tuple((v.start, v.length) for v in t.device_vmas())
        cuda = kfd = None
        if pid in m.cuda.tasks:
            st = m.cuda.tasks[pid]
            cuda = (st.phase.value,
                    tuple((a.alloc_id, a.addr, a.size, bytes(a.contents))
                          for a in sorted(st.device_allocs.values(), key=lambda a: a.alloc_id)),
                    tuple((s.stream_id, s.completed) for s in st.streams))
        if pid in m.kfd.processes:
            st = m.kfd.processes[pid]
            kfd = (st.phase.value,
                   tuple((b.handle, b.kind.value, b.size, b.virtual_addr,
                          bytes(b.contents) if b.contents is not None else None)
                         for b in sorted(st.bos.values(), key=lambda b: b.handle)),
                   tuple((q.queue_id, q.kind.value, q.read_ptr, q.write_ptr, q.aql_ptr,
                          tuple(sorted(q.user_bos.items())), q.preempted)
                         for q in sorted(st.queues.values(), key=lambda q: q.queue_id)),
                   tuple((e.event_id, e.signaled)
                         for e in sorted(st.events.values(), key=lambda e: e.event_id)))
        out.append((pid, t.ppid, tuple(t.thread_ids), t.run_state.value,
                    (w.seed, w.steps), anon, dev, len(t.open_devices), cuda, kfd))
    return tuple(out)
