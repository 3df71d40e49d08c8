"""On-disk image sets.

An image set is a directory::

    inventory      root metadata: version, GPU flag, plugin ids, file checksums
    pages-<pid>    task core record (threads, VMAs, device fds) and CPU pages
    cuda-<pid>     CUDA host blob of one task
    kfd-<pid>      KFD checkpoint bundle of one task
    stats          dump/restore statistics (own schema version)
    <extra>        opaque records attached by callers, e.g. ``rootfs-diff``

Every file is ``magic | u16 version | u16 kind | u64 length | payload | u32 crc32``
with all integers little-endian. The CRC covers everything before it.
Directories are written under a temporary name and renamed into place.
"""

from __future__ import annotations

import json
import os
import re
import shutil
import uuid
import zlib
from dataclasses import asdict, dataclass, field, fields
from enum import IntEnum
from pathlib import Path

from .codec import Packer, Truncated, Unpacker
from .errors import (ChecksumMismatch, ImageCorrupt, IoError, MissingFile,
                     VersionUnsupported)
from .kfd import (BoKind, BufferObject, DeviceProps, KfdCheckpointBundle, KfdEvent,
                  QueueKind, QueueState, TopologyNode)

FORMAT_VERSION = 1
STATS_VERSION = 1
FILE_MAGIC = b"UCRI"
HEADER_SIZE = 4 + 2 + 2 + 8
_EXTRA_NAME = re.compile(r"^[a-z][a-z0-9-]*$")
_RESERVED = re.compile(r"^(inventory|stats|pages-\d+|cuda-\d+|kfd-\d+)$")


class FileKind(IntEnum):
    INVENTORY = 1
    PAGES = 2
    CUDA = 3
    KFD = 4
    STATS = 5
    EXTRA = 6


@dataclass
class VmaImage:
    start: int
    length: int
    device_name: str | None = None
    mmap_offset: int = 0
    contents: bytes | None = None


@dataclass
class DeviceFileRecord:
    """What DUMP_EXT_FILE captured about one open device descriptor."""

    fd: int
    path: str
    plugin: str
    kind: str
    leftover: bool = False
    gpuid: int = 0
    ordinal: int = -1


@dataclass
class TaskImage:
    pid: int
    ppid: int
    thread_ids: list[int]
    workload: tuple[int, int, int, int, int]
    next_fd: int
    vmas: list[VmaImage] = field(default_factory=list)
    fds: list[DeviceFileRecord] = field(default_factory=list)


@dataclass
class Inventory:
    format_version: int = FORMAT_VERSION
    created_at: float = 0.0
    process_count: int = 0
    has_gpu_state: bool = False
    plugin_ids: list[str] = field(default_factory=list)
    root_pid: int = 0
    cgroup_frozen: bool = False
    files: dict[str, int] = field(default_factory=dict)  # name -> crc32


@dataclass
class CrStats:
    freezing_time: float = 0.0
    frozen_time: float = 0.0
    mem_dump_time: float = 0.0
    mem_write_time: float = 0.0
    checkpoint_total: float = 0.0
    restore_total: float = 0.0
    pages_scanned: int = 0
    gpu_bytes: int = 0
    cpu_bytes: int = 0

    def ordering_holds(self) -> bool:
        return (self.mem_write_time <= self.mem_dump_time <= self.frozen_time
                <= self.checkpoint_total)


@dataclass
class Snapshot:
    inventory: Inventory
    tasks: list[TaskImage]
    cuda: dict[int, bytes] = field(default_factory=dict)
    kfd: dict[int, KfdCheckpointBundle] = field(default_factory=dict)
    stats: CrStats = field(default_factory=CrStats)
    extras: dict[str, bytes] = field(default_factory=dict)


@dataclass
class Breakdown:
    gpu_share: float
    cpu_share: float


# -- envelope ------------------------------------------------------------------

def wrap(kind: FileKind, payload: bytes, version: int = FORMAT_VERSION) -> bytes:
    body = Packer().raw(FILE_MAGIC).u16(version).u16(int(kind)).blob(payload).bytes()
    return body + zlib.crc32(body).to_bytes(4, "little")


def unwrap(name: str, data: bytes, kind: FileKind) -> tuple[int, bytes]:
    if len(data) < HEADER_SIZE + 4:
        raise ChecksumMismatch(name)
    expected = int.from_bytes(data[-4:], "little")
    actual = zlib.crc32(data[:-4])
    if expected != actual:
        raise ChecksumMismatch(name, expected, actual)
    u = Unpacker(data[:-4])
    try:
        if u.raw(4) != FILE_MAGIC:
            raise ImageCorrupt(f"{name}: bad magic")
        version = u.u16()
        if u.u16() != kind:
            raise ImageCorrupt(f"{name}: unexpected file kind")
        payload = u.blob()
        u.expect_end()
    except Truncated as e:
        raise ImageCorrupt(f"{name}: {e}") from None
    return version, payload


# -- payload codecs --------------------------------------------------------------

def encode_inventory(inv: Inventory) -> bytes:
    p = Packer().u16(inv.format_version).f64(inv.created_at).u32(inv.process_count)
    p.boolean(inv.has_gpu_state).u32(inv.root_pid).boolean(inv.cgroup_frozen)
    p.u32(len(inv.plugin_ids))
    for pid_ in inv.plugin_ids:
        p.string(pid_)
    p.u32(len(inv.files))
    for name, crc in sorted(inv.files.items()):
        p.string(name).u32(crc)
    return p.bytes()


def decode_inventory(data: bytes) -> Inventory:
    u = Unpacker(data)
    inv = Inventory(u.u16(), u.f64(), u.u32(), u.boolean(), root_pid=u.u32(),
                    cgroup_frozen=u.boolean())
    inv.plugin_ids = [u.string() for _ in range(u.u32())]
    inv.files = {}
    for _ in range(u.u32()):
        name = u.string()
        inv.files[name] = u.u32()
    u.expect_end()
    return inv


def encode_task(t: TaskImage) -> bytes:
    p = Packer().u32(t.pid).u32(t.ppid).u32(len(t.thread_ids))
    for tid in t.thread_ids:
        p.u32(tid)
    for x in t.workload:
        p.u64(x)
    p.u32(t.next_fd)
    p.u32(len(t.fds))
    for r in t.fds:
        p.u32(r.fd).string(r.path).string(r.plugin).string(r.kind).boolean(r.leftover)
        p.u32(r.gpuid).u32(r.ordinal & 0xFFFFFFFF)
    p.u32(len(t.vmas))
    for v in t.vmas:
        p.u64(v.start).u64(v.length).boolean(v.device_name is not None)
        if v.device_name is not None:
            p.string(v.device_name).u64(v.mmap_offset)
        p.optional_blob(v.contents)
    return p.bytes()


def decode_task(data: bytes) -> TaskImage:
    u = Unpacker(data)
    pid, ppid = u.u32(), u.u32()
    threads = [u.u32() for _ in range(u.u32())]
    workload = tuple(u.u64() for _ in range(5))
    next_fd = u.u32()
    fds = []
    for _ in range(u.u32()):
        fd, path, plugin, kind, leftover = u.u32(), u.string(), u.string(), u.string(), u.boolean()
        gpuid, ordinal = u.u32(), u.u32()
        fds.append(DeviceFileRecord(fd, path, plugin, kind, leftover, gpuid,
                                    ordinal - (1 << 32) if ordinal >= 1 << 31 else ordinal))
    vmas = []
    for _ in range(u.u32()):
        start, length = u.u64(), u.u64()
        name, off = (u.string(), u.u64()) if u.boolean() else (None, 0)
        vmas.append(VmaImage(start, length, name, off, u.optional_blob()))
    u.expect_end()
    return TaskImage(pid, ppid, threads, workload, next_fd, vmas, fds)


def encode_kfd_bundle(b: KfdCheckpointBundle) -> bytes:
    p = Packer().u32(b.pid).u32(b.event_page)
    p.u32(len(b.topology))
    for n in b.topology:
        p.u32(n.gpuid).string(n.props.instruction_set).u32(n.props.compute_units)
        p.u64(n.props.vram).boolean(n.props.host_vram_accessible).u32(n.location)
        p.string(n.render_node).u32(len(n.links))
        for g in sorted(n.links):
            p.u32(g)
    p.u32(len(b.bos))
    for bo in b.bos:
        p.u32(bo.handle).string(bo.kind.value).u64(bo.size).u64(bo.virtual_addr)
        p.u64(bo.mmap_offset).u32(bo.gpuid)
        p.optional_blob(bytes(bo.contents) if bo.contents is not None else None)
    p.u32(len(b.queues))
    for q in b.queues:
        p.u32(q.queue_id).string(q.kind.value).u32(q.gpuid).u32(q.ring_size)
        p.u32(q.doorbell_offset).u32(len(q.user_bos))
        for role, h in sorted(q.user_bos.items()):
            p.string(role).u32(h)
        p.u64(q.read_ptr).u64(q.write_ptr).u64(q.aql_ptr)
        p.blob(q.control_stack).blob(q.mqd).boolean(q.preempted)
    p.u32(len(b.events))
    for e in b.events:
        p.u32(e.event_id).boolean(e.signaled)
    return p.bytes()


def decode_kfd_bundle(data: bytes) -> KfdCheckpointBundle:
    u = Unpacker(data)
    pid, event_page = u.u32(), u.u32()
    topo = []
    for _ in range(u.u32()):
        gpuid = u.u32()
        props = DeviceProps(u.string(), u.u32(), u.u64(), u.boolean())
        location, render = u.u32(), u.string()
        links = frozenset(u.u32() for _ in range(u.u32()))
        topo.append(TopologyNode(gpuid, props, location, render, links))
    bos = []
    for _ in range(u.u32()):
        handle, kind = u.u32(), u.string()
        try:
            kind = BoKind(kind)
        except ValueError:
            raise Truncated(f"unknown BO kind {kind!r}") from None
        size, vaddr, off, gpuid = u.u64(), u.u64(), u.u64(), u.u32()
        contents = u.optional_blob()
        bos.append(BufferObject(handle, kind, size, vaddr, off, gpuid,
                                bytearray(contents) if contents is not None else None))
    queues = []
    for _ in range(u.u32()):
        qid, kind = u.u32(), u.string()
        try:
            kind = QueueKind(kind)
        except ValueError:
            raise Truncated(f"unknown queue kind {kind!r}") from None
        gpuid, ring, doorbell = u.u32(), u.u32(), u.u32()
        user_bos = {}
        for _ in range(u.u32()):
            role = u.string()
            user_bos[role] = u.u32()
        q = QueueState(qid, kind, gpuid, ring, doorbell, user_bos, u.u64(), u.u64(), u.u64(),
                       u.blob(), u.blob(), u.boolean())
        queues.append(q)
    events = [KfdEvent(u.u32(), u.boolean()) for _ in range(u.u32())]
    u.expect_end()
    return KfdCheckpointBundle(pid, bos, queues, events, topo, event_page)


_STATS_FLOATS = ("freezing_time", "frozen_time", "mem_dump_time", "mem_write_time",
                 "checkpoint_total", "restore_total")
_STATS_INTS = ("pages_scanned", "gpu_bytes", "cpu_bytes")


def encode_stats(s: CrStats) -> bytes:
    p = Packer().u16(STATS_VERSION)
    for f in _STATS_FLOATS:
        p.f64(getattr(s, f))
    for f in _STATS_INTS:
        p.u64(getattr(s, f))
    return p.bytes()


def decode_stats(data: bytes) -> CrStats:
    u = Unpacker(data)
    if u.u16() != STATS_VERSION:
        raise VersionUnsupported("unsupported stats schema version")
    s = CrStats(**{f: u.f64() for f in _STATS_FLOATS}, **{f: u.u64() for f in _STATS_INTS})
    u.expect_end()
    return s


# -- image sets --------------------------------------------------------------------

def encode_data_files(snap: Snapshot) -> dict[str, bytes]:
    """Process-state files (pages, device images) and extras, wrapped."""
    files = {}
    for t in snap.tasks:
        files[f"pages-{t.pid}"] = wrap(FileKind.PAGES, encode_task(t))
    for pid, blob in sorted(snap.cuda.items()):
        files[f"cuda-{pid}"] = wrap(FileKind.CUDA, blob)
    for pid, bundle in sorted(snap.kfd.items()):
        files[f"kfd-{pid}"] = wrap(FileKind.KFD, encode_kfd_bundle(bundle))
    for name, data in sorted(snap.extras.items()):
        if not _EXTRA_NAME.match(name) or _RESERVED.match(name):
            raise IoError(f"invalid extra image name {name!r}")
        files[name] = wrap(FileKind.EXTRA, data)
    return files


def payload_accounting(files: dict[str, bytes]) -> tuple[int, int]:
    """(gpu_bytes, cpu_bytes) over process-state payloads."""
    gpu = cpu = 0
    for name, data in files.items():
        n = len(data) - HEADER_SIZE - 4
        if name.startswith(("cuda-", "kfd-")):
            gpu += n
        elif name.startswith("pages-"):
            cpu += n
    return gpu, cpu


def write_image_set(snap: Snapshot, path, format_version: int = FORMAT_VERSION) -> Path:
    """Write ``snap`` to directory ``path`` atomically; return the path."""
    path = Path(path)
    if path.exists():
        raise IoError(f"{path} already exists")
    files = encode_data_files(snap)
    inv = snap.inventory
    inv.process_count = len(snap.tasks)
    inv.has_gpu_state = bool(snap.cuda or snap.kfd)
    files["stats"] = wrap(FileKind.STATS, encode_stats(snap.stats))
    inv.files = {name: zlib.crc32(data[:-4]) for name, data in files.items()}
    inv.format_version = format_version
    files["inventory"] = wrap(FileKind.INVENTORY, encode_inventory(inv), format_version)

    tmp = path.parent / f".{path.name}.tmp-{uuid.uuid4().hex[:8]}"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.mkdir()
        for name, data in files.items():
            with open(tmp / name, "wb") as f:
                f.write(data)
        os.rename(tmp, path)
    except OSError as e:
        shutil.rmtree(tmp, ignore_errors=True)
        raise IoError(f"writing {path}: {e}") from e
    return path


def _read(path: Path, name: str) -> bytes:
    try:
        return (path / name).read_bytes()
    except FileNotFoundError:
        raise MissingFile(name) from None
    except OSError as e:
        raise IoError(f"reading {path / name}: {e}") from e


def read_image_set(path) -> Snapshot:
    path = Path(path)
    if not path.is_dir():
        raise MissingFile(str(path))
    version, payload = unwrap("inventory", _read(path, "inventory"), FileKind.INVENTORY)
    if version > FORMAT_VERSION:
        raise VersionUnsupported(f"image format {version} is newer than {FORMAT_VERSION}")
    try:
        inv = decode_inventory(payload)
    except Truncated as e:
        raise ImageCorrupt(f"inventory: {e}") from None
    if inv.format_version != version:
        raise ImageCorrupt("inventory: version fields disagree")

    snap = Snapshot(inv, [])
    kinds = {"pages": FileKind.PAGES, "cuda": FileKind.CUDA, "kfd": FileKind.KFD}
    for name in sorted(inv.files):
        data = _read(path, name)
        prefix = name.split("-", 1)[0]
        if name == "stats":
            kind = FileKind.STATS
        elif prefix in kinds and _RESERVED.match(name):
            kind = kinds[prefix]
        else:
            kind = FileKind.EXTRA
        fversion, payload = unwrap(name, data, kind)
        if zlib.crc32(data[:-4]) != inv.files[name]:
            raise ChecksumMismatch(name)
        if fversion > FORMAT_VERSION:
            raise VersionUnsupported(f"{name}: format {fversion}")
        try:
            if kind is FileKind.STATS:
                snap.stats = decode_stats(payload)
            elif kind is FileKind.PAGES:
                snap.tasks.append(decode_task(payload))
            elif kind is FileKind.CUDA:
                snap.cuda[int(name[5:])] = payload
            elif kind is FileKind.KFD:
                snap.kfd[int(name[4:])] = decode_kfd_bundle(payload)
            else:
                snap.extras[name] = payload
        except Truncated as e:
            raise ImageCorrupt(f"{name}: {e}") from None
    if "stats" not in inv.files:
        raise MissingFile("stats")
    snap.tasks.sort(key=lambda t: t.pid)
    if len(snap.tasks) != inv.process_count:
        raise ImageCorrupt("inventory process count disagrees with pages files")
    if inv.has_gpu_state != bool(snap.cuda or snap.kfd):
        raise ImageCorrupt("inventory GPU flag disagrees with device images")
    return snap


def compute_breakdown(snap_or_stats) -> Breakdown:
    """Share of the image taken by device state vs. CPU state."""
    s = snap_or_stats.stats if isinstance(snap_or_stats, Snapshot) else snap_or_stats
    total = s.gpu_bytes + s.cpu_bytes
    if total == 0:
        return Breakdown(0.0, 0.0)
    gpu = s.gpu_bytes / total
    return Breakdown(gpu, 1.0 - gpu)


def stats_dict(s: CrStats) -> dict:
    d = asdict(s)
    d["stats_version"] = STATS_VERSION
    return d


def format_stats(s: CrStats, fmt: str = "text") -> str:
    if fmt == "json":
        return json.dumps(stats_dict(s), indent=2, sort_keys=True)
    rows = []
    for f in fields(CrStats):
        v = getattr(s, f.name)
        rows.append(f"{f.name}\t{v:.6f}" if isinstance(v, float) else f"{f.name}\t{v}")
    return "metric\tvalue\n" + "\n".join(rows)
