"""Benchmark runs behind ``unicr bench``: driver-path checkpoint scaling and
proxy-path interception growth."""

from __future__ import annotations

import tempfile
from pathlib import Path

from .engine import CheckpointEngine, DumpOptions
from .intercept import TrainingWorkload, replay_log, run_intercepted
from .machine import MachineSpec
from .workload import ProcessTreeSpec, run_steps, spawn_tree

COLUMNS = ("mode", "gpus", "epochs", "intercepted_calls", "overhead", "driver_overhead",
           "gpu_bytes", "cpu_bytes", "pages_scanned", "freezing_time", "frozen_time",
           "checkpoint_total", "restore_total")


def replicated_machine(gpus: int, memory: int = 1 << 34) -> MachineSpec:
    return MachineSpec(name=f"gpu{gpus}", salt=f"gpu{gpus}",
                       cuda=[{"model": "A100", "memory": memory} for _ in range(gpus)])


def replicated_spec(gpus: int, model_bytes: int, host_bytes: int, seed: int = 0) -> ProcessTreeSpec:
    """One data-parallel worker per GPU, each holding a full model replica
    on its device and the same amount of host memory."""
    procs = []
    for g in range(gpus):
        procs.append({"pid": g + 1, "ppid": 0 if g == 0 else 1,
                      "vmas": [{"start": 0x400000, "length": host_bytes}],
                      "cuda": {"allocs": [{"device": g, "size": model_bytes}], "streams": 1}})
    return ProcessTreeSpec.from_dict({"seed": seed, "processes": procs})


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def driver_bench(gpus: int, epochs: int, model_bytes: int = 1 << 20,
                 host_bytes: int = 1 << 18, workdir=None) -> dict:
    """Run ``epochs`` workload steps, then checkpoint and restore."""
    spec = replicated_machine(gpus)
    m = spec.build()
    engine = CheckpointEngine()
    tree = spawn_tree(replicated_spec(gpus, model_bytes, host_bytes), m)
    run_steps(tree, epochs)
    with tempfile.TemporaryDirectory(dir=workdir) as d:
        path = Path(d) / "images"
        engine.dump(tree, path, DumpOptions())
        s = engine.last_stats
        engine.restore(path, spec.build())
        restore_total = engine.last_restore.restore_total
    return {"mode": "driver", "gpus": gpus, "epochs": epochs,
            "intercepted_calls": m.cuda.intercepted_calls, "overhead": 0.0,
            "driver_overhead": 0.0, "gpu_bytes": s.gpu_bytes, "cpu_bytes": s.cpu_bytes,
            "pages_scanned": s.pages_scanned, "freezing_time": s.freezing_time,
            "frozen_time": s.frozen_time, "checkpoint_total": s.checkpoint_total,
            "restore_total": restore_total}


def proxy_bench(gpus: int, epochs: int, model_bytes: int = 1 << 20) -> dict:
    """Run through the device proxy; restore is a replay of the call log."""
    w = TrainingWorkload(gpus=gpus, model_bytes=model_bytes, batch_bytes=min(256, model_bytes))
    r = run_intercepted(w, epochs)
    fresh = replicated_machine(gpus).build()
    t0 = fresh.clock.now
    replay_log(r.log, fresh)
    return {"mode": "proxy", "gpus": gpus, "epochs": epochs, "intercepted_calls": r.call_count,
            "overhead": r.total_overhead, "driver_overhead": 0.0, "gpu_bytes": "-",
            "cpu_bytes": "-", "pages_scanned": "-", "freezing_time": "-", "frozen_time": "-",
            "checkpoint_total": "-", "restore_total": fresh.clock.now - t0}


def format_table(rows: list[dict]) -> str:
    lines = ["\t".join(COLUMNS)]
    for r in rows:
        lines.append("\t".join(_fmt(r[c]) for c in COLUMNS))
    return "\n".join(lines)
