"""Command-line front end: ``unicr dump|restore|stats|bench|run``."""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
from enum import IntEnum
from pathlib import Path

from . import errors as E
from .bench import driver_bench, format_table, proxy_bench
from .container import CONFIG_IMAGE, container_restore
from .engine import CheckpointEngine, RestoreOptions
from .images import compute_breakdown, format_stats, read_image_set, stats_dict
from .scenario import Scenario, ScenarioRunner, VerifyFailed, default_images_dir
from .workload import run_steps


class ExitCode(IntEnum):
    OK = 0
    ERROR = 1
    USAGE = 2
    SPEC = 3
    LOCK_TIMEOUT = 4
    TOPOLOGY = 5
    IMAGE_CORRUPT = 6
    VERSION = 7
    PLUGIN = 8
    IO = 9
    UNKNOWN_DEVICE = 10
    MISSING_LAYER = 11
    VERIFY = 12
    PERMISSION = 13


# most specific first
_EXIT_CODES = [
    (E.SpecError, ExitCode.SPEC),
    (E.LockTimeout, ExitCode.LOCK_TIMEOUT),
    (E.TimeoutExpired, ExitCode.LOCK_TIMEOUT),
    (E.TopologyMismatch, ExitCode.TOPOLOGY),
    (E.VersionUnsupported, ExitCode.VERSION),
    (E.ImageCorrupt, ExitCode.IMAGE_CORRUPT),
    (E.PluginError, ExitCode.PLUGIN),
    (E.IoError, ExitCode.IO),
    (E.UnknownDevice, ExitCode.UNKNOWN_DEVICE),
    (E.MissingLayer, ExitCode.MISSING_LAYER),
    (E.PermissionDenied, ExitCode.PERMISSION),
    (VerifyFailed, ExitCode.VERIFY),
]


def exit_code_for(exc: BaseException) -> ExitCode:
    for cls, code in _EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return ExitCode.ERROR


def _error_class(exc: BaseException) -> str:
    """The enumerated class an error reports as, e.g. ChecksumMismatch -> ImageCorrupt."""
    for cls, _ in _EXIT_CODES:
        if isinstance(exc, cls):
            return "LockTimeout" if cls is E.TimeoutExpired else cls.__name__
    return type(exc).__name__


def _images_dir(args) -> Path:
    d = args.images_dir or default_images_dir()
    if not d:
        raise E.SpecError("no image directory: pass --images-dir or set UNICR_IMAGES_DIR")
    return Path(d)


def _print_stats(stats, fmt: str, extra: dict | None = None) -> None:
    if fmt == "json":
        d = stats_dict(stats)
        d.update(extra or {})
        print(json.dumps(d, indent=2, sort_keys=True))
    else:
        print(format_stats(stats))
        for k, v in (extra or {}).items():
            print(f"{k}\t{v}")


def cmd_dump(args) -> int:
    scenario = Scenario.load(args.scenario)
    images = _images_dir(args)
    with tempfile.TemporaryDirectory() as scratch:
        runner = ScenarioRunner(scenario, scratch)
        runner.setup()
        steps = scenario.steps
        idx = next((i for i, s in enumerate(steps) if s["op"] in ("dump", "checkpoint")), None)
        if idx is None:
            target = args.tree or next(iter(runner.trees))
            dump_step = {"op": "checkpoint" if target in runner.containers else "dump",
                         "target": target}
            idx = len(steps)
        else:
            dump_step = dict(steps[idx])
            dump_step.pop("expect_error", None)
            if args.tree:
                dump_step["target"] = args.tree
        runner.run(steps[:idx])
        dump_step["path"] = str(images)
        if args.timeout is not None:
            dump_step["timeout"] = args.timeout
        if dump_step["op"] == "dump":
            if args.leave_running:
                dump_step["final_state"] = "running"
            elif args.leave_frozen:
                dump_step["final_state"] = "frozen"
            elif args.leave_stopped:
                dump_step["final_state"] = "stopped"
            else:
                dump_step.setdefault("final_state", "kill")
        runner.run([dump_step])
    snap = read_image_set(images)
    _print_stats(snap.stats, args.format,
                 {"has_gpu_state": str(snap.inventory.has_gpu_state).lower(),
                  "processes": snap.inventory.process_count,
                  "images_dir": str(images)})
    return ExitCode.OK


def _machine_arg(value: str):
    """``FILE`` or ``FILE:NAME``; FILE is a scenario or a bare machine spec."""
    path, _, name = value.partition(":")
    if not Path(path).exists() and ":" in value:
        path, name = value, ""
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise E.SpecError(f"cannot read machine file {path}: {e}") from None
    except ValueError as e:
        raise E.SpecError(f"{path}: invalid JSON ({e})") from None
    if "machines" in data:
        scenario = Scenario.from_dict(data, path)
        return scenario.machine_spec(name or None), scenario
    from .machine import MachineSpec
    return MachineSpec.from_dict(data, name or None), None


def cmd_restore(args) -> int:
    images = _images_dir(args)
    spec, scenario = _machine_arg(args.machine)
    machine = spec.build()
    engine = CheckpointEngine()
    snap = read_image_set(images)
    if CONFIG_IMAGE in snap.extras:
        runner = ScenarioRunner(scenario, images.parent) if scenario else None
        store = runner.layer_store if runner else {}
        c = container_restore(images, machine, store, engine, RestoreOptions())
        tree = c.tree
    else:
        tree = engine.restore(images, machine, RestoreOptions())
    if args.steps:
        run_steps(tree, args.steps)
    out = {"restore_total": engine.last_restore.restore_total, "machine": machine.name,
           "processes": len(tree), "has_gpu_state": str(snap.inventory.has_gpu_state).lower()}
    if args.format == "json":
        print(json.dumps(out, indent=2, sort_keys=True))
    else:
        print("metric\tvalue")
        for k, v in out.items():
            print(f"{k}\t{v:.6f}" if isinstance(v, float) else f"{k}\t{v}")
    return ExitCode.OK


def cmd_stats(args) -> int:
    snap = read_image_set(_images_dir(args))
    b = compute_breakdown(snap)
    _print_stats(snap.stats, args.format,
                 {"gpu_share": round(b.gpu_share, 6), "cpu_share": round(b.cpu_share, 6),
                  "has_gpu_state": str(snap.inventory.has_gpu_state).lower(),
                  "plugins": ",".join(snap.inventory.plugin_ids) or "-"})
    return ExitCode.OK


def _int_list(s: str) -> list[int]:
    try:
        out = [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}")
    if not out or any(x < 0 for x in out):
        raise argparse.ArgumentTypeError("need one or more non-negative integers")
    return out


def cmd_bench(args) -> int:
    rows = []
    for gpus in args.gpus:
        if gpus < 1:
            raise E.SpecError("--gpus values must be at least 1")
        for epochs in args.epochs:
            if args.mode == "driver":
                rows.append(driver_bench(gpus, epochs, args.model_bytes, args.host_bytes))
            else:
                rows.append(proxy_bench(gpus, epochs, args.model_bytes))
    print(format_table(rows))
    return ExitCode.OK


def cmd_run(args) -> int:
    scenario = Scenario.load(args.scenario)
    root = args.images_dir or default_images_dir()
    with tempfile.TemporaryDirectory() as scratch:
        runner = ScenarioRunner(scenario, Path(root) if root else scratch)
        runner.setup()
        try:
            runner.run()
        finally:
            for line in runner.log:
                print(line)
    print("scenario ok")
    return ExitCode.OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unicr", description="Unified CPU/GPU checkpoint/restore "
                                "over simulated hosts and GPU drivers.")
    sub = p.add_subparsers(dest="command", required=True)

    def images_opt(sp):
        sp.add_argument("--images-dir", help="image directory (default: $UNICR_IMAGES_DIR)")

    def format_opt(sp):
        sp.add_argument("--format", choices=("text", "json"), default="text")

    d = sub.add_parser("dump", help="build a scenario's process tree and checkpoint it")
    d.add_argument("scenario")
    images_opt(d)
    d.add_argument("--tree", help="tree or container to dump (default: the scenario's first)")
    d.add_argument("--timeout", type=float, help="device lock timeout in simulated seconds")
    g = d.add_mutually_exclusive_group()
    g.add_argument("--leave-running", action="store_true")
    g.add_argument("--leave-frozen", action="store_true")
    g.add_argument("--leave-stopped", action="store_true")
    format_opt(d)
    d.set_defaults(func=cmd_dump)

    r = sub.add_parser("restore", help="restore an image set onto a fresh simulated machine")
    images_opt(r)
    r.add_argument("--machine", required=True, help="machine or scenario JSON, optionally FILE:NAME")
    r.add_argument("--steps", type=int, default=0, help="workload steps to run after restore")
    format_opt(r)
    r.set_defaults(func=cmd_restore)

    s = sub.add_parser("stats", help="print the statistics record of an image set")
    images_opt(s)
    format_opt(s)
    s.set_defaults(func=cmd_stats)

    b = sub.add_parser("bench", help="driver-path vs proxy-path comparison table")
    b.add_argument("--mode", choices=("driver", "proxy"), default="driver")
    b.add_argument("--epochs", type=_int_list, default=[1])
    b.add_argument("--gpus", type=_int_list, default=[1])
    b.add_argument("--model-bytes", type=int, default=1 << 20)
    b.add_argument("--host-bytes", type=int, default=1 << 18)
    b.set_defaults(func=cmd_bench)

    u = sub.add_parser("run", help="execute every step of a scenario")
    u.add_argument("scenario")
    images_opt(u)
    u.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args))
    except E.CrError as e:
        code = exit_code_for(e)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        print(f"error_class={_error_class(e)} exit_code={int(code)}", file=sys.stderr)
        return int(code)


if __name__ == "__main__":
    sys.exit(main())
