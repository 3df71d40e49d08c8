import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

REPO = Path(__file__).resolve().parent.parent
SCENARIOS = REPO / "scenarios"


@pytest.fixture
def scenarios_dir():
    return SCENARIOS


@pytest.fixture
def two_gpu_machine():
    from unicr.machine import MachineSpec
    return MachineSpec.from_dict({
        "name": "a", "salt": "a",
        "cuda": [{"model": "A100", "memory": 1 << 34}, {"model": "A100", "memory": 1 << 34}],
        "kfd": [{"isa": "gfx90a", "compute_units": 104, "vram": 1 << 36},
                {"isa": "gfx942", "compute_units": 304, "vram": 1 << 36}],
        "links": [[0, 1]]})


@pytest.fixture
def mixed_tree_spec():
    from unicr.workload import ProcessTreeSpec
    return ProcessTreeSpec.from_dict({"seed": 3, "processes": [
        {"pid": 1, "threads": 2, "vmas": [{"start": 0x10000, "length": 8192}],
         "cuda": {"allocs": [{"device": 0, "size": 4096}, {"device": 1, "size": 8192}],
                  "leftover": [0]}},
        {"pid": 2, "ppid": 1, "vmas": [{"start": 0x10000, "length": 4096}],
         "kfd": {"bos": [{"kind": "vram", "device": 0, "size": 4096},
                         {"kind": "userptr", "device": 1, "size": 4096},
                         {"kind": "mmio", "device": 0, "size": 4096}],
                 "queues": [{"device": 1}, {"kind": "dma", "device": 0}], "events": 2}},
        {"pid": 3, "ppid": 1, "vmas": [{"start": 0x20000, "length": 100}]}]})


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid:
                continue
            n = int(nodeid.split("test_criterion_")[1][:2])
            ok = rows.get(n, True) and outcome == "passed"
            rows[n] = ok
    if rows:
        terminalreporter.section("acceptance criteria")
        for n in sorted(rows):
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if rows[n] else 'FAIL'}")
