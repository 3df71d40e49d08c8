import json
from pathlib import Path

import pytest

from unicr.errors import SpecError
from unicr.scenario import Scenario, ScenarioRunner, VerifyFailed

SCEN = sorted(p.stem for p in (Path(__file__).parent.parent / "scenarios").glob("*.json"))


@pytest.mark.parametrize("name", SCEN)
def test_checked_in_scenarios_run(scenarios_dir, tmp_path, name):
    s = Scenario.load(scenarios_dir / f"{name}.json")
    r = ScenarioRunner(s, tmp_path)
    r.setup()
    log = r.run()
    assert log


def minimal(**over):
    d = {"machines": {"a": {}}, "trees": {"t": {"spec": {"processes": [{"pid": 1}]}}},
         "steps": [{"op": "run", "target": "t"}]}
    d.update(over)
    return d


@pytest.mark.parametrize("bad", [
    minimal(steps=[{"op": "explode", "target": "t"}]),
    minimal(steps=[{"op": "run", "target": "nope"}]),
    minimal(steps=[{"op": "restore", "images": "x", "machine": "a"}]),
    minimal(steps=[{"op": "dump", "target": "t"}, {"op": "restore", "images": "t", "machine": "b"}]),
    minimal(machines={}),
    minimal(version=2),
    minimal(trees={"t": {"machine": "zz", "spec": {"processes": [{"pid": 1}]}}}),
])
def test_invalid_scenarios(bad):
    with pytest.raises(SpecError):
        Scenario.from_dict(bad)


def test_load_reports_bad_json(tmp_path):
    p = tmp_path / "s.json"
    p.write_text("{nope")
    with pytest.raises(SpecError):
        Scenario.load(p)
    with pytest.raises(SpecError):
        Scenario.load(tmp_path / "missing.json")


def test_restored_names_become_targets():
    Scenario.from_dict(minimal(steps=[
        {"op": "dump", "target": "t", "images": "ck"},
        {"op": "restore", "images": "ck", "machine": "a", "as": "t2"},
        {"op": "run", "target": "t2"}]))


def test_expect_error_that_does_not_happen(tmp_path):
    s = Scenario.from_dict(minimal(steps=[{"op": "run", "target": "t", "expect_error": "LockTimeout"}]))
    r = ScenarioRunner(s, tmp_path)
    r.setup()
    with pytest.raises(VerifyFailed):
        r.run()


def test_verify_detects_divergence(tmp_path):
    s = Scenario.from_dict({"machines": {"a": {}},
                            "trees": {"t": {"spec": {"processes": [
                                {"pid": 1, "vmas": [{"start": 4096, "length": 64}]}]}}},
                            "steps": [{"op": "dump", "target": "t", "images": "ck"},
                                      {"op": "run", "target": "t"},
                                      {"op": "verify", "target": "t", "images": "ck"}]})
    r = ScenarioRunner(s, tmp_path)
    r.setup()
    with pytest.raises(VerifyFailed):
        r.run()


def test_overrides_apply_to_dump(tmp_path, scenarios_dir):
    s = Scenario.load(scenarios_dir / "cpu_only.json")
    r = ScenarioRunner(s, tmp_path)
    r.setup()
    r.run(s.steps[:2], overrides={"final_state": "running"})
    assert "svc" in r.trees and (tmp_path / "ck").is_dir()


def test_scenario_files_are_versioned(scenarios_dir):
    for p in scenarios_dir.glob("*.json"):
        assert json.loads(p.read_text())["version"] == 1
