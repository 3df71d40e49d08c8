"""Unified CPU/GPU checkpoint/restore over simulated host and GPU drivers."""

from .engine import CheckpointEngine, DumpOptions, FinalState, HookId, RestoreOptions
from .machine import Machine, MachineSpec
from .workload import ProcessTreeSpec, run_steps, spawn_tree

__version__ = "0.1.0"
