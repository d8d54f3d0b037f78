"""Byzantine fault tolerant workflow execution on a permissioned block chain."""

from .engine import EngineState, WorkflowOperation
from .model import WorkflowSpec, parse_spec
from .node import Node, NodeConfig
from .sim import SimCluster, run_scenario

__all__ = [
    "EngineState",
    "Node",
    "NodeConfig",
    "SimCluster",
    "WorkflowOperation",
    "WorkflowSpec",
    "parse_spec",
    "run_scenario",
]
