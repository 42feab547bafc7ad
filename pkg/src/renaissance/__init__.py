"""Self-stabilizing in-band SDN control plane: abstract switches, autonomous
controllers, stabilizing channels, and a deterministic fault-injecting
simulator with a legitimacy oracle."""

__version__ = "0.1.0"

from .dataplane import Rule, SwitchState, Tag, QueryReply
from .topology import Graph, load_topology, edge_connectivity, \
    first_shortest_path, my_rules, verify_resilience
from .engine import FaultSpec, RunMetrics, World, run_scenario

__all__ = [
    "Rule", "SwitchState", "Tag", "QueryReply", "Graph", "load_topology",
    "edge_connectivity", "first_shortest_path", "my_rules",
    "verify_resilience", "FaultSpec", "RunMetrics", "World", "run_scenario",
]
