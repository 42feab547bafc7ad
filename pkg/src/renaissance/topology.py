"""Network graphs, deterministic shortest paths, and resilient-flow synthesis.

Node indices follow one convention everywhere: controllers occupy 1..n_c,
switches n_c+1..n_c+n_s.  Neighbor lists are kept sorted ascending so the
"first shortest path" (the lexicographically smallest node sequence among all
shortest paths) is well defined and every synthesized rule set is a pure
function of its inputs.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, Iterable, List, Optional, Set, Tuple

from .dataplane import Rule, Tag, select_forwarding


class TopologyError(ValueError):
    pass


def norm_edge(u: int, v: int) -> Tuple[int, int]:
    return (u, v) if u < v else (v, u)


@dataclass
class Graph:
    """Undirected communication topology with per-edge operational flags."""

    n_controllers: int
    n_switches: int
    adj: Dict[int, List[int]] = field(default_factory=dict)
    down: Set[Tuple[int, int]] = field(default_factory=set)

    @property
    def nodes(self) -> List[int]:
        return sorted(self.adj)

    def controllers(self) -> List[int]:
        return [i for i in range(1, self.n_controllers + 1) if i in self.adj]

    def switches(self) -> List[int]:
        return [v for v in self.nodes if v > self.n_controllers]

    def is_controller(self, v: int) -> bool:
        return 1 <= v <= self.n_controllers

    def neighbors(self, v: int) -> List[int]:
        return self.adj.get(v, [])

    def operational_neighbors(self, v: int) -> List[int]:
        return [u for u in self.adj.get(v, [])
                if norm_edge(u, v) not in self.down]

    def has_edge(self, u: int, v: int) -> bool:
        return v in self.adj.get(u, [])

    def edges(self) -> List[Tuple[int, int]]:
        return sorted({norm_edge(u, v) for u in self.adj for v in self.adj[u]})

    def operational_edges(self) -> List[Tuple[int, int]]:
        return [e for e in self.edges() if e not in self.down]

    def set_operational(self, u: int, v: int, up: bool) -> None:
        e = norm_edge(u, v)
        if up:
            self.down.discard(e)
        else:
            self.down.add(e)

    def add_edge(self, u: int, v: int) -> None:
        for a, b in ((u, v), (v, u)):
            lst = self.adj.setdefault(a, [])
            if b not in lst:
                lst.append(b)
                lst.sort()
        self.down.discard(norm_edge(u, v))

    def remove_edge(self, u: int, v: int) -> None:
        if v in self.adj.get(u, []):
            self.adj[u].remove(v)
        if u in self.adj.get(v, []):
            self.adj[v].remove(u)
        self.down.discard(norm_edge(u, v))

    def copy(self) -> "Graph":
        return Graph(self.n_controllers, self.n_switches,
                     {v: list(ns) for v, ns in self.adj.items()},
                     set(self.down))

    def diameter(self) -> int:
        best = 0
        for s in self.nodes:
            dist = bfs_distances(self, s)
            if len(dist) < len(self.nodes):
                return -1
            best = max(best, max(dist.values()))
        return best


def load_topology(text: str) -> Graph:
    """Parse a topology file: first line "<n_C> <n_S>", then one "<u>-<v>"
    edge per line; '#' starts a comment.  All edges start operational."""
    lines = text.splitlines()
    header = None
    g = None
    seen = set()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if header is None:
            parts = line.split()
            if len(parts) != 2:
                raise TopologyError(f"line {lineno}: expected '<n_C> <n_S>'")
            try:
                n_c, n_s = int(parts[0]), int(parts[1])
            except ValueError:
                raise TopologyError(f"line {lineno}: non-numeric header")
            if n_c < 0 or n_s < 0 or n_c + n_s == 0:
                raise TopologyError(f"line {lineno}: bad node counts")
            header = (n_c, n_s)
            g = Graph(n_c, n_s, {v: [] for v in range(1, n_c + n_s + 1)})
            continue
        if '-' not in line:
            raise TopologyError(f"line {lineno}: expected '<u>-<v>'")
        a, _, b = line.partition('-')
        try:
            u, v = int(a), int(b)
        except ValueError:
            raise TopologyError(f"line {lineno}: non-numeric endpoint")
        n = header[0] + header[1]
        if not (1 <= u <= n and 1 <= v <= n):
            raise TopologyError(f"line {lineno}: node index out of range")
        if u == v:
            raise TopologyError(f"line {lineno}: self loop")
        if norm_edge(u, v) in seen:
            raise TopologyError(f"line {lineno}: duplicate edge {u}-{v}")
        seen.add(norm_edge(u, v))
        g.add_edge(u, v)
    if g is None:
        raise TopologyError("empty topology file")
    return g


def dump_topology(g: Graph) -> str:
    lines = [f"{g.n_controllers} {g.n_switches}"]
    lines.extend(f"{u}-{v}" for u, v in g.edges())
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Shortest paths.  View objects only need .nodes and .succ(v) (sorted), so the
# same code serves the ground-truth graph and a controller's discovered view.

class DiView:
    """Directed adjacency view, as accumulated from query replies."""

    def __init__(self, succ: Dict[int, Tuple[int, ...]]):
        self._succ = succ

    @property
    def node_set(self) -> Set[int]:
        s = set(self._succ)
        for vs in self._succ.values():
            s.update(vs)
        return s

    def succ(self, v: int) -> Tuple[int, ...]:
        return self._succ.get(v, ())

    def edge_set(self) -> Set[Tuple[int, int]]:
        return {(u, v) for u in self._succ for v in self._succ[u]}

    def __eq__(self, other) -> bool:
        return (isinstance(other, DiView)
                and self.node_set == other.node_set
                and self.edge_set() == other.edge_set())


def graph_view(g: Graph) -> DiView:
    return DiView({v: tuple(g.neighbors(v)) for v in g.nodes})


def bfs_distances(g, source: int, blocked_edges=frozenset()) -> Dict[int, int]:
    succ = g.succ if isinstance(g, DiView) else g.neighbors
    dist = {source: 0}
    q = deque([source])
    while q:
        u = q.popleft()
        for v in succ(u):
            if (u, v) in blocked_edges or (v, u) in blocked_edges:
                continue
            if v not in dist:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


def _reverse_distances(g, target: int, blocked_edges) -> Dict[int, int]:
    # Distance *to* target.  For DiViews walk predecessor edges.
    if isinstance(g, DiView):
        pred: Dict[int, List[int]] = {}
        for u in sorted(g._succ):
            for v in g._succ[u]:
                pred.setdefault(v, []).append(u)
        dist = {target: 0}
        q = deque([target])
        while q:
            u = q.popleft()
            for v in sorted(pred.get(u, [])):
                if (v, u) in blocked_edges or (u, v) in blocked_edges:
                    continue
                if v not in dist:
                    dist[v] = dist[u] + 1
                    q.append(v)
        return dist
    return bfs_distances(g, target, blocked_edges)


def first_shortest_path(g, x: int, y: int,
                        blocked_edges=frozenset()) -> Optional[List[int]]:
    """Shortest path from x to y; ties broken toward the lexicographically
    smallest node-index sequence.  Returns None when unreachable."""
    if x == y:
        return [x]
    blocked = set()
    for a, b in blocked_edges:
        blocked.add((a, b))
        blocked.add((b, a))
    dist = _reverse_distances(g, y, blocked)
    if x not in dist:
        return None
    succ = g.succ if isinstance(g, DiView) else g.neighbors
    path = [x]
    cur = x
    while cur != y:
        nxt = None
        for v in succ(cur):
            if (cur, v) in blocked:
                continue
            if dist.get(v, -1) == dist[cur] - 1:
                nxt = v
                break
        if nxt is None:
            return None
        path.append(nxt)
        cur = nxt
    return path


def edge_connectivity(g: Graph) -> int:
    """Minimum number of edges whose removal disconnects g (0 if already
    disconnected), via unit-capacity max-flow from a fixed node to every
    other node."""
    nodes = g.nodes
    if len(nodes) <= 1:
        return 0
    if len(bfs_distances(g, nodes[0])) < len(nodes):
        return 0
    source = nodes[0]
    best = None
    for sink in nodes[1:]:
        f = _max_flow_unit(g, source, sink)
        best = f if best is None else min(best, f)
        if best == 0:
            return 0
    return best


def _max_flow_unit(g: Graph, s: int, t: int) -> int:
    # Edmonds-Karp on the doubled directed graph, capacity 1 per direction.
    cap: Dict[Tuple[int, int], int] = {}
    for u, v in g.edges():
        cap[(u, v)] = 1
        cap[(v, u)] = 1
    flow = 0
    while True:
        parent = {s: None}
        q = deque([s])
        while q and t not in parent:
            u = q.popleft()
            for v in g.neighbors(u):
                for w in (v,):
                    if w not in parent and cap.get((u, w), 0) > 0:
                        parent[w] = u
                        q.append(w)
        if t not in parent:
            return flow
        v = t
        while parent[v] is not None:
            u = parent[v]
            cap[(u, v)] -= 1
            cap[(v, u)] = cap.get((v, u), 0) + 1
            v = u
        flow += 1


# ---------------------------------------------------------------------------
# Flow synthesis.
#
# For one controller c the assignment covers, per reachable destination d:
#   * a primary route: the first shortest path c -> d, installed at priority
#     n_prt as (src=c, dest=d) hops (wildcard src at c's own node so the
#     controller can relay transit traffic);
#   * per primary edge, a detour: the first shortest path from the edge's
#     upstream endpoint to d avoiding that edge, claimed at descending
#     priorities below the primary;
#   * a return route toward c at every reachable node (wildcard source,
#     dest=c) following the lexicographic shortest-path tree toward c, plus
#     per-tree-edge detours, so replies survive the same failures.
# Where detours for different protected edges disagree at a shared node the
# later claim lands one priority level lower; the forwarding walk tries them
# in order.

DEFAULT_PRT_LEVELS = 3  # primary + two claim levels; floor for n_prt


def priority_levels(kappa: int) -> int:
    return max(kappa + 1, DEFAULT_PRT_LEVELS)


@dataclass
class FlowAssignment:
    """All rules one controller wants installed, keyed by hosting node.

    The controller's own node holds its first-hop table; it is consulted when
    the controller originates or relays packets but is never shipped to a
    switch.
    """

    controller: int
    rules: Dict[int, List[Rule]] = field(default_factory=dict)
    unprotected: List[Tuple[int, int, Tuple[int, int]]] = field(default_factory=list)

    def at(self, node: int) -> List[Rule]:
        return self.rules.get(node, [])


class _Claims:
    # per (node, dest) ordered distinct next-hops; index 0 = highest priority
    def __init__(self):
        self.slots: Dict[Tuple[int, int], List[int]] = {}

    def claim(self, node: int, dest: int, fwd: int, levels: int) -> None:
        lst = self.slots.setdefault((node, dest), [])
        if fwd not in lst and len(lst) < levels:
            lst.append(fwd)


def synthesize_assignment(view, controller: int, tag: Tag, kappa: int,
                          n_prt: Optional[int] = None) -> FlowAssignment:
    """Deterministic rule synthesis for every destination reachable from
    ``controller`` in ``view`` (a Graph or a DiView)."""
    if isinstance(view, Graph):
        view = graph_view(view)
    if n_prt is None:
        n_prt = priority_levels(kappa)
    asg = FlowAssignment(controller)
    claims = _Claims()
    reach = bfs_distances(view, controller)
    dests = sorted(d for d in reach if d != controller)

    primaries: Dict[int, List[int]] = {}
    for d in dests:
        path = first_shortest_path(view, controller, d)
        if path is None:
            continue
        primaries[d] = path
        for u, v in zip(path, path[1:]):
            claims.claim(u, d, v, n_prt)
        if kappa >= 1:
            _protect(view, path, d, claims, n_prt, asg)

    # Return routes: shortest-path tree toward the controller.  Prefix
    # consistency of lexicographic-min paths makes the parent unique per node.
    parent: Dict[int, int] = {}
    for d in dests:
        path = primaries.get(d)
        if not path:
            continue
        for u, v in zip(path, path[1:]):
            parent.setdefault(v, u)
    for v in sorted(parent):
        claims.claim(v, controller, parent[v], n_prt)
    if kappa >= 1:
        for v in sorted(parent):
            tree_path = _tree_path(parent, v, controller)
            if tree_path is None:
                continue
            _protect(view, tree_path, controller, claims, n_prt, asg,
                     toward=True)

    for (node, dest), fwds in sorted(claims.slots.items()):
        src = None if node == controller else controller
        for level, fwd in enumerate(fwds):
            prt = n_prt - level
            if prt < 1:
                break
            asg.rules.setdefault(node, []).append(
                Rule(controller, node, src, dest, prt, fwd, tag))
    for node in asg.rules:
        asg.rules[node].sort(key=lambda r: r.key())
    return asg


def _tree_path(parent: Dict[int, int], v: int, root: int) -> Optional[List[int]]:
    path = [v]
    seen = {v}
    while path[-1] != root:
        nxt = parent.get(path[-1])
        if nxt is None or nxt in seen:
            return None
        path.append(nxt)
        seen.add(nxt)
    return path


def _protect(view, path: List[int], dest: int, claims: "_Claims",
             n_prt: int, asg: FlowAssignment, toward: bool = False) -> None:
    # One detour per path edge: first shortest path from the upstream
    # endpoint to dest avoiding that edge.  Claims land at the upstream
    # endpoint and at detour nodes off the protected path.
    on_path = set(path)
    for u, v in zip(path, path[1:]):
        detour = first_shortest_path(view, u, dest, blocked_edges={(u, v)})
        if detour is None:
            asg.unprotected.append((asg.controller if not toward else u,
                                    dest, (u, v)))
            continue
        for a, b in zip(detour, detour[1:]):
            if a == u or a not in on_path:
                claims.claim(a, dest, b, n_prt)


def my_rules(view, controller: int, node: int, tag: Tag, kappa: int,
             n_prt: Optional[int] = None) -> Set[Rule]:
    """Rules ``controller`` must install at ``node`` so the aggregate encodes
    flows from the controller to every reachable destination.  Pure function
    of its inputs; empty when the node hosts no flow."""
    asg = synthesize_assignment(view, controller, tag, kappa, n_prt)
    return set(asg.at(node))


# ---------------------------------------------------------------------------
# Brute-force resilience oracle.

@dataclass
class PairOutcome:
    controller: int
    dest: int
    failed_edges: Tuple[Tuple[int, int], ...]
    outcome: str                 # 'delivered' | 'dropped' | 'loop' | 'skipped'
    path: List[int] = field(default_factory=list)


@dataclass
class ResilienceReport:
    kappa: int
    pairs_checked: int = 0
    failure_sets: int = 0
    failures: List[PairOutcome] = field(default_factory=list)
    ambiguities: List[Tuple[int, int, int]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures and not self.ambiguities


def replay_walk(tables: Dict[int, List[Rule]], g: Graph, src: int, dest: int,
                down_edges: Set[Tuple[int, int]],
                ambiguity_sink=None) -> PairOutcome:
    """Deterministic forwarding replay from src toward dest with the given
    edges down.  Loops are detected exactly: revisiting the same (node,
    arrival-port) state under fixed link status repeats forever."""
    down = {norm_edge(*e) for e in down_edges}
    cur, inport = src, None
    path = [src]
    visited = {(src, None)}
    cap = 4 * max(4, len(g.nodes))
    for _ in range(cap):
        if cur == dest:
            return PairOutcome(src, dest, tuple(sorted(down)), 'delivered', path)
        op = [u for u in g.neighbors(cur) if norm_edge(u, cur) not in down]
        m = select_forwarding(tables.get(cur, ()), src, dest, set(op), inport)
        if m.ambiguous and ambiguity_sink is not None:
            ambiguity_sink((cur, src, dest))
        if m.rule is None:
            return PairOutcome(src, dest, tuple(sorted(down)), 'dropped', path)
        cur, inport = m.rule.fwd, cur
        path.append(cur)
        state = (cur, inport)
        if state in visited:
            return PairOutcome(src, dest, tuple(sorted(down)), 'loop', path)
        visited.add(state)
    return PairOutcome(src, dest, tuple(sorted(down)), 'loop', path)


def merged_tables(assignments: Dict[int, FlowAssignment],
                  g: Graph) -> Dict[int, List[Rule]]:
    """Per-node rule tables: switches hold every controller's rules, a
    controller node holds only its own first-hop table."""
    tables: Dict[int, List[Rule]] = {}
    for c in sorted(assignments):
        for node, rules in sorted(assignments[c].rules.items()):
            if g.is_controller(node) and node != c:
                continue
            tables.setdefault(node, []).extend(rules)
    return tables


def verify_resilience(g: Graph, assignments: Dict[int, FlowAssignment],
                      kappa: int) -> ResilienceReport:
    """Enumerate every failure set of at most kappa edges and replay
    forwarding for every (controller, destination) pair.  Pairs disconnected
    by a failure set are skipped (no rule set can serve them)."""
    report = ResilienceReport(kappa)
    tables = merged_tables(assignments, g)
    sink = report.ambiguities.append
    edges = g.edges()
    fail_sets = [()]
    for k in range(1, kappa + 1):
        fail_sets.extend(combinations(edges, k))
    report.failure_sets = len(fail_sets)
    for fs in fail_sets:
        down = set(fs)
        for c in sorted(assignments):
            reach = bfs_distances(g, c, blocked_edges=down)
            for d in g.nodes:
                if d == c:
                    continue
                report.pairs_checked += 1
                if d not in reach:
                    continue
                out = replay_walk(tables, g, c, d, down, sink)
                if out.outcome != 'delivered':
                    report.failures.append(out)
    # distinct ambiguity witnesses only
    report.ambiguities = sorted(set(report.ambiguities))
    return report
