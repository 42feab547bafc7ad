"""Deterministic discrete-event execution of the whole control plane.

One event mutates the world at a time: a controller iteration, a channel
retransmission, a packet hop, or a detector poll.  Scheduling is seeded
round-robin with jitter, so a (seed, scenario) pair reproduces its trace
bit for bit.  The engine also hosts the fault injector, the asynchronous
frame bookkeeping every recovery bound is stated in, and the omniscient
oracle that decides whether the global state is legitimate.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Set, Tuple

from . import controller as ctl
from .channels import (ChannelState, DetectorState, FaultPlan, WireError,
                       decode_batch, decode_reply, detector_step, encode_batch,
                       encode_reply, link_transmit, next_hop)
from .controller import ControllerState
from .dataplane import (Query, QueryReply, Rule, SwitchState, Tag, apply_batch)
from .topology import (Graph, bfs_distances, edge_connectivity, norm_edge,
                       priority_levels, replay_walk)

# Scheduling granularity (virtual time units).  The iterate period exceeds a
# typical query round-trip so rounds self-clock; retransmission fires earlier
# so lost packets recover within an iteration.
HOP_DELAY = 10
ITER_PERIOD = 400
RETRANS_PERIOD = 260
DETECT_PERIOD = 150
JITTER = 4

# Stabilization allowances of the channel and tag layers, used in every
# recovery bound.
DELTA_COMM = 3
DELTA_SYNCH = 2


def bootstrap_frame_bound(diameter: int) -> int:
    return (DELTA_COMM + DELTA_SYNCH + 2) * diameter + 1


def illegitimate_deletion_bound(diameter: int, n_switches: int) -> int:
    return ((DELTA_COMM + DELTA_SYNCH) * diameter + 1) * n_switches


def stabilization_frame_bound(diameter: int, n_controllers: int,
                              n_switches: int) -> int:
    return bootstrap_frame_bound(diameter) * (
        illegitimate_deletion_bound(diameter, n_switches) + n_controllers + 1)


def default_max_steps(g: Graph) -> int:
    d = max(1, g.diameter())
    bound = stabilization_frame_bound(d, g.n_controllers, g.n_switches)
    return min(1_000_000, 200 * bound * 40)


@dataclass(frozen=True)
class Packet:
    chan: Tuple[int, int]
    kind: str                   # 'act' | 'ack'
    bit: int
    pid: int
    payload: bytes
    src: int
    dest: int
    trace: tuple = ()
    hint: Optional[tuple] = None
    hops: int = 0

    def ident(self):
        return (self.chan, self.bit, self.pid)


@dataclass
class FaultSpec:
    """One scheduled fault.  ``when`` is 'step' (fires once step counter
    reaches ``step``) or 'legit' (fires at the first legitimate frame
    boundary)."""

    kind: str       # corrupt | fail_controller | remove_switch | remove_link
                    # | add_link | packet_plan
    when: str = 'step'
    step: int = 0
    args: dict = field(default_factory=dict)


@dataclass
class LegitReport:
    conditions: Dict[str, bool]
    witness: Optional[tuple] = None

    @property
    def ok(self) -> bool:
        return all(self.conditions.values())


@dataclass
class RunMetrics:
    scenario: str
    seed: int
    converged: bool = False
    frames_total: int = 0
    steps_total: int = 0
    first_legit_frame: Optional[int] = None
    frames_to_legit: Optional[int] = None
    steps_to_legit: Optional[int] = None
    last_fault_frame: int = 0
    c_resets: Dict[int, int] = field(default_factory=dict)
    illegit_deletions: int = 0
    messages: int = 0
    max_rules_per_switch: int = 0
    max_replydb: int = 0
    overflow_drops: int = 0
    false_acks: int = 0
    legit_history: List[Tuple[int, bool]] = field(default_factory=list)

    @property
    def c_resets_total(self) -> int:
        return sum(self.c_resets.values())

    @property
    def messages_per_frame(self) -> float:
        return self.messages / self.frames_total if self.frames_total else 0.0


class World:
    """Global simulation state plus the event queue driving it."""

    def __init__(self, graph: Graph, *, live_controllers=None, kappa: int = 1,
                 theta: int = 10, seed: int = 0, memory_adaptive: bool = True,
                 three_tags: bool = False, scenario: str = "scenario"):
        self.graph = graph
        self.kappa = kappa
        self.theta = theta
        self.seed = seed
        self.n_prt = priority_levels(kappa)
        n_c, n_s = graph.n_controllers, graph.n_switches
        self.max_replies = 2 * (n_c + n_s)
        self.max_rules = n_c * ((n_c + n_s - 1) * self.n_prt + 1)
        self.max_managers = n_c
        if live_controllers is None:
            live_controllers = list(range(1, n_c + 1))
        self.live_set = sorted(live_controllers)

        self.controllers: Dict[int, ControllerState] = {}
        self.ctrl_alive: Dict[int, bool] = {}
        for i in range(1, n_c + 1):
            self.ctrl_alive[i] = i in self.live_set
            if i in self.live_set:
                self.controllers[i] = ControllerState(
                    i, n_c, tuple(graph.neighbors(i)), self.max_replies,
                    kappa=kappa, n_prt=self.n_prt,
                    memory_adaptive=memory_adaptive, three_tags=three_tags)
        self.switches: Dict[int, SwitchState] = {}
        self.switch_alive: Dict[int, bool] = {}
        for v in graph.switches():
            self.switches[v] = SwitchState(v, tuple(graph.neighbors(v)),
                                           self.max_rules, self.max_managers)
            self.switch_alive[v] = True
        self.detectors: Dict[int, DetectorState] = {
            v: DetectorState(v, theta, list(graph.neighbors(v)))
            for v in graph.nodes}
        self.channels: Dict[Tuple[int, int], ChannelState] = {}
        self.fault_plans: Dict[Tuple[int, int], FaultPlan] = {}

        self.rng = random.Random(f"world:{seed}")
        self.events: list = []
        self.now = 0
        self.seq = 0
        self.step_count = 0
        self.trace: List[str] = []
        self.metrics = RunMetrics(scenario, seed)
        self.inflight: Dict[Tuple[int, int], Dict[tuple, int]] = {}

        # frame bookkeeping
        self.frame = 0
        self._iter_seq = 0
        self._min_iter_seq: Dict[int, int] = {i: 0 for i in self.live_set}
        self._iter_pending: Dict[Tuple[int, int], Set[int]] = {}
        self._pid_info: Dict[int, Tuple[int, int, int]] = {}
        self._frame_done: Set[int] = set()
        self._frame_boundary_hit = False
        self._pid_counter = 0
        self._topo_version = 0
        self._reach_cache: Dict[Tuple[int, int], Set[int]] = {}
        self.acked_pids: Set[int] = set()
        self._armed: Set[Tuple[int, int]] = set()

        for i in self.live_set:
            self.schedule(i * 7, 'iterate', i)
        for v in graph.nodes:
            self.schedule(v * 3 + 1, 'detect', v)

    # -- plumbing ---------------------------------------------------------

    def alive(self, v: int) -> bool:
        if self.graph.is_controller(v):
            return self.ctrl_alive.get(v, False)
        return self.switch_alive.get(v, False)

    def live_controllers(self) -> List[int]:
        return [i for i in sorted(self.controllers) if self.ctrl_alive[i]]

    def reported_view(self, v: int) -> List[int]:
        return self.detectors[v].reported()

    def rules_at(self, v: int):
        if self.graph.is_controller(v):
            cs = self.controllers.get(v)
            return cs.virtual_rules if cs is not None else ()
        sw = self.switches.get(v)
        return sw.rules.values() if sw is not None else ()

    def op_neighbors(self, v: int) -> Set[int]:
        return {u for u in self.graph.operational_neighbors(v)
                if self.alive(u)}

    def all_nodes(self):
        return self.graph.nodes

    def channel(self, i: int, j: int) -> ChannelState:
        key = (i, j)
        ch = self.channels.get(key)
        if ch is None:
            ch = ChannelState(i, j)
            self.channels[key] = ch
        return ch

    def schedule(self, delay: int, kind: str, *args) -> None:
        self.seq += 1
        t = self.now + delay + self.rng.randrange(JITTER + 1)
        heapq.heappush(self.events, (t, self.seq, kind, args))

    def log(self, kind: str, node: int, detail: str = "") -> None:
        self.trace.append(f"{self.step_count} {kind} {node} {detail}".rstrip())

    def new_pid(self) -> int:
        self._pid_counter += 1
        return self._pid_counter

    # -- event handlers ---------------------------------------------------

    def step(self) -> bool:
        """Pop and apply exactly one event; False when the queue is empty."""
        if not self.events:
            return False
        t, _, kind, args = heapq.heappop(self.events)
        self.now = t
        self.step_count += 1
        if kind == 'iterate':
            self._do_iterate(*args)
        elif kind == 'xmit':
            self._do_xmit(*args)
        elif kind == 'arrive':
            self._do_arrive(*args)
        elif kind == 'detect':
            self._do_detect(*args)
        return True

    def _do_iterate(self, i: int) -> None:
        if not self.ctrl_alive.get(i):
            return
        cs = self.controllers[i]
        cs.nc_view = tuple(self.reported_view(i))
        batches = ctl.iterate(cs)
        self._iter_seq += 1
        seq = self._iter_seq
        pending: Set[int] = set()
        self.log('iter', i, f"epoch={cs.curr_tag.epoch} sends={len(batches)}")
        for dest, batch in batches:
            payload = encode_batch(i, batch)
            pid = self.new_pid()
            ch = self.channel(i, dest)
            was_idle = not ch.queue
            dropped = ch.send(pid, payload)
            if dropped is not None:
                self.metrics.overflow_drops += 1
                self._resolve_pid(dropped)
                self.log('overflow', i, f"dest={dest} pid={dropped}")
            pending.add(pid)
            self._pid_info[pid] = (i, seq, dest)
            self.metrics.messages += 1
            self.log('send', i, f"dest={dest} pid={pid}")
            if was_idle or dropped is not None:
                self._emit_act(ch)
            if (i, dest) not in self._armed:
                self._armed.add((i, dest))
                self.schedule(RETRANS_PERIOD, 'xmit', i, dest)
        self._iter_pending[(i, seq)] = pending
        self.schedule(ITER_PERIOD, 'iterate', i)
        self.metrics.max_replydb = max(self.metrics.max_replydb,
                                       len(cs.reply_db))
        self._check_frame()

    def _do_xmit(self, i: int, j: int) -> None:
        ch = self.channels.get((i, j))
        if ch is None or not ch.queue or not self.ctrl_alive.get(i):
            self._armed.discard((i, j))
            return
        self._emit_act(ch)
        self.schedule(RETRANS_PERIOD, 'xmit', i, j)

    def _emit_act(self, ch: ChannelState) -> None:
        head = ch.head()
        if head is None:
            return
        bit, pid, payload = head
        pkt = Packet((ch.initiator, ch.responder), 'act', bit, pid, payload,
                     ch.initiator, ch.responder, trace=(ch.initiator,))
        self._emit(ch.initiator, pkt)

    def _emit(self, origin: int, pkt: Packet) -> None:
        if not self.alive(origin):
            return
        self._forward(origin, pkt, inport=None, at_origin=True)

    def _forward(self, node: int, pkt: Packet, inport, at_origin: bool) -> None:
        kind, port, amb = next_hop(self, node, pkt.src, pkt.dest, inport,
                                   at_origin)
        if amb:
            self.log('ambiguous', node, f"src={pkt.src} dest={pkt.dest}")
        if kind == 'drop' and pkt.hint:
            port = self._hint_next(pkt.hint, node)
            kind = 'port' if port is not None else 'drop'
        if kind != 'port':
            self.log('drop', node, f"src={pkt.src} dest={pkt.dest} kind={pkt.kind}")
            return
        if port not in self.op_neighbors(node):
            self.log('drop', node, f"src={pkt.src} dest={pkt.dest} deadlink={port}")
            return
        self._transmit(node, port, pkt)

    def _hint_next(self, hint: tuple, node: int) -> Optional[int]:
        # Reverse source route recorded by the request; used when a reply
        # has no applicable rules yet (query-by-neighbor bootstrapping).
        for idx, v in enumerate(hint):
            if v == node and idx + 1 < len(hint):
                return hint[idx + 1]
        return None

    def _transmit(self, u: int, w: int, pkt: Packet) -> None:
        cap = 4 * max(4, len(self.graph.nodes))
        if pkt.hops >= cap:
            self.log('ttl', u, f"src={pkt.src} dest={pkt.dest}")
            return
        edge = norm_edge(u, w)
        operational = edge not in self.graph.down and self.graph.has_edge(u, w)
        plan = self.fault_plans.get(edge)
        deliveries = link_transmit(pkt, operational, plan)
        if not deliveries:
            self.log('lost', u, f"edge={edge[0]}-{edge[1]} kind={pkt.kind}")
            return
        for p, extra in deliveries:
            moved = replace(p, hops=p.hops + 1)
            self._count_inflight(moved, +1)
            self.schedule(HOP_DELAY + extra, 'arrive', w, moved, u)

    def _count_inflight(self, pkt: Packet, delta: int) -> None:
        per = self.inflight.setdefault(pkt.chan, {})
        per[pkt.ident()] = per.get(pkt.ident(), 0) + delta
        if per[pkt.ident()] <= 0:
            del per[pkt.ident()]

    def _do_arrive(self, node: int, pkt: Packet, inport: int) -> None:
        self._count_inflight(pkt, -1)
        if not self.alive(node):
            self.log('lost', node, "dead-node")
            return
        pkt = replace(pkt, trace=pkt.trace + (node,))
        if node == pkt.dest:
            self._deliver(node, pkt)
            return
        self._forward(node, pkt, inport, at_origin=False)

    def _deliver(self, node: int, pkt: Packet) -> None:
        i, j = pkt.chan
        ch = self.channel(i, j)
        if pkt.kind == 'act':
            if ch.act_is_new(pkt.bit):
                reply = self._process_act(node, i, pkt.payload)
                if reply is None:
                    self.log('malformed', node, f"from={i}")
                    return
                ch.commit_act(pkt.bit, pkt.pid, reply)
            bit, rpid, rpayload = ch.ack_message()
            ack = Packet(pkt.chan, 'ack', bit, rpid, rpayload, node, i,
                         trace=(node,), hint=tuple(reversed(pkt.trace)))
            self.metrics.messages += 1
            self._emit(node, ack)
        else:
            outcome, done_pid, genuine = ch.accept_ack(pkt.bit, pkt.pid)
            if outcome != 'acked':
                return
            if not genuine:
                self.metrics.false_acks += 1
                self.log('false-ack', node, f"pid={pkt.pid}")
            self.log('ack', node, f"pid={done_pid}")
            self.acked_pids.add(done_pid)
            self._resolve_pid(done_pid)
            m = None
            try:
                m = decode_reply(pkt.payload)
            except WireError:
                pass
            if m is not None and self.ctrl_alive.get(node):
                cs = self.controllers[node]
                if ctl.on_reply(cs, m):
                    self.metrics.c_resets[node] = cs.c_resets
                    self.log('creset', node, "")
                self.metrics.max_replydb = max(self.metrics.max_replydb,
                                               len(cs.reply_db))
            if ch.queue:
                self._emit_act(ch)
            self._check_frame()

    def _process_act(self, node: int, frm: int, payload: bytes):
        try:
            sender, batch = decode_batch(payload)
        except WireError:
            return None
        if self.graph.is_controller(node):
            cs = self.controllers.get(node)
            if cs is None:
                return None
            query = batch[-1] if batch and isinstance(batch[-1], Query) else None
            if query is None:
                return None
            return encode_reply(ctl.on_query(cs, frm, query.tag))
        sw = self.switches[node]
        reply = apply_batch(sw, frm, batch,
                            reported_neighbors=self.reported_view(node),
                            deletion_hook=self._audit_deletion(frm))
        if reply is None:
            return None
        self.metrics.max_rules_per_switch = max(
            self.metrics.max_rules_per_switch,
            sum(1 for r in sw.rules.values() if not r.is_meta))
        return encode_reply(reply)

    def _audit_deletion(self, frm: int):
        def hook(kind: str, sender: int, target: int) -> None:
            if (target != sender and self.ctrl_alive.get(target)):
                self.metrics.illegit_deletions += 1
                self.log('illegit-del', sender, f"kind={kind} target={target}")
        return hook

    def _do_detect(self, v: int) -> None:
        if not self.alive(v):
            return
        det = self.detectors[v]
        responsive = {u for u in det.neighbors
                      if self.graph.has_edge(u, v)
                      and norm_edge(u, v) not in self.graph.down
                      and self.alive(u)}
        for direction, u in detector_step(det, responsive):
            self.log('detect', v, f"{direction} {u}")
        self.schedule(DETECT_PERIOD, 'detect', v)

    # -- frames -----------------------------------------------------------

    def _op_reach(self, i: int) -> Set[int]:
        key = (i, self._topo_version)
        hit = self._reach_cache.get(key)
        if hit is None:
            hit = self._alive_reachable(i)
            self._reach_cache = {key: hit}
        return hit

    def _alive_reachable(self, source: int) -> Set[int]:
        seen = {source}
        frontier = [source]
        while frontier:
            nxt = []
            for u in frontier:
                for w in self.op_neighbors(u):
                    if w not in seen:
                        seen.add(w)
                        nxt.append(w)
            frontier = nxt
        return seen

    def _resolve_pid(self, pid: int) -> None:
        info = self._pid_info.pop(pid, None)
        if info is None:
            return
        i, seq, _ = info
        pend = self._iter_pending.get((i, seq))
        if pend is not None:
            pend.discard(pid)

    def _controller_done(self, i: int) -> bool:
        for (ci, seq), pend in self._iter_pending.items():
            if ci != i or seq < self._min_iter_seq.get(i, 0):
                continue
            if not pend:
                return True
            reach = self._op_reach(i)
            live = set()
            for pid in pend:
                dest = self._pid_info.get(pid, (None, None, None))[2]
                if dest is not None and self.alive(dest) and dest in reach:
                    live.add(pid)
            if not live:
                return True
        return False

    def _check_frame(self) -> None:
        for i in self.live_controllers():
            if i not in self._frame_done and self._controller_done(i):
                self._frame_done.add(i)
        live = set(self.live_controllers())
        if live and live <= self._frame_done:
            self.frame += 1
            self.metrics.frames_total = self.frame
            self._frame_done = set()
            for i in live:
                self._min_iter_seq[i] = self._iter_seq + 1
            stale = [k for k, pend in self._iter_pending.items() if not pend]
            for k in stale:
                del self._iter_pending[k]
            self.log('frame', 0, f"index={self.frame}")
            self._frame_boundary_hit = True

    # -- fault injection --------------------------------------------------

    def inject(self, f: FaultSpec) -> None:
        self._topo_version += 1
        a = f.args
        if f.kind == 'corrupt':
            self._corrupt(int(a.get('seed', self.seed)),
                          a.get('scope', 'global'))
        elif f.kind == 'fail_controller':
            k = int(a['id'])
            self.ctrl_alive[k] = False
            for u in list(self.graph.neighbors(k)):
                self.graph.set_operational(k, u, False)
            self.log('fault', k, "fail_controller")
        elif f.kind == 'remove_switch':
            k = int(a['id'])
            self.switch_alive[k] = False
            for u in list(self.graph.neighbors(k)):
                self.graph.set_operational(k, u, False)
            self.log('fault', k, "remove_switch")
        elif f.kind == 'remove_link':
            u, v = int(a['u']), int(a['v'])
            self.graph.remove_edge(u, v)
            self.log('fault', 0, f"remove_link {u}-{v}")
        elif f.kind == 'add_link':
            u, v = int(a['u']), int(a['v'])
            self.graph.add_edge(u, v)
            for x, y in ((u, v), (v, u)):
                det = self.detectors[x]
                if y not in det.neighbors:
                    det.neighbors.append(y)
                    det.neighbors.sort()
                if x in self.switches:
                    self.switches[x].neighbors = tuple(self.graph.neighbors(x))
            self.log('fault', 0, f"add_link {u}-{v}")
        elif f.kind == 'packet_plan':
            u, v = int(a['u']), int(a['v'])
            plan = FaultPlan(omit_first=int(a.get('omit_first', 0)),
                             omit_prob=float(a.get('omit_prob', 0.0)),
                             dup_prob=float(a.get('dup_prob', 0.0)),
                             delay_prob=float(a.get('delay_prob', 0.0)),
                             max_omits=(int(a['max_omits'])
                                        if 'max_omits' in a else None),
                             seed=int(a.get('seed', self.seed)))
            self.fault_plans[norm_edge(u, v)] = plan
            self.log('fault', 0, f"packet_plan {u}-{v}")
        else:
            raise ValueError(f"unknown fault kind {f.kind!r}")
        self.metrics.last_fault_frame = self.frame

    def _corrupt(self, seed: int, scope: str) -> None:
        rng = random.Random(f"corrupt:{seed}")
        self.log('fault', 0, f"corrupt scope={scope} seed={seed}")
        declared = list(range(1, self.graph.n_controllers + 1))
        nodes = self.graph.nodes

        def rand_tag():
            return Tag(rng.choice(declared), rng.randrange(0, 5))

        def rand_rule(switch: int, neighbors):
            shape = rng.randrange(4)
            if shape == 0 and neighbors:
                return Rule(rng.choice(declared), switch, None, None, 0, None,
                            rand_tag())
            src = None if rng.random() < 0.5 else rng.choice(declared)
            dest = rng.choice(nodes)
            fwd = rng.choice(neighbors) if neighbors else None
            return Rule(rng.choice(declared), switch, src, dest,
                        rng.randrange(0, self.n_prt + 1), fwd, rand_tag())

        if scope in ('global', 'switches'):
            for v in sorted(self.switches):
                if not self.switch_alive[v]:
                    continue
                sw = self.switches[v]
                sw.rules.clear()
                sw.managers.clear()
                neigh = list(self.graph.neighbors(v))
                for _ in range(rng.randrange(0, 10)):
                    r = rand_rule(v, neigh)
                    sw.insert_rule(replace(r, stamp=sw.next_stamp()))
                for k in sorted(rng.sample(declared,
                                           rng.randrange(0, len(declared) + 1))):
                    sw.managers[k] = sw.next_stamp()
        if scope in ('global', 'controllers'):
            for i in self.live_controllers():
                cs = self.controllers[i]
                cs.epoch = rng.randrange(0, 5)
                cs.curr_tag = rand_tag()
                cs.prev_tag = rand_tag()
                cs.before_prev_tag = rand_tag()
                cs.reply_db = {}
                for _ in range(rng.randrange(0, 6)):
                    rid = rng.choice(nodes)
                    nbs = frozenset(rng.sample(nodes,
                                               rng.randrange(0, min(4, len(nodes)))))
                    if self.graph.is_controller(rid) and rng.random() < 0.5:
                        mg, rl = None, frozenset({Rule(i, rid, None, None, 0,
                                                       None, rand_tag())})
                    else:
                        mg = frozenset(rng.sample(declared,
                                                  rng.randrange(0, len(declared) + 1)))
                        rl = frozenset(rand_rule(rid, nodes)
                                       for _ in range(rng.randrange(0, 4)))
                    cs.reply_db[rid] = QueryReply(rid, nbs, mg, rl)
                cs.reply_db[i] = ctl.self_record(i, cs.nc_view)
                cs.virtual_rules = [rand_rule(i, list(self.graph.neighbors(i)))
                                    for _ in range(rng.randrange(0, 4))]
                cs._synth_cache.clear()
        if scope in ('global', 'channels'):
            for i in self.live_controllers():
                for j in nodes:
                    if j == i:
                        continue
                    ch = self.channel(i, j)
                    ch.bit = rng.randrange(2)
                    ch.recv_bit = rng.randrange(2)
                    ch.queue.clear()
                    for k in range(rng.randrange(0, 3)):
                        ch.queue.append((self.new_pid(),
                                         bytes([rng.randrange(256)
                                                for _ in range(8)])))
                    if rng.random() < 0.4:
                        ch.recv_reply = (self.new_pid(), b"\x01junk")
                    for _ in range(rng.randrange(0, 2)):
                        junk = Packet((i, j), rng.choice(['act', 'ack']),
                                      rng.randrange(2), self.new_pid(),
                                      bytes([rng.randrange(256)
                                             for _ in range(6)]),
                                      i, j, trace=(i,))
                        at = rng.choice(nodes)
                        self._count_inflight(junk, +1)
                        self.schedule(rng.randrange(1, 30), 'arrive', at, junk,
                                      rng.choice(self.graph.neighbors(at))
                                      if self.graph.neighbors(at) else at)
        if scope in ('global', 'detectors'):
            for v in sorted(self.detectors):
                det = self.detectors[v]
                det.silence = {u: rng.randrange(0, self.theta)
                               for u in det.neighbors}
                det.failed = set(rng.sample(det.neighbors, 1)) \
                    if det.neighbors and rng.random() < 0.3 else set()
        # measure disturbances from the corrupted state onward
        self.metrics.illegit_deletions = 0
        self.metrics.overflow_drops = 0
        self.metrics.false_acks = 0
        self.metrics.c_resets = {}
        for i in self.live_controllers():
            self.controllers[i].c_resets = 0
        for key in list(self._iter_pending):
            self._iter_pending[key] = set()
        self._pid_info.clear()

    # -- legitimacy oracle --------------------------------------------------

    def _alive_graph(self) -> Graph:
        g = Graph(self.graph.n_controllers, self.graph.n_switches)
        for v in self.graph.nodes:
            if self.alive(v):
                g.adj.setdefault(v, [])
        for u, v in self.graph.operational_edges():
            if self.alive(u) and self.alive(v):
                g.add_edge(u, v)
        return g

    def effective_kappa(self) -> int:
        lam = edge_connectivity(self._alive_graph())
        return max(0, min(self.kappa, lam - 1))

    def check_legitimacy(self) -> LegitReport:
        conds = {'views': True, 'managers': True, 'flows': True,
                 'channels': True}
        witness = None

        def fail(cond, w):
            nonlocal witness
            conds[cond] = False
            if witness is None:
                witness = (cond,) + w

        live = self.live_controllers()
        if not live:
            return LegitReport({k: False for k in conds}, ('views', 0, 0))

        # condition 1: every stored reply matches ground truth and reachability
        for i in live:
            cs = self.controllers[i]
            expected = self._alive_reachable(i)
            if set(cs.reply_db) != expected:
                fail('views', (i, tuple(sorted(set(cs.reply_db) ^ expected))))
                continue
            for k in sorted(expected):
                m = cs.reply_db[k]
                if set(m.neighbors) != set(self.reported_view(k)):
                    fail('views', (i, k))
                    break
                if k == i:
                    continue
                if k in self.switches:
                    sw = self.switches[k]
                    if set(m.managers or ()) != set(sw.managers):
                        fail('views', (i, k))
                        break
                    if _semantic(m.rules) != _semantic(sw.rules.values()):
                        fail('views', (i, k))
                        break
                elif m.managers is not None:
                    fail('views', (i, k))
                    break

        # condition 2: manager sets equal exactly the live controller set
        for v in sorted(self.switches):
            if not self.switch_alive[v]:
                continue
            if set(self.switches[v].managers) != set(live):
                fail('managers', (v, tuple(sorted(self.switches[v].managers))))

        # condition 3: installed rules survive every failure set of size <= kappa
        gg = self._alive_graph()
        tables = {v: list(self.switches[v].rules.values())
                  for v in self.switches if self.switch_alive[v]}
        for c in live:
            tables[c] = list(self.controllers[c].virtual_rules)
        kappa = self.effective_kappa()
        fail_sets: List[tuple] = [()]
        if kappa >= 1:
            from itertools import combinations
            for k in range(1, kappa + 1):
                fail_sets.extend(combinations(gg.edges(), k))
        for fs in fail_sets:
            down = set(fs)
            for c in live:
                reach = bfs_distances(gg, c, blocked_edges=down)
                for d in gg.nodes:
                    if d == c or d not in reach:
                        continue
                    out = replay_walk(tables, gg, c, d, down)
                    if out.outcome != 'delivered':
                        fail('flows', (c, d, fs, out.outcome))
                        break
                if not conds['flows']:
                    break
            if not conds['flows']:
                break

        # condition 4: single token per channel, switch meta tags current
        for (i, j), per in sorted(self.inflight.items()):
            if not self.ctrl_alive.get(i):
                continue
            if len(per) > 1:
                fail('channels', (i, j))
        for i in live:
            cs = self.controllers[i]
            for k in sorted(self.switches):
                if not self.switch_alive[k] or k not in self._alive_reachable(i):
                    continue
                meta = self.switches[k].meta_rule(i)
                if meta is None or meta.tag not in (cs.curr_tag, cs.prev_tag):
                    fail('channels', (i, k))
        return LegitReport(conds, witness)


def _semantic(rules):
    return {(r.creator, r.switch, r.src, r.dest, r.priority, r.fwd)
            for r in rules}


# ---------------------------------------------------------------------------

def frame_count(trace: List[str]) -> List[int]:
    """Recompute frame boundary step indices from a trace: the greedy minimal
    prefixes in which every controller that still iterates later completes an
    iteration whose batches all get acknowledged."""
    iters: List[Tuple[int, int, Set[int]]] = []   # (step, ctrl, pids)
    ack_step: Dict[int, int] = {}
    last_iter_step: Dict[int, int] = {}
    for line in trace:
        parts = line.split()
        step, kind = int(parts[0]), parts[1]
        node = int(parts[2]) if len(parts) > 2 else 0
        if kind == 'iter':
            iters.append((step, node, set()))
            last_iter_step[node] = step
        elif kind == 'send' and iters:
            pid = int(parts[3].split('=')[1].replace('pid=', '')) \
                if 'pid=' in line else None
            for tok in parts[3:]:
                if tok.startswith('pid='):
                    pid = int(tok[4:])
            if pid is not None:
                iters[-1][2].add(pid)
        elif kind == 'ack':
            for tok in parts[3:]:
                if tok.startswith('pid='):
                    ack_step[int(tok[4:])] = step
    completions: Dict[int, List[Tuple[int, int]]] = {}
    for step, ctrl, pids in iters:
        if any(p not in ack_step for p in pids):
            continue
        done = max([step] + [ack_step[p] for p in pids])
        completions.setdefault(ctrl, []).append((step, done))
    boundaries = []
    start = -1
    while True:
        ends = []
        for ctrl, spans in completions.items():
            if last_iter_step.get(ctrl, -1) <= start:
                continue  # controller stopped iterating (failed)
            candidates = [done for (s, done) in spans if s > start]
            if not candidates:
                ends = None
                break
            ends.append(min(candidates))
        if not ends:
            break
        boundary = max(ends)
        boundaries.append(boundary)
        start = boundary
    return boundaries


def run_scenario(graph: Graph, *, live_controllers=None, kappa: int = 1,
                 theta: int = 10, seed: int = 0, faults=(),
                 max_steps: Optional[int] = None, memory_adaptive: bool = True,
                 three_tags: bool = False, scenario: str = "scenario",
                 world_hook=None) -> Tuple[RunMetrics, List[str], World]:
    """Build a world, apply the fault schedule, and step until legitimacy
    holds across one full frame (or the step budget runs out)."""
    world = World(graph, live_controllers=live_controllers, kappa=kappa,
                  theta=theta, seed=seed, memory_adaptive=memory_adaptive,
                  three_tags=three_tags, scenario=scenario)
    if world_hook:
        world_hook(world)
    if max_steps is None:
        max_steps = default_max_steps(graph)
    pending_step = sorted([f for f in faults if f.when == 'step'],
                          key=lambda f: f.step)
    pending_legit = [f for f in faults if f.when == 'legit']
    stable = 0
    m = world.metrics
    while world.step_count < max_steps:
        while pending_step and world.step_count >= pending_step[0].step:
            world.inject(pending_step.pop(0))
            stable = 0
            m.first_legit_frame = None
        if not world.step():
            break
        if world._frame_boundary_hit:
            world._frame_boundary_hit = False
            report = world.check_legitimacy()
            m.legit_history.append((world.frame, report.ok))
            world.log('legit', 0,
                      f"frame={world.frame} ok={int(report.ok)} "
                      f"witness={report.witness}")
            if report.ok:
                if m.first_legit_frame is None:
                    m.first_legit_frame = world.frame
                    m.frames_to_legit = world.frame - m.last_fault_frame
                    m.steps_to_legit = world.step_count
                if pending_legit:
                    world.inject(pending_legit.pop(0))
                    stable = 0
                    m.first_legit_frame = None
                elif not pending_step:
                    stable += 1
                    if stable >= 2:
                        m.converged = True
                        break
            else:
                stable = 0
    m.steps_total = world.step_count
    m.frames_total = world.frame
    for i in world.live_controllers():
        m.c_resets[i] = world.controllers[i].c_resets
    return m, world.trace, world
