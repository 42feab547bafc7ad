"""Links with packet faults, the end-to-end token channel, neighbor failure
detection, the canonical wire encoding, and in-band hop-by-hop routing.

The end-to-end channel is a stop-and-wait/alternating-bit protocol engineered
for a hostile start: whatever junk a transient fault leaves in the channel
state, within three completed exchanges exactly one token (the in-flight act
or its ack) remains, and at most three payloads are ever acknowledged without
a genuine round-trip.
"""

from __future__ import annotations

import random
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from .dataplane import (AddMngr, DelAllRules, DelMngr, NewRound, Query,
                        QueryReply, Rule, Tag, UpdateRules, select_forwarding)

QUEUE_LIMIT = 4  # outbound payloads per channel; older batches are superseded


# ---------------------------------------------------------------------------
# Raw links.

@dataclass
class FaultPlan:
    """Seeded per-edge packet fault program.

    ``omit_first`` drops that many transmissions outright; ``omit_prob`` then
    drops randomly but never more than ``max_omits`` in total, so a packet
    retransmitted forever is eventually delivered (communication fairness).
    """

    omit_first: int = 0
    omit_prob: float = 0.0
    dup_prob: float = 0.0
    delay_prob: float = 0.0
    max_omits: Optional[int] = None
    seed: int = 0
    attempts: int = field(default=0, init=False)
    omitted: int = field(default=0, init=False)

    def __post_init__(self):
        self._rng = random.Random(f"faultplan:{self.seed}")


def link_transmit(packet, operational: bool = True,
                  plan: Optional[FaultPlan] = None) -> List[Tuple[object, int]]:
    """Deliveries produced by pushing one packet onto a link: a list of
    (packet, extra_delay) events.  A non-operational link loses the packet
    silently."""
    if not operational:
        return []
    if plan is None:
        return [(packet, 0)]
    plan.attempts += 1
    can_omit = plan.max_omits is None or plan.omitted < plan.max_omits
    if can_omit and plan.attempts <= plan.omit_first:
        plan.omitted += 1
        return []
    if can_omit and plan.omit_prob and plan._rng.random() < plan.omit_prob:
        plan.omitted += 1
        return []
    deliveries = [(packet, 0)]
    if plan.delay_prob and plan._rng.random() < plan.delay_prob:
        deliveries = [(packet, 3)]
    if plan.dup_prob and plan._rng.random() < plan.dup_prob:
        deliveries.append((packet, 1))
    return deliveries


# ---------------------------------------------------------------------------
# End-to-end token channel (one logical channel per initiator/responder pair).

@dataclass
class ChannelState:
    """Sender and receiver halves of one stop-and-wait channel.

    The sender side lives at ``initiator`` (always a controller), the
    receiver side at ``responder``.  ``queue`` holds (payload_id, payload)
    with the head in flight; on overflow the oldest entry is dropped, which
    lets fresh command batches displace ones wedged behind a dead route.
    """

    initiator: int
    responder: int
    bit: int = 0
    queue: deque = field(default_factory=deque)
    recv_bit: int = 1
    recv_reply: Optional[Tuple[int, bytes]] = None
    false_acks: int = 0
    overflow_drops: int = 0

    def send(self, payload_id: int, payload: bytes) -> Optional[int]:
        """Queue a payload; returns the payload id displaced on overflow."""
        dropped = None
        if len(self.queue) >= QUEUE_LIMIT:
            dropped = self.queue.popleft()[0]
            self.overflow_drops += 1
        self.queue.append((payload_id, payload))
        return dropped

    def head(self) -> Optional[Tuple[int, int, bytes]]:
        if not self.queue:
            return None
        pid, payload = self.queue[0]
        return (self.bit, pid, payload)

    # receiver side -------------------------------------------------------
    def act_is_new(self, bit: int) -> bool:
        return bit != self.recv_bit

    def commit_act(self, bit: int, payload_id: int, reply: bytes) -> None:
        self.recv_bit = bit
        self.recv_reply = (payload_id, reply)

    def ack_message(self) -> Tuple[int, int, bytes]:
        pid, reply = self.recv_reply if self.recv_reply else (0, b"")
        return (self.recv_bit, pid, reply)

    # sender side ---------------------------------------------------------
    def accept_ack(self, bit: int, payload_id: int):
        """Returns ('acked', completed_payload_id, genuine) or ('stale',)."""
        if not self.queue or bit != self.bit:
            return ('stale', None, False)
        pid, _ = self.queue.popleft()
        genuine = payload_id == pid
        if not genuine:
            self.false_acks += 1
        self.bit ^= 1
        return ('acked', pid, genuine)


class LoopbackHarness:
    """Drives one channel over explicit wire queues, no network in between.

    Used to exercise the channel contract in isolation: fuzz the state, then
    cycle until the single-token invariant holds.  A cycle delivers all act
    packets, then all acks, then lets the sender retransmit its head.
    """

    def __init__(self, seed: int = 0, plan: Optional[FaultPlan] = None):
        self.chan = ChannelState(1, 2)
        self.wire_fwd: deque = deque()   # (bit, pid, payload)
        self.wire_back: deque = deque()  # (bit, pid, reply)
        self.plan = plan
        self.delivered: List[bytes] = []
        self.acked: List[int] = []
        self._rng = random.Random(f"harness:{seed}")

    def fuzz(self, seed: int) -> None:
        rng = random.Random(f"chanfuzz:{seed}")
        c = self.chan
        c.bit = rng.randrange(2)
        c.recv_bit = rng.randrange(2)
        c.queue.clear()
        for k in range(rng.randrange(QUEUE_LIMIT + 1)):
            c.queue.append((9000 + k, b"junk%d" % k))
        if rng.random() < 0.5:
            c.recv_reply = (9100, b"stale-reply")
        else:
            c.recv_reply = None
        self.wire_fwd.clear()
        self.wire_back.clear()
        for k in range(rng.randrange(3)):
            self.wire_fwd.append((rng.randrange(2), 9200 + k, b"wire-act"))
        for k in range(rng.randrange(3)):
            self.wire_back.append((rng.randrange(2), 9300 + k, b"wire-ack"))

    def send(self, pid: int, payload: bytes):
        return self.chan.send(pid, payload)

    def token_count(self) -> int:
        return len(set(self.wire_fwd)) + len(set(self.wire_back))

    def single_token(self) -> bool:
        distinct = self.token_count()
        both = bool(self.wire_fwd) and bool(self.wire_back)
        return distinct <= 1 and not both

    def cycle(self) -> int:
        """One drain-and-retransmit round; returns exchanges completed."""
        c = self.chan
        exchanges = 0
        for bit, pid, payload in list(self.wire_fwd):
            self.wire_fwd.popleft()
            if c.act_is_new(bit):
                self.delivered.append(payload)
                c.commit_act(bit, pid, b"reply:%d" % pid)
            self.wire_back.append(c.ack_message())
        for bit, pid, reply in list(self.wire_back):
            self.wire_back.popleft()
            outcome, done_pid, _ = c.accept_ack(bit, pid)
            if outcome == 'acked':
                self.acked.append(done_pid)
                exchanges += 1
        head = c.head()
        if head is not None:
            for pkt, _delay in link_transmit(head, True, self.plan):
                self.wire_fwd.append(pkt)
        return exchanges


# ---------------------------------------------------------------------------
# Theta failure detector: strictly local neighbor liveness.

@dataclass
class DetectorState:
    node: int
    theta: int
    neighbors: List[int]
    silence: Dict[int, int] = field(default_factory=dict)
    failed: set = field(default_factory=set)

    def reported(self) -> List[int]:
        return [u for u in self.neighbors if u not in self.failed]


def detector_step(d: DetectorState, responsive) -> List[Tuple[str, int]]:
    """One poll round: neighbors in ``responsive`` completed a round-trip.
    A silent neighbor is flagged only after theta polls in which some other
    neighbor kept completing round-trips; any fresh round-trip recovers it."""
    responsive = set(responsive) & set(d.neighbors)
    changes = []
    for u in sorted(d.neighbors):
        if u in responsive:
            d.silence[u] = 0
            if u in d.failed:
                d.failed.discard(u)
                changes.append(('up', u))
        elif responsive - {u}:
            d.silence[u] = d.silence.get(u, 0) + 1
            if d.silence[u] >= d.theta and u not in d.failed:
                d.failed.add(u)
                changes.append(('down', u))
    return changes


# ---------------------------------------------------------------------------
# Wire encoding: one canonical self-delimiting binary layout, so corruption
# injection is well defined and malformed data is detected on decode.

class WireError(ValueError):
    pass


_TAG = struct.Struct('!IQ')
_RULE = struct.Struct('!IIIIHIIQQ')
_U8 = struct.Struct('!B')
_U16 = struct.Struct('!H')
_U32 = struct.Struct('!I')

_CMD_CODES = {NewRound: 1, DelMngr: 2, AddMngr: 3, DelAllRules: 4,
              UpdateRules: 5, Query: 6}


def _opt(v: Optional[int]) -> int:
    return 0 if v is None else v


def _unopt(v: int) -> Optional[int]:
    return None if v == 0 else v


def _pack_rule(r: Rule) -> bytes:
    return _RULE.pack(r.creator, r.switch, _opt(r.src), _opt(r.dest),
                      r.priority, _opt(r.fwd), r.tag.owner, r.tag.epoch,
                      r.stamp)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, s: struct.Struct):
        end = self.pos + s.size
        if end > len(self.data):
            raise WireError("truncated record")
        vals = s.unpack_from(self.data, self.pos)
        self.pos = end
        return vals

    def done(self) -> None:
        if self.pos != len(self.data):
            raise WireError("trailing bytes")


def _read_rule(rd: _Reader) -> Rule:
    creator, switch, src, dest, prt, fwd, owner, epoch, stamp = rd.take(_RULE)
    return Rule(creator, switch, _unopt(src), _unopt(dest), prt, _unopt(fwd),
                Tag(owner, epoch), stamp)


def encode_batch(frm: int, batch) -> bytes:
    out = [_U8.pack(1), _U32.pack(frm), _U16.pack(len(batch))]
    for cmd in batch:
        out.append(_U8.pack(_CMD_CODES[type(cmd)]))
        if isinstance(cmd, (NewRound, Query)):
            out.append(_TAG.pack(cmd.tag.owner, cmd.tag.epoch))
        elif isinstance(cmd, (DelMngr, AddMngr, DelAllRules)):
            out.append(_U32.pack(cmd.controller))
        else:
            rules = sorted(cmd.rules, key=lambda r: r.key())
            out.append(_U16.pack(len(rules)))
            out.extend(_pack_rule(r) for r in rules)
            out.append(_U8.pack(len(cmd.keep_tags)))
            out.extend(_TAG.pack(t.owner, t.epoch) for t in cmd.keep_tags)
    return b"".join(out)


def decode_batch(data: bytes) -> Tuple[int, list]:
    rd = _Reader(data)
    (kind,) = rd.take(_U8)
    if kind != 1:
        raise WireError("not a batch")
    (frm,) = rd.take(_U32)
    (ncmds,) = rd.take(_U16)
    batch = []
    for _ in range(ncmds):
        (code,) = rd.take(_U8)
        if code in (1, 6):
            owner, epoch = rd.take(_TAG)
            cls = NewRound if code == 1 else Query
            batch.append(cls(Tag(owner, epoch)))
        elif code in (2, 3, 4):
            (k,) = rd.take(_U32)
            cls = {2: DelMngr, 3: AddMngr, 4: DelAllRules}[code]
            batch.append(cls(k))
        elif code == 5:
            (n,) = rd.take(_U16)
            rules = tuple(_read_rule(rd) for _ in range(n))
            (nk,) = rd.take(_U8)
            keep = tuple(Tag(*rd.take(_TAG)) for _ in range(nk))
            batch.append(UpdateRules(rules, keep))
        else:
            raise WireError(f"unknown command code {code}")
    rd.done()
    return frm, batch


def encode_reply(m: QueryReply) -> bytes:
    out = [_U8.pack(2), _U32.pack(m.id)]
    neigh = sorted(m.neighbors)
    out.append(_U16.pack(len(neigh)))
    out.extend(_U32.pack(v) for v in neigh)
    if m.managers is None:
        out.append(_U8.pack(0))
    else:
        out.append(_U8.pack(1))
        mg = sorted(m.managers)
        out.append(_U16.pack(len(mg)))
        out.extend(_U32.pack(v) for v in mg)
    rules = sorted(m.rules, key=lambda r: r.key())
    out.append(_U16.pack(len(rules)))
    out.extend(_pack_rule(r) for r in rules)
    return b"".join(out)


def decode_reply(data: bytes) -> QueryReply:
    rd = _Reader(data)
    (kind,) = rd.take(_U8)
    if kind != 2:
        raise WireError("not a reply")
    (rid,) = rd.take(_U32)
    (nn,) = rd.take(_U16)
    neigh = frozenset(rd.take(_U32)[0] for _ in range(nn))
    (has_mg,) = rd.take(_U8)
    managers = None
    if has_mg == 1:
        (nm,) = rd.take(_U16)
        managers = frozenset(rd.take(_U32)[0] for _ in range(nm))
    elif has_mg != 0:
        raise WireError("bad manager marker")
    (nr,) = rd.take(_U16)
    rules = frozenset(_read_rule(rd) for _ in range(nr))
    rd.done()
    return QueryReply(rid, neigh, managers, rules)


# ---------------------------------------------------------------------------
# In-band routing.

@dataclass(frozen=True)
class Hop:
    node: int
    out: Optional[int]


@dataclass
class HopTrace:
    outcome: str                # 'delivered' | 'dropped' | 'loop' | 'dead'
    path: List[int]
    ambiguous: bool = False


def next_hop(ctx, node: int, src: int, dest: int, inport=None,
             at_origin: bool = False):
    """One forwarding decision.  ``ctx`` supplies rules_at(node),
    op_neighbors(node) and alive(node).  A node hands a packet it originates
    straight to an operational direct neighbor; transit forwarding is rules
    only."""
    if node == dest:
        return ('deliver', None, False)
    op = ctx.op_neighbors(node)
    if at_origin and dest in op:
        return ('port', dest, False)
    m = select_forwarding(ctx.rules_at(node), src, dest, op, inport)
    if m.rule is None:
        return ('drop', None, False)
    return ('port', m.rule.fwd, m.ambiguous)


def route_inband(ctx, src: int, dest: int) -> HopTrace:
    """Walk a packet from src to dest over the current rules and link status.
    Terminates at delivery, a drop, a dead node, or an exact routing loop
    (revisiting the same node/arrival-port state)."""
    cur, inport = src, None
    path = [src]
    visited = {(src, None)}
    ambiguous = False
    first = True
    cap = 4 * max(4, len(ctx.all_nodes()))
    for _ in range(cap):
        if not ctx.alive(cur):
            return HopTrace('dead', path, ambiguous)
        kind, port, amb = next_hop(ctx, cur, src, dest, inport, at_origin=first)
        ambiguous = ambiguous or amb
        first = False
        if kind == 'deliver':
            return HopTrace('delivered', path, ambiguous)
        if kind == 'drop':
            return HopTrace('dropped', path, ambiguous)
        if port not in ctx.op_neighbors(cur):
            return HopTrace('dropped', path, ambiguous)
        cur, inport = port, cur
        path.append(cur)
        state = (cur, inport)
        if state in visited:
            return HopTrace('loop', path, ambiguous)
        visited.add(state)
    return HopTrace('loop', path, ambiguous)
