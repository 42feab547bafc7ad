"""Abstract switch model: bounded match-action storage and the command-batch interface.

A switch stores forwarding rules and a manager set, both capped and evicted
FIFO by per-switch freshness stamps.  Controllers drive a switch exclusively
through command batches (new-round marker, manager/rule edits, then a query),
and the switch answers a query with a full snapshot of its configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Union


class Tag(NamedTuple):
    """Synchronization round identifier; owner scopes epochs so tags of
    distinct controllers never collide."""

    owner: int
    epoch: int


@dataclass(frozen=True)
class Rule:
    """One match-action entry.

    ``src``/``dest``/``fwd`` use ``None`` as the wildcard/bottom marker.
    Meta-rules (the per-controller round markers) are exactly the rules with
    src = dest = fwd = None and priority 0; they never match packets.
    ``stamp`` is switch-local freshness bookkeeping and not part of rule
    identity.
    """

    creator: int
    switch: int
    src: Optional[int]
    dest: Optional[int]
    priority: int
    fwd: Optional[int]
    tag: Tag
    stamp: int = field(default=0, compare=False)

    @property
    def is_meta(self) -> bool:
        return self.src is None and self.dest is None and self.fwd is None

    def key(self):
        return (self.creator, self.switch, self.src, self.dest, self.priority,
                self.fwd, self.tag)


# Command batch vocabulary.  A well-formed batch is
# [NewRound, <edits...>, Query]; anything else is dropped by the switch.

@dataclass(frozen=True)
class NewRound:
    tag: Tag


@dataclass(frozen=True)
class DelMngr:
    controller: int


@dataclass(frozen=True)
class AddMngr:
    controller: int


@dataclass(frozen=True)
class DelAllRules:
    controller: int


@dataclass(frozen=True)
class UpdateRules:
    """Replace the sender's non-meta rules.

    ``keep_tags`` preserves the sender's rules carrying those tags instead of
    retiring them; the three-tag controller variant uses it to hold one extra
    round of rules on the switch.
    """

    rules: tuple
    keep_tags: tuple = ()


@dataclass(frozen=True)
class Query:
    tag: Tag


Command = Union[NewRound, DelMngr, AddMngr, DelAllRules, UpdateRules, Query]
Batch = list


@dataclass(frozen=True)
class QueryReply:
    """Configuration snapshot sent back to a querying controller.

    ``managers`` is None when the responder is a controller (controllers have
    no manager set); controller replies carry a single synthetic echo rule
    whose tag repeats the query tag.
    """

    id: int
    neighbors: frozenset
    managers: Optional[frozenset]
    rules: frozenset


def batch_well_formed(batch) -> bool:
    if not isinstance(batch, list) or len(batch) < 2:
        return False
    if not isinstance(batch[0], NewRound) or not isinstance(batch[-1], Query):
        return False
    return all(isinstance(c, (NewRound, DelMngr, AddMngr, DelAllRules,
                              UpdateRules, Query)) for c in batch)


@dataclass
class SwitchState:
    """Bounded rule table plus manager set of one abstract switch.

    ``rules`` is keyed by semantic rule identity so re-installing a rule only
    refreshes its stamp.  ``managers`` maps controller id to its freshness
    stamp.  Stamps are unique per switch and strictly increase.
    """

    id: int
    neighbors: tuple
    max_rules: int
    max_managers: int
    rules: dict = field(default_factory=dict)
    managers: dict = field(default_factory=dict)
    stamp_counter: int = 0

    def next_stamp(self) -> int:
        self.stamp_counter += 1
        return self.stamp_counter

    def rule_list(self):
        return list(self.rules.values())

    def meta_rule(self, controller: int) -> Optional[Rule]:
        for r in self.rules.values():
            if r.is_meta and r.creator == controller:
                return r
        return None

    def insert_rule(self, rule: Rule) -> None:
        self.rules[rule.key()] = rule

    def refresh(self, controller: int) -> None:
        # Any access by a controller re-stamps all of its items so FIFO
        # eviction prefers items of controllers that stopped refreshing.
        for k in sorted(self.rules):
            r = self.rules[k]
            if r.creator == controller:
                self.rules[k] = Rule(r.creator, r.switch, r.src, r.dest,
                                     r.priority, r.fwd, r.tag, self.next_stamp())
        if controller in self.managers:
            self.managers[controller] = self.next_stamp()


class Match(NamedTuple):
    rule: Optional[Rule]
    ambiguous: bool


def _candidates(rules: Iterable[Rule], src, dest, operational):
    out = []
    for r in rules:
        if r.is_meta or r.fwd is None:
            continue
        if r.src is not None and r.src != src:
            continue
        if r.dest is not None and r.dest != dest:
            continue
        if r.fwd in operational:
            out.append(r)
    return out


def _pick(cands) -> Match:
    if not cands:
        return Match(None, False)
    best_rank = max((r.priority, r.src is not None) for r in cands)
    winners = [r for r in cands if (r.priority, r.src is not None) == best_rank]
    winners.sort(key=lambda r: (r.creator, r.stamp))
    distinct = {w.key() for w in winners}
    return Match(winners[0], len(distinct) > 1)


def applicable_rule(state: SwitchState, src: int, dest: int,
                    operational) -> Match:
    """Highest-priority non-meta rule matching (src, dest) whose out-link is
    operational.  An exact source match outranks a wildcard source at equal
    priority; remaining ties are a corrupted-table diagnostic, broken by
    (creator, stamp)."""
    return _pick(_candidates(state.rules.values(), src, dest, operational))


def select_forwarding(rules: Iterable[Rule], src, dest, operational,
                      inport=None) -> Match:
    """Forwarding decision for a transit packet.

    Applicable rules that would send the packet back out its arrival port are
    deprioritized; bouncing back is the last resort.  That retreat step is
    what lets lower-priority detour rules route around a failed link even
    when the only remaining exit at a node is the way the packet came in
    (cycles have no other option).
    """
    cands = _candidates(rules, src, dest, operational)
    if inport is not None:
        preferred = [r for r in cands if r.fwd != inport]
        if preferred:
            return _pick(preferred)
    return _pick(cands)


@dataclass(frozen=True)
class Decision:
    kind: str           # 'deliver' | 'port' | 'drop'
    port: Optional[int] = None
    ambiguous: bool = False


def forward(state: SwitchState, src: int, dest: int, is_control: bool,
            operational, inport=None) -> Decision:
    """Route one packet at a switch: control traffic addressed here goes to
    the control module, everything else follows the rule table or drops."""
    if dest == state.id:
        if is_control:
            return Decision('deliver')
        return Decision('drop')
    m = select_forwarding(state.rules.values(), src, dest, operational, inport)
    if m.rule is None:
        return Decision('drop')
    return Decision('port', m.rule.fwd, m.ambiguous)


def evict(state: SwitchState) -> None:
    """Drop earliest-stamped rules/managers until within capacity."""
    while len(state.rules) > state.max_rules:
        victim = min(state.rules.values(), key=lambda r: r.stamp)
        del state.rules[victim.key()]
    while len(state.managers) > state.max_managers:
        victim_id = min(state.managers, key=lambda c: state.managers[c])
        del state.managers[victim_id]


def apply_batch(state: SwitchState, frm: int, batch,
                reported_neighbors=None,
                deletion_hook=None) -> Optional[QueryReply]:
    """Apply a command batch atomically and produce the query reply.

    Commands run in order; every insertion is followed by eviction so the
    capacity bounds hold at each point.  Malformed batches are ignored with
    no reply (they model garbage left in channels by transient faults).
    ``deletion_hook(kind, frm, target)`` fires when a DelMngr/DelAllRules
    actually removes state, so the engine can audit deletions.
    """
    if not batch_well_formed(batch):
        return None
    state.refresh(frm)
    reply = None
    for cmd in batch:
        if isinstance(cmd, NewRound):
            old = state.meta_rule(frm)
            if old is not None:
                del state.rules[old.key()]
            state.insert_rule(Rule(frm, state.id, None, None, 0, None,
                                   cmd.tag, state.next_stamp()))
            evict(state)
        elif isinstance(cmd, DelMngr):
            if cmd.controller in state.managers:
                del state.managers[cmd.controller]
                if deletion_hook:
                    deletion_hook('mngr', frm, cmd.controller)
        elif isinstance(cmd, AddMngr):
            state.managers[cmd.controller] = state.next_stamp()
            evict(state)
        elif isinstance(cmd, DelAllRules):
            doomed = [k for k, r in sorted(state.rules.items())
                      if r.creator == cmd.controller]
            for k in doomed:
                del state.rules[k]
            if doomed and deletion_hook:
                deletion_hook('rules', frm, cmd.controller)
        elif isinstance(cmd, UpdateRules):
            keep = set(cmd.keep_tags)
            doomed = [k for k, r in sorted(state.rules.items())
                      if r.creator == frm and not r.is_meta
                      and r.tag not in keep]
            for k in doomed:
                del state.rules[k]
            for r in sorted(cmd.rules, key=lambda r: r.key()):
                state.insert_rule(Rule(r.creator, r.switch, r.src, r.dest,
                                       r.priority, r.fwd, r.tag,
                                       state.next_stamp()))
                evict(state)
        elif isinstance(cmd, Query):
            neighbors = (frozenset(reported_neighbors)
                         if reported_neighbors is not None
                         else frozenset(state.neighbors))
            reply = QueryReply(state.id, neighbors,
                               frozenset(state.managers),
                               frozenset(state.rules.values()))
    return reply
