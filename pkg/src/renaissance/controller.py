"""The controller state machine: the do-forever discovery/update iteration,
reply-set macros, C-reset handling, query responses, and tag rotation.

Each controller independently discovers the network ring by ring, installs
its flow rules in synchronized rounds identified by unique tags, and removes
configuration left behind by unreachable controllers.  Two documented
variants are supported: a three-tag rule retirement schedule and a
non-memory-adaptive mode that never deletes other controllers' state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from .dataplane import (AddMngr, DelAllRules, DelMngr, NewRound, Query,
                        QueryReply, Rule, Tag, UpdateRules)
from .topology import DiView, bfs_distances, synthesize_assignment


def self_record(node_id: int, neighbors) -> QueryReply:
    return QueryReply(node_id, frozenset(neighbors), frozenset(), frozenset())


def res(replies: Iterable[QueryReply], x: Tag, self_id: int,
        self_neighbors) -> Dict[int, QueryReply]:
    """Replies belonging to round x, plus the synthetic self-record.

    A reply belongs to round x when it carries a rule tagged x: the switch
    echoes the round tag through the freshly installed meta-rule and a
    controller echoes it in its synthetic reply rule.  (Switch replies carry
    every controller's rules verbatim, so membership keys on the presence of
    the round's own tag rather than on all rules agreeing.)
    """
    out = {}
    for m in replies:
        if m.id == self_id:
            continue
        if any(r.tag == x for r in m.rules):
            out[m.id] = m
    out[self_id] = self_record(self_id, self_neighbors)
    return out


def graph_of(replies: Iterable[QueryReply]) -> DiView:
    """Directed topology view: an edge per reported neighbor of each
    respondent."""
    succ = {}
    for m in sorted(replies, key=lambda m: m.id):
        succ[m.id] = tuple(sorted(m.neighbors))
    return DiView(succ)


def fusion(replies: Iterable[QueryReply], curr: Tag, prev: Tag, self_id: int,
           self_neighbors) -> Dict[int, QueryReply]:
    """Current-round replies overlaid on previous-round replies from senders
    not yet heard this round."""
    cur = res(replies, curr, self_id, self_neighbors)
    prv = res(replies, prev, self_id, self_neighbors)
    out = dict(cur)
    for mid, m in prv.items():
        if mid not in out:
            out[mid] = m
    return out


def reachable_set(view: DiView, source: int) -> set:
    return set(bfs_distances(view, source))


@dataclass
class ControllerState:
    """Local state of one controller."""

    id: int
    n_controllers: int
    nc_view: Tuple[int, ...]
    max_replies: int
    kappa: int = 1
    n_prt: int = 3
    memory_adaptive: bool = True
    three_tags: bool = False
    epoch: int = 1
    curr_tag: Tag = None
    prev_tag: Tag = None
    before_prev_tag: Tag = None
    reply_db: Dict[int, QueryReply] = field(default_factory=dict)
    virtual_rules: List[Rule] = field(default_factory=list)
    c_resets: int = 0
    rounds_completed: int = 0
    _synth_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.curr_tag is None:
            self.curr_tag = Tag(self.id, self.epoch)
        if self.prev_tag is None:
            self.prev_tag = Tag(self.id, 0)
        if self.before_prev_tag is None:
            self.before_prev_tag = Tag(self.id, 0)
        self.reply_db.setdefault(self.id, self_record(self.id, self.nc_view))

    def is_switch(self, node: int) -> bool:
        return node > self.n_controllers

    def stored_tags(self) -> set:
        tags = {self.curr_tag, self.prev_tag}
        if self.three_tags:
            tags.add(self.before_prev_tag)
        return tags


def next_tag(s: ControllerState) -> Tag:
    """Fresh tag: the epoch counter advances until the candidate differs from
    every tag still referenced, so uniqueness recovers even from a corrupted
    counter."""
    taken = s.stored_tags()
    epoch = s.epoch + 1
    while Tag(s.id, epoch) in taken:
        epoch += 1
    s.epoch = epoch
    return Tag(s.id, epoch)


def _res(s: ControllerState, x: Tag) -> Dict[int, QueryReply]:
    return res(s.reply_db.values(), x, s.id, s.nc_view)


def _synthesize(s: ControllerState, view: DiView, tag: Tag):
    sig = (tag, tuple(sorted((v, view.succ(v)) for v in sorted(view._succ))))
    hit = s._synth_cache.get(sig)
    if hit is not None:
        return hit
    asg = synthesize_assignment(view, s.id, tag, s.kappa, s.n_prt)
    if len(s._synth_cache) > 8:
        s._synth_cache.clear()
    s._synth_cache[sig] = asg
    return asg


def iterate(s: ControllerState) -> List[Tuple[int, list]]:
    """One do-forever iteration; returns the outbound (destination, batch)
    list.  Every batch opens with the round marker and closes with the query
    carrying the current tag."""
    # Drop replies from senders unreachable in their own round's view or
    # stale beyond the two (or three) live rounds; refresh the self-record.
    res_by_tag = {x: _res(s, x) for x in (s.curr_tag, s.prev_tag)}
    keep: Dict[int, QueryReply] = {}
    for mid in sorted(s.reply_db):
        if mid == s.id:
            continue
        m = s.reply_db[mid]
        for x in (s.curr_tag, s.prev_tag):
            rx = res_by_tag[x]
            if rx.get(mid) is m and mid in reachable_set(graph_of(rx.values()), s.id):
                keep[mid] = m
                break
    keep[s.id] = self_record(s.id, s.nc_view)
    s.reply_db = keep

    new_round = False
    rc = _res(s, s.curr_tag)
    if reachable_set(graph_of(rc.values()), s.id) <= set(rc):
        new_round = True
        s.rounds_completed += 1
        if s.three_tags:
            s.before_prev_tag = s.prev_tag
        s.prev_tag = s.curr_tag
        s.curr_tag = next_tag(s)
        fresh = _res(s, s.curr_tag)
        for mid in list(s.reply_db):
            if mid != s.id and fresh.get(mid) is s.reply_db[mid]:
                del s.reply_db[mid]

    rc = _res(s, s.curr_tag)
    rp = _res(s, s.prev_tag)
    fus = dict(rc)
    for mid, m in rp.items():
        fus.setdefault(mid, m)
    refer = rp if graph_of(fus.values()) == graph_of(rp.values()) else rc
    refer_tag_is_prev = refer is rp

    refer_view = graph_of(refer.values())
    asg = _synthesize(s, refer_view, s.curr_tag)
    keep_tags = (s.prev_tag,) if s.three_tags else ()
    prev_reach = reachable_set(graph_of(rp.values()), s.id)

    commands: Dict[int, list] = {}
    for mid in sorted(refer):
        if not s.is_switch(mid):
            continue
        m = refer[mid]
        managers = set(m.managers or ())
        rule_creators = {r.creator for r in m.rules}
        managed = {k for k in managers
                   if k in rule_creators and (not new_round or k in prev_reach)}
        managed.add(s.id)
        cmds = []
        if s.memory_adaptive:
            cmds.extend(DelMngr(k) for k in sorted(managers - managed))
        cmds.append(AddMngr(s.id))
        if s.memory_adaptive:
            cmds.extend(DelAllRules(k)
                        for k in sorted(rule_creators - managed))
        cmds.append(UpdateRules(tuple(sorted(asg.at(mid), key=lambda r: r.key())),
                                keep_tags))
        commands[mid] = cmds

    # First-hop table for packets this controller originates or relays,
    # synthesized from the fused (most complete) view.
    fused_view = graph_of(fus.values())
    s.virtual_rules = list(_synthesize(s, fused_view, s.curr_tag).at(s.id))

    batches = []
    for dest in sorted(reachable_set(fused_view, s.id) - {s.id}):
        batch = [NewRound(s.curr_tag)]
        batch.extend(commands.get(dest, ()))
        batch.append(Query(s.curr_tag))
        batches.append((dest, batch))
    return batches


def on_reply(s: ControllerState, m: QueryReply) -> bool:
    """Admit a query reply; returns True when a C-reset fired.  A reply only
    enters the database when it echoes the current round's tag."""
    reset = False
    projected = len(s.reply_db) + (0 if m.id in s.reply_db else 1)
    if projected > s.max_replies:
        s.reply_db = {s.id: self_record(s.id, s.nc_view)}
        s.c_resets += 1
        reset = True
    if any(r.tag == s.curr_tag for r in m.rules):
        s.reply_db[m.id] = m
    return reset


def on_query(s: ControllerState, frm: int, tag: Tag) -> QueryReply:
    """Controller's answer to another controller's query: its neighborhood
    and a single synthetic rule echoing the query tag."""
    echo = Rule(frm, s.id, None, None, 0, None, tag)
    return QueryReply(s.id, frozenset(s.nc_view), None, frozenset({echo}))
