"""Command line surface: batch scenario runs (CSV output), offline resilience
verification, and topology generation.

    renaissance run <config> [--seed N | --seeds A..B] [--csv PATH]
                             [--trace PATH] [--max-steps N]
    renaissance verify <topology> --kappa K
    renaissance gen <family> [params] -o <path>

Exit codes: 0 success, 1 non-convergence of a guarantee-covered scenario,
2 usage or I/O errors.  RENAISSANCE_LOG sets log verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import random
import sys
from dataclasses import dataclass, field
from typing import List, Optional

from .engine import FaultSpec, run_scenario
from .topology import (Graph, TopologyError, dump_topology, edge_connectivity,
                       load_topology, synthesize_assignment, verify_resilience)
from .dataplane import Tag

log = logging.getLogger("renaissance")

CSV_COLUMNS = ["scenario", "seed", "converged", "frames", "steps", "c_resets",
               "illegit_deletions", "max_rules_per_switch", "messages_per_frame"]


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    topology: str
    scenario: str = "scenario"
    controllers: Optional[int] = None     # live count; defaults to declared
    kappa: int = 1
    theta: int = 10
    seed: int = 0
    max_steps: Optional[int] = None
    memory_adaptive: bool = True
    three_tags: bool = False
    csv: Optional[str] = None
    trace: Optional[str] = None
    faults: List[FaultSpec] = field(default_factory=list)


def _parse_bool(v: str) -> bool:
    if v.lower() in ("true", "1", "yes", "on"):
        return True
    if v.lower() in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def parse_fault(text: str) -> FaultSpec:
    """Fault syntax: "<kind>@<when>:k=v,k=v".  ``when`` is a step number or
    'legit'.  Example: remove_link@legit:u=1,v=8"""
    head, _, argstr = text.partition(':')
    kind, _, when = head.partition('@')
    kind = kind.strip()
    if kind not in ('corrupt', 'fail_controller', 'remove_switch',
                    'remove_link', 'add_link', 'packet_plan'):
        raise ConfigError(f"unknown fault kind {kind!r}")
    args = {}
    if argstr.strip():
        for item in argstr.split(','):
            k, _, v = item.partition('=')
            if not _ or not k.strip():
                raise ConfigError(f"bad fault argument {item!r}")
            args[k.strip()] = v.strip()
    when = when.strip() or '0'
    if when == 'legit':
        return FaultSpec(kind, 'legit', 0, args)
    try:
        return FaultSpec(kind, 'step', int(when), args)
    except ValueError:
        raise ConfigError(f"bad fault schedule {when!r}")


def parse_config(text: str) -> ScenarioConfig:
    values = {"faults": []}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition('=')
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, val = key.strip(), val.strip()
        if key == "fault":
            values["faults"].append(parse_fault(val))
        else:
            values[key] = val
    if "topology" not in values:
        raise ConfigError("config is missing topology=")
    cfg = ScenarioConfig(topology=values.pop("topology"),
                         faults=values.pop("faults"))
    casts = {"scenario": str, "controllers": int, "kappa": int, "theta": int,
             "seed": int, "max_steps": int, "csv": str, "trace": str,
             "memory_adaptive": _parse_bool, "three_tags": _parse_bool}
    for key, val in values.items():
        if key not in casts:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            setattr(cfg, key, casts[key](val))
        except ValueError:
            raise ConfigError(f"bad value for {key}: {val!r}")
    return cfg


def _load_graph(path: str) -> Graph:
    try:
        with open(path, encoding="utf-8") as fh:
            return load_topology(fh.read())
    except OSError as e:
        raise ConfigError(f"cannot read topology {path}: {e.strerror}")
    except TopologyError as e:
        raise ConfigError(f"{path}: {e}")


def csv_row(m) -> str:
    cells = [m.scenario, str(m.seed), str(int(m.converged)),
             str(m.frames_to_legit if m.frames_to_legit is not None else -1),
             str(m.steps_to_legit if m.steps_to_legit is not None else -1),
             str(m.c_resets_total), str(m.illegit_deletions),
             str(m.max_rules_per_switch), f"{m.messages_per_frame:.2f}"]
    return ",".join(cells)


def run_config(cfg: ScenarioConfig, seeds: List[int],
               max_steps_override: Optional[int] = None):
    """Execute one config across seeds; returns (rows, all_converged)."""
    g0 = _load_graph(cfg.topology)
    if cfg.controllers is not None:
        if not (1 <= cfg.controllers <= g0.n_controllers):
            raise ConfigError(
                f"controllers={cfg.controllers} outside declared 1..{g0.n_controllers}")
        live = list(range(1, cfg.controllers + 1))
    else:
        live = list(range(1, g0.n_controllers + 1))
    rows, traces = [], []
    all_converged = True
    for seed in seeds:
        metrics, trace, _ = run_scenario(
            g0.copy(), live_controllers=live, kappa=cfg.kappa,
            theta=cfg.theta, seed=seed, faults=list(cfg.faults),
            max_steps=max_steps_override or cfg.max_steps,
            memory_adaptive=cfg.memory_adaptive, three_tags=cfg.three_tags,
            scenario=cfg.scenario)
        rows.append(csv_row(metrics))
        traces.append(trace)
        all_converged &= metrics.converged
        log.info("seed=%d converged=%s frames=%s", seed, metrics.converged,
                 metrics.frames_to_legit)
    return rows, traces, all_converged, g0


def cmd_run(args) -> int:
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = parse_config(fh.read())
    except OSError as e:
        print(f"error: cannot read config {args.config}: {e.strerror}",
              file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if args.seeds:
        a, _, b = args.seeds.partition("..")
        try:
            seeds = list(range(int(a), int(b) + 1))
        except ValueError:
            print(f"error: bad --seeds {args.seeds!r}", file=sys.stderr)
            return 2
    elif args.seed is not None:
        seeds = [args.seed]
    else:
        seeds = [cfg.seed]
    try:
        rows, traces, converged, g = run_config(cfg, seeds, args.max_steps)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    out = ",".join(CSV_COLUMNS) + "\n" + "\n".join(rows) + "\n"
    csv_path = args.csv or cfg.csv
    if csv_path:
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write(out)
    else:
        sys.stdout.write(out)
    trace_path = args.trace or cfg.trace
    if trace_path:
        for seed, trace in zip(seeds, traces):
            path = trace_path if len(seeds) == 1 else \
                f"{trace_path}.seed{seed}"
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("\n".join(trace) + "\n")
    covered = edge_connectivity(g) >= cfg.kappa + 1 and \
        (cfg.controllers or g.n_controllers) >= 1
    if not converged and covered:
        return 1
    return 0


def cmd_verify(args) -> int:
    try:
        g = _load_graph(args.topology)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    lam = edge_connectivity(g)
    if args.kappa >= lam:
        print(f"warning: kappa={args.kappa} not below edge connectivity "
              f"{lam}; coverage is best-effort", file=sys.stderr)
    tag = Tag(0, 0)
    assignments = {c: synthesize_assignment(g, c, Tag(c, 1), args.kappa)
                   for c in g.controllers()}
    report = verify_resilience(g, assignments, args.kappa)
    verdict = "PASS" if report.passed else "FAIL"
    print(f"lambda={lam} kappa={args.kappa} pairs={report.pairs_checked} "
          f"failure_sets={report.failure_sets} result={verdict}")
    for f in report.failures[:20]:
        print(f"  drop: controller={f.controller} dest={f.dest} "
              f"down={list(f.failed_edges)} outcome={f.outcome}")
    for node, src, dest in report.ambiguities[:20]:
        print(f"  ambiguous: node={node} src={src} dest={dest}")
    return 0 if report.passed else 1


def gen_topology(family: str, *, n: int = 8, rows: int = 3, cols: int = 4,
                 spine: int = 2, leaf: int = 4, k: int = 2, seed: int = 0,
                 controllers: int = 1) -> Graph:
    """Deterministic topology families for fixtures and sweeps."""
    if family == "ring":
        if n < 3:
            raise ConfigError("ring needs n >= 3")
        g = Graph(controllers, n - controllers,
                  {v: [] for v in range(1, n + 1)})
        for v in range(1, n + 1):
            g.add_edge(v, v % n + 1)
        return g
    if family == "grid":
        total = rows * cols
        g = Graph(controllers, total - controllers,
                  {v: [] for v in range(1, total + 1)})
        for r in range(rows):
            for c in range(cols):
                v = r * cols + c + 1
                if c + 1 < cols:
                    g.add_edge(v, v + 1)
                if r + 1 < rows:
                    g.add_edge(v, v + cols)
        return g
    if family == "clos-lite":
        total = controllers + spine + leaf
        g = Graph(controllers, spine + leaf,
                  {v: [] for v in range(1, total + 1)})
        spines = list(range(controllers + 1, controllers + spine + 1))
        leaves = list(range(controllers + spine + 1, total + 1))
        for s in spines:
            for l in leaves:
                g.add_edge(s, l)
        for c in range(1, controllers + 1):
            for s in spines:
                g.add_edge(c, s)
        return g
    if family == "random-k-connected":
        rng = random.Random(f"gen:{seed}")
        for attempt in range(200):
            g = Graph(controllers, n - controllers,
                      {v: [] for v in range(1, n + 1)})
            order = list(range(1, n + 1))
            rng.shuffle(order)
            for idx, v in enumerate(order):
                g.add_edge(v, order[(idx + 1) % n])
            extra = max(1, n // 2) + rng.randrange(0, n)
            for _ in range(extra):
                u, v = rng.sample(range(1, n + 1), 2)
                if not g.has_edge(u, v):
                    g.add_edge(u, v)
            if edge_connectivity(g) >= k:
                return g
        raise ConfigError(f"could not reach edge connectivity {k} for n={n}")
    raise ConfigError(f"unknown family {family!r}")


def cmd_gen(args) -> int:
    try:
        g = gen_topology(args.family, n=args.n, rows=args.rows, cols=args.cols,
                         spine=args.spine, leaf=args.leaf, k=args.k,
                         seed=args.seed or 0, controllers=args.controllers)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    text = dump_topology(g)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="renaissance",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="execute a scenario config")
    pr.add_argument("config")
    pr.add_argument("--seed", type=int)
    pr.add_argument("--seeds", help="inclusive range A..B")
    pr.add_argument("--max-steps", type=int, dest="max_steps")
    pr.add_argument("--csv")
    pr.add_argument("--trace")
    pr.set_defaults(func=cmd_run)

    pv = sub.add_parser("verify", help="offline resilience check")
    pv.add_argument("topology")
    pv.add_argument("--kappa", type=int, default=1)
    pv.set_defaults(func=cmd_verify)

    pg = sub.add_parser("gen", help="generate a topology file")
    pg.add_argument("family",
                    choices=["ring", "grid", "clos-lite", "random-k-connected"])
    pg.add_argument("-o", "--output")
    pg.add_argument("--n", type=int, default=8)
    pg.add_argument("--rows", type=int, default=3)
    pg.add_argument("--cols", type=int, default=4)
    pg.add_argument("--spine", type=int, default=2)
    pg.add_argument("--leaf", type=int, default=4)
    pg.add_argument("--k", type=int, default=2)
    pg.add_argument("--seed", type=int, default=0)
    pg.add_argument("--controllers", type=int, default=1)
    pg.set_defaults(func=cmd_gen)
    return p


def main(argv=None) -> int:
    level = os.environ.get("RENAISSANCE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
