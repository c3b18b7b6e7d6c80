"""Command-line entry point: run experiments, validate configs, debug solves.

Every run writes ``metrics.csv`` (when the experiment drives the router),
``summary.txt``, the resolved ``config.json`` and a ``manifest.txt`` pinning
the config hash and seed, so any run can be reproduced byte for byte on the
virtual clock.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys

from . import __version__
from .config import (
    ConfigError,
    EXPERIMENT_KINDS,
    ExperimentConfig,
    config_digest,
    default_config,
    load_config,
    save_config,
    validate_config,
)
from .mechanism import (
    MatchProblem,
    MechanismError,
    WelfareEdge,
    prune_negative_edges,
    solve_allocation,
    vcg_payments,
    verify_budget_balance,
)
from .simnet import RunResult, dump_workload, generate_workload, run_experiment


class CliError(ValueError):
    pass


def _currency(value: float) -> str:
    return f"{value:g}"


# ---------------------------------------------------------------------------
# One-shot solve harness
# ---------------------------------------------------------------------------


def load_problem(path: str) -> MatchProblem:
    """Parse the line-oriented matching problem format.

    Header ``clients N agents M``; then ``agent <id> <capacity>`` lines; then
    ``edge <client> <agent> <value> <cost>`` lines.  Edges with negative
    welfare are pruned, mirroring what the router does upstream.
    """
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise CliError(f"{path}: empty problem file")
    header = lines[0].split()
    if len(header) != 4 or header[0] != "clients" or header[2] != "agents":
        raise CliError(f"{path}: header must be 'clients N agents M'")
    try:
        n_clients, n_agents = int(header[1]), int(header[3])
    except ValueError:
        raise CliError(f"{path}: header counts must be integers") from None

    agents: list[tuple[str, int]] = []
    edges: list[WelfareEdge] = []
    clients: list[str] = []
    for line in lines[1:]:
        parts = line.split()
        if parts[0] == "agent" and len(parts) == 3:
            agents.append((parts[1], int(parts[2])))
        elif parts[0] == "edge" and len(parts) == 5:
            client, agent = parts[1], parts[2]
            if client not in clients:
                clients.append(client)
            edges.append(WelfareEdge(client, agent, float(parts[3]), float(parts[4])))
        else:
            raise CliError(f"{path}: unrecognized line {line!r}")
    if len(agents) != n_agents:
        raise CliError(f"{path}: header declares {n_agents} agents, found {len(agents)}")
    if len(clients) != n_clients:
        raise CliError(f"{path}: header declares {n_clients} clients, found {len(clients)}")
    return MatchProblem.build(clients, agents, prune_negative_edges(edges))


def solve_command(path: str, out=None) -> int:
    problem = load_problem(path)
    alloc = solve_allocation(problem)
    payments = vcg_payments(problem, alloc)
    holds, surplus = verify_budget_balance(payments, alloc)
    print(f"W={_currency(alloc.total_welfare)}", file=out)
    for client in problem.clients:
        agent = alloc.assignments.get(client)
        if agent is None:
            print(f"{client} unmatched", file=out)
        else:
            print(
                f"{client} -> {agent} (w={_currency(alloc.matched_welfare[client])})",
                file=out,
            )
    for client in problem.clients:
        if client in payments.payments:
            print(f"payment {client} = {_currency(payments.payments[client])}", file=out)
    print(f"total_surplus={_currency(surplus)} budget_balance={'ok' if holds else 'VIOLATED'}", file=out)
    return 0


# ---------------------------------------------------------------------------
# Experiment running and outputs
# ---------------------------------------------------------------------------


def cluster_sweep(cfg: ExperimentConfig, k_values: list[int]) -> list[dict]:
    """Welfare/solver-time table over hub counts on the synthetic market."""
    sweep_cfg = dataclasses.replace(cfg, kind="cluster_sweep")
    sweep_cfg.market = dataclasses.replace(cfg.market, k_values=list(k_values))
    validate_config(sweep_cfg)
    return run_experiment(sweep_cfg).table_rows


def save_run(out_dir: str, cfg: ExperimentConfig, result: RunResult) -> None:
    os.makedirs(out_dir, exist_ok=True)
    if result.metrics is not None:
        result.metrics.write_csv(os.path.join(out_dir, "metrics.csv"))
    if result.table_name is not None:
        with open(os.path.join(out_dir, f"{result.table_name}.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(result.table_columns)
            for row in result.table_rows:
                writer.writerow([row[c] for c in result.table_columns])
    from .simnet import format_summary

    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_summary(result.summary))
    save_config(cfg, os.path.join(out_dir, "config.json"))
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"experiment = {cfg.kind}\n")
        fh.write(f"seed = {cfg.seed}\n")
        fh.write(f"config_sha256 = {config_digest(cfg)}\n")
        fh.write(f"package = bidroute {__version__}\n")


def run_command(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        if args.experiment:
            cfg.kind = args.experiment
    else:
        if not args.experiment:
            raise CliError("run: provide --experiment or --config")
        cfg = default_config(args.experiment)
    if args.seed is not None:
        cfg.seed = args.seed
    validate_config(cfg)
    result = run_experiment(cfg)
    save_run(args.out, cfg, result)
    print(f"wrote {args.out} ({cfg.kind}, seed {cfg.seed})")
    return 0


def gen_workload_command(args) -> int:
    domain_mix = {}
    for part in args.domains.split(","):
        if ":" in part:
            name, weight = part.split(":", 1)
            domain_mix[name.strip()] = float(weight)
        else:
            domain_mix[part.strip()] = 1.0
    dialogues = generate_workload(args.seed, args.n_dialogues, args.turns, domain_mix)
    dump_workload(dialogues, args.out)
    print(f"wrote {args.out} ({len(dialogues)} dialogues)")
    return 0


def validate_config_command(path: str) -> int:
    load_config(path)
    print(f"{path}: ok")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bidroute", description=__doc__)
    parser.add_argument("--version", action="version", version=f"bidroute {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment and write its outputs")
    run_p.add_argument("--experiment", choices=EXPERIMENT_KINDS)
    run_p.add_argument("--config", help="JSON config path (defaults per experiment)")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument("--out", required=True, help="output directory")

    val_p = sub.add_parser("validate-config", help="check a config file")
    val_p.add_argument("config")

    gen_p = sub.add_parser("gen-workload", help="write a synthetic workload dump")
    gen_p.add_argument("--seed", type=int, default=0)
    gen_p.add_argument("--n-dialogues", type=int, default=40)
    gen_p.add_argument("--turns", type=int, default=8)
    gen_p.add_argument("--domains", default="code,math,qa", help="name[:weight],...")
    gen_p.add_argument("--out", required=True)

    solve_p = sub.add_parser("solve", help="solve one matching problem from a file")
    solve_p.add_argument("problem")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return run_command(args)
        if args.command == "validate-config":
            return validate_config_command(args.config)
        if args.command == "gen-workload":
            return gen_workload_command(args)
        if args.command == "solve":
            return solve_command(args.problem)
        raise CliError(f"unknown command {args.command!r}")
    except (CliError, ConfigError, MechanismError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
