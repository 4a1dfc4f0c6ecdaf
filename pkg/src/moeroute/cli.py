"""``moeroute`` command-line entry point.

Exit codes: 0 success, 1 config or validation error, 2 verification mismatch.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .collectives import CostLedger, WorkerGroup
from .config import (NAMED_MODELS, ModelConfig, RunConfig, Strategy, Topology, load_config,
                     place_experts, placement_cost)
from .errors import MoeRouteError
from .params import MoeParams
from .pipeline import pf_moe_forward
from .planner import PLAN_COLUMNS, plan_row
from .rbd import redundancy_sweep
from .ssmb import ssmb_forward
from .verify import (allclose_rel, compare_rbd, max_abs_diff, padded_outputs, pf_outputs,
                     random_instance, random_rbd_instance, ssmb_vs_unsharded)

log = logging.getLogger("moeroute")

# Simulation keeps tensors small enough to run on a laptop.
SIM_MAX_DIM = 64
SIM_MAX_SEQ = 128


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(columns: Sequence[str], rows: Sequence[dict], path: str | None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    text = buf.getvalue()
    if path:
        Path(path).write_text(text)
    return text


def _load(args) -> RunConfig | None:
    return load_config(args.config) if args.config else None


def cmd_verify(args) -> int:
    cfg = _load(args)
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    rows, first_failure = [], None
    for t in range(args.trials):
        inst = random_instance((seed, t))
        pf = pf_outputs(inst, perturb=args.perturb_combine)
        ref = padded_outputs(inst)
        checks = [("pf_vs_padded", allclose_rel(pf, ref, 1e-5), max_abs_diff(pf, ref),
                   inst.describe())]

        rinst = random_rbd_instance((seed, t, 1))
        cmp = compare_rbd(rinst, rbd_seed=(seed, t))
        checks.append(("rbd_vs_pf", cmp.inputs_equal and cmp.outputs_close, cmp.max_abs_diff,
                       rinst.describe()))

        G = (2, 4)[t % 2]
        sharded, single = ssmb_vs_unsharded((seed, t, 2), G)
        checks.append((f"ssmb_g{G}_vs_unsharded", allclose_rel(sharded, single, 1e-6),
                       max_abs_diff(sharded, single), f"seed={[seed, t, 2]} G={G}"))
        for name, ok, diff, desc in checks:
            rows.append({"trial": t, "check": name, "passed": int(ok), "max_abs_diff": diff})
            if not ok and first_failure is None:
                first_failure = (name, desc, diff)
    _write_csv(("trial", "check", "passed", "max_abs_diff"), rows, args.csv_out)
    n_ok = sum(r["passed"] for r in rows)
    print(f"verify: {n_ok}/{len(rows)} checks passed over {args.trials} trials (seed {seed})")
    if first_failure:
        name, desc, diff = first_failure
        print(f"FIRST FAILURE {name}: {desc} max_abs_diff={diff!r}")
        return 2
    return 0


def _desk_scale(model: ModelConfig) -> ModelConfig:
    clamped = replace(model, model_dim=min(model.model_dim, SIM_MAX_DIM),
                      ffn_dim=min(model.ffn_dim, SIM_MAX_DIM),
                      seq_len=min(model.seq_len, SIM_MAX_SEQ))
    if clamped != model:
        log.warning("simulate: clamped model to H=%d H_FFN=%d S=%d", clamped.model_dim,
                    clamped.ffn_dim, clamped.seq_len)
    return clamped


def cmd_simulate(args) -> int:
    cfg = _load(args) or RunConfig(model=replace(NAMED_MODELS["small"], num_layers=2),
                                   topology=Topology(num_nodes=2, gpus_per_node=4), ep_size=8)
    seed = args.seed if args.seed is not None else cfg.seed
    model = _desk_scale(cfg.model)
    placement = place_experts(cfg)
    workers = placement.ep_groups[0]
    group = WorkerGroup.from_topology(cfg.topology, workers)
    owner = placement.local_owner(0)
    G = cfg.ssmb_group
    if group.num_workers % G:
        raise MoeRouteError(f"ssmb_group ({G}) must divide ep_size ({group.num_workers})")
    cap = cfg.max_token_count if model == cfg.model else model.default_capacity()
    params = MoeParams.random(np.random.default_rng([seed, 0]), model.num_experts,
                              model.model_dim, model.ffn_dim)
    ledger = CostLedger(model.dtype_bytes)
    layers = args.layers or model.num_layers
    S = model.seq_len * model.micro_batch
    rng = np.random.default_rng([seed, 1])
    states = [rng.normal(size=(S, model.model_dim)) for _ in range(group.num_workers // G)]
    for layer in range(layers):
        rbd_seed = (seed, layer, 0) if cfg.rbd else None
        if G > 1:
            outs = ssmb_forward(states, G, params, model.top_k, cap, group, owner, ledger,
                                rbd_seed=rbd_seed)
            outs = outs[::G]
        else:
            outs = pf_moe_forward(states, params, model.top_k, cap, group, owner, ledger,
                                  rbd_seed=rbd_seed)
        states = [x + y for x, y in zip(states, outs)]
    text = ledger.to_csv()
    if args.csv_out:
        Path(args.csv_out).write_text(text)
    print(f"simulate: {layers} layer(s), {group.num_workers} EP ranks on "
          f"{len(set(group.node_of))} node(s), {len(ledger.records)} collectives, "
          f"inter={ledger.inter_bytes()} B intra={ledger.intra_bytes()} B "
          f"modeled={ledger.modeled_time():.6g} s")
    return 0


def cmd_redundancy(args) -> int:
    cfg = _load(args)
    model = cfg.model if cfg else NAMED_MODELS["large"]
    gpn = cfg.topology.gpus_per_node if cfg else 8
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    E, k = model.num_experts, model.top_k
    if args.ep_sizes:
        ep_sizes = [int(x) for x in args.ep_sizes.split(",")]
    else:
        ep_sizes = [ep for ep in (2 ** i for i in range(E.bit_length()))
                    if ep >= gpn and E % ep == 0]
    for ep in ep_sizes:
        if ep < 1 or E % ep:
            raise MoeRouteError(f"num_experts ({E}) must be divisible by ep_size ({ep})")
    seeds = [seed + s for s in range(args.trials)]
    rows = redundancy_sweep(E, k, gpn, ep_sizes, args.tokens, seeds)
    print(_write_csv(("ep_size", "experts_per_node", "samples", "redundancy_rate"), rows,
                     args.csv_out), end="")
    return 0


def cmd_plan(args) -> int:
    cfg = _load(args)
    if cfg is not None:
        models = [cfg.model]
        G = args.group or cfg.ssmb_group
    else:
        names = args.models.split(",") if args.models else list(NAMED_MODELS)
        unknown = [n for n in names if n not in NAMED_MODELS]
        if unknown:
            raise MoeRouteError(f"unknown model {unknown[0]!r}")
        models = [NAMED_MODELS[n] for n in names]
        G = args.group or 2
    if args.capacity_factor is not None:
        models = [replace(m, capacity_factor=args.capacity_factor) for m in models]
    rows = [plan_row(m, G) for m in models]
    print(_write_csv(PLAN_COLUMNS, rows, args.csv_out), end="")
    return 0


def cmd_placement(args) -> int:
    cfg = _load(args) or RunConfig(
        model=ModelConfig(num_experts=8, model_dim=4096, ffn_dim=14336, top_k=2, seq_len=4096),
        topology=Topology(num_nodes=8, gpus_per_node=8), ep_size=8)
    rows = []
    for strategy in Strategy:
        report = placement_cost(place_experts(cfg, strategy), cfg)
        rows.append({"strategy": strategy.value, **report.as_dict()})
    print(_write_csv(("strategy", "ep_internode_bytes", "ep_intranode_bytes",
                      "dp_internode_bytes", "dp_intranode_bytes"), rows, args.csv_out), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run config")
    common.add_argument("--seed", type=int, default=None, help="unsigned 64-bit seed")
    common.add_argument("--trials", type=int, default=10)
    common.add_argument("--csv-out", metavar="PATH")

    parser = argparse.ArgumentParser(prog="moeroute", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[common],
                       help="padding-free vs padded, RBD vs plain, SSMB vs unsharded")
    p.add_argument("--perturb-combine", type=float, default=0.0,
                   help="add this to one combine weight (negative control)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("simulate", parents=[common], help="run MoE layers and dump the ledger")
    p.add_argument("--layers", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("redundancy", parents=[common],
                       help="Monte Carlo redundancy rate over EP sizes")
    p.add_argument("--tokens", type=int, default=10_000)
    p.add_argument("--ep-sizes", help="comma-separated EP sizes")
    p.set_defaults(func=cmd_redundancy)

    p = sub.add_parser("plan", parents=[common], help="SSMB vs TED memory planner")
    p.add_argument("--models", help=f"comma-separated presets ({', '.join(NAMED_MODELS)})")
    p.add_argument("--group", type=int, default=None, help="SSMB/TP group size G")
    p.add_argument("--capacity-factor", type=float, default=None)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("placement", parents=[common], help="EP-first vs DP-first volumes")
    p.set_defaults(func=cmd_placement)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except MoeRouteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
