"""Seeded random instances and cross-pipeline equivalence checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .collectives import CostLedger, WorkerGroup
from .config import Topology
from .params import MoeParams
from .pipeline import (pf_combine, pf_dispatch, pf_moe_forward, route_tokens,
                       sequential_expert_mlp)
from .rbd import (rbd_combine, rbd_dispatch, redundancy_counts, routing_matrix,
                  select_pilots)
from .reference import padded_moe_forward
from .ssmb import ssmb_forward


@dataclass
class Instance:
    seed: tuple[int, ...]
    group: WorkerGroup
    owner: np.ndarray
    params: MoeParams
    tokens: list[np.ndarray]
    k: int
    max_token_count: int
    drops: bool

    @property
    def num_experts(self) -> int:
        return self.params.num_experts

    def describe(self) -> str:
        return (f"seed={list(self.seed)} W={self.group.num_workers} "
                f"nodes={len(set(self.group.node_of))} E={self.num_experts} k={self.k} "
                f"H={self.params.model_dim} H_FFN={self.params.w1.shape[2]} "
                f"S={[x.shape[0] for x in self.tokens]} cap={self.max_token_count}")


def _balanced_owner(rng, E, W):
    return rng.permutation(np.repeat(np.arange(W), E // W)).astype(np.int64)


def _capacity(rng, S, k, E, drops):
    if not drops:
        return S * k
    return int(rng.integers(1, max(1, -(-S * k // E)) + 1))


def random_instance(seed: "int | Sequence[int]", *, max_workers: int = 4, max_experts: int = 8,
                    max_k: int = 4, max_dim: int = 16, max_seq: int = 64,
                    drops: bool | None = None, equal_seq: bool = False) -> Instance:
    """Small instance for pipeline equivalence: W ≤ 4, E ≤ 8, k ≤ 4, H, H_FFN ≤ 16, S ≤ 64."""
    seed = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
    rng = np.random.default_rng(list(seed))
    W = int(rng.integers(1, max_workers + 1))
    E = W * int(rng.integers(1, max_experts // W + 1))
    k = int(rng.integers(1, min(max_k, E) + 1))
    H = int(rng.integers(1, max_dim + 1))
    F = int(rng.integers(1, max_dim + 1))
    gpn = int(rng.choice([d for d in range(1, W + 1) if W % d == 0]))
    topo = Topology(num_nodes=W // gpn, gpus_per_node=gpn)
    group = WorkerGroup.from_topology(topo)
    if drops is None:
        drops = bool(rng.integers(0, 2))
    S_all = int(rng.integers(1, max_seq + 1))
    seqs = [S_all if equal_seq else int(rng.integers(1, max_seq + 1)) for _ in range(W)]
    cap = _capacity(rng, max(seqs), k, E, drops)
    return Instance(seed=seed, group=group, owner=_balanced_owner(rng, E, W),
                    params=MoeParams.random(rng, E, H, F),
                    tokens=[rng.normal(size=(s, H)) for s in seqs], k=k,
                    max_token_count=cap, drops=drops)


def random_rbd_instance(seed: "int | Sequence[int]", *, model_dim: int | None = None,
                        seq_len: int | None = None, bw_intra: float = 200e9,
                        bw_inter: float = 25e9) -> Instance:
    """Instance on 2-4 nodes with 1-2 workers per node and up to 2 experts per worker.

    ``seq_len`` gives every worker a batch of that many tokens; by default
    batch sizes are drawn independently from [1, 48].
    """
    seed = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
    rng = np.random.default_rng(list(seed))
    nodes = int(rng.integers(2, 5))
    gpn = int(rng.integers(1, 3))
    W = nodes * gpn
    E = W * int(rng.integers(1, 3))
    k = int(rng.integers(1, min(6, E) + 1))
    H = model_dim or int(rng.integers(1, 17))
    F = int(rng.integers(1, 17))
    topo = Topology(num_nodes=nodes, gpus_per_node=gpn, bw_intra=bw_intra, bw_inter=bw_inter)
    drops = bool(rng.integers(0, 2))
    seqs = [seq_len or int(rng.integers(1, 49)) for _ in range(W)]
    cap = _capacity(rng, max(seqs), k, E, drops)
    return Instance(seed=seed, group=WorkerGroup.from_topology(topo),
                    owner=_balanced_owner(rng, E, W), params=MoeParams.random(rng, E, H, F),
                    tokens=[rng.normal(size=(s, H)) for s in seqs], k=k,
                    max_token_count=cap, drops=drops)


def max_abs_diff(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    return max((float(np.max(np.abs(x - y))) for x, y in zip(a, b) if x.size), default=0.0)


def allclose_rel(a: Sequence[np.ndarray], b: Sequence[np.ndarray], rtol: float,
                 atol: float = 1e-12) -> bool:
    """Per-element ``|a - b| <= rtol * |b| + atol`` over every worker's output."""
    return len(a) == len(b) and all(
        x.shape == y.shape and bool(np.all(np.abs(x - y) <= rtol * np.abs(y) + atol))
        for x, y in zip(a, b))


def pf_outputs(inst: Instance, ledger: CostLedger | None = None,
               perturb: float = 0.0) -> list[np.ndarray]:
    """Padding-free forward; ``perturb`` is added to the first retained combine weight."""
    if not perturb:
        return pf_moe_forward(inst.tokens, inst.params, inst.k, inst.max_token_count,
                              inst.group, inst.owner, ledger)
    gate_outs, pfts = route_tokens(inst.tokens, inst.params, inst.k, inst.max_token_count)
    for p in pfts:
        if p.num_rows:
            p.combine_weights = p.combine_weights.copy()
            p.combine_weights[0] += perturb
            break
    d = pf_dispatch(pfts, gate_outs, inst.group, inst.owner, ledger)
    done = [sequential_expert_mlp(p, inst.params.w1, inst.params.w2) for p in d.inbound]
    return pf_combine(done, d, pfts, [x.shape[0] for x in gate_outs], inst.group, ledger)


def padded_outputs(inst: Instance, ledger: CostLedger | None = None) -> list[np.ndarray]:
    return padded_moe_forward(inst.tokens, inst.params, inst.k, inst.max_token_count,
                              inst.group, inst.owner, ledger)


@dataclass
class RbdComparison:
    inputs_equal: bool
    outputs_close: bool
    max_abs_diff: float
    pf_ledger: CostLedger
    rbd_ledger: CostLedger
    pilots_inter: int
    copies_inter: int
    redundant_inter: int


def compare_rbd(inst: Instance, rbd_seed=0, rtol: float = 1e-6,
                dtype_bytes: int = 2) -> RbdComparison:
    gate_outs, pfts = route_tokens(inst.tokens, inst.params, inst.k, inst.max_token_count)
    seq_lens = [x.shape[0] for x in gate_outs]
    pf_ledger, rbd_ledger = CostLedger(dtype_bytes), CostLedger(dtype_bytes)

    plain = pf_dispatch(pfts, gate_outs, inst.group, inst.owner, pf_ledger)
    plans = [select_pilots(p, inst.group, inst.owner, rbd_seed, rank=i)
             for i, p in enumerate(pfts)]
    bypass = rbd_dispatch(pfts, gate_outs, plans, inst.group, inst.owner, rbd_ledger)
    equal = all(
        np.array_equal(a.x, b.x) and np.array_equal(a.expert_ids, b.expert_ids)
        and np.array_equal(a.token_ids, b.token_ids)
        and np.array_equal(a.tokens_per_expert, b.tokens_per_expert)
        for a, b in zip(plain.inbound, bypass.inbound))

    w1, w2 = inst.params.w1, inst.params.w2
    out_pf = pf_combine([sequential_expert_mlp(p, w1, w2) for p in plain.inbound], plain, pfts,
                        seq_lens, inst.group, pf_ledger)
    out_rbd = rbd_combine([sequential_expert_mlp(p, w1, w2) for p in bypass.inbound], bypass,
                          pfts, seq_lens, inst.group, rbd_ledger)

    nodes = np.asarray(inst.group.node_of)
    expert_node = nodes[inst.owner]
    pilots_inter = copies_inter = redundant = 0
    for i, (p, plan) in enumerate(zip(pfts, plans)):
        remote = expert_node[p.expert_ids] != nodes[i]
        copies_inter += int(remote.sum())
        pilots_inter += int((remote & plan.pilot_mask).sum())
        r, _ = redundancy_counts(routing_matrix(p, seq_lens[i], inst.k), expert_node,
                                 src_node=int(nodes[i]), inter_only=True)
        redundant += r
    return RbdComparison(
        inputs_equal=equal,
        outputs_close=allclose_rel(out_rbd, out_pf, rtol),
        max_abs_diff=max_abs_diff(out_rbd, out_pf),
        pf_ledger=pf_ledger, rbd_ledger=rbd_ledger,
        pilots_inter=pilots_inter, copies_inter=copies_inter, redundant_inter=redundant)


def ssmb_vs_unsharded(seed: "int | Sequence[int]", G: int) -> tuple[list, list]:
    """Outputs of ``ssmb_forward`` over ``G`` ranks and of the unsharded layer, no drops."""
    seed = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
    rng = np.random.default_rng(list(seed))
    E = G * int(rng.integers(1, 8 // G + 1))
    k = int(rng.integers(1, min(4, E) + 1))
    H, F = int(rng.integers(1, 17)), int(rng.integers(1, 17))
    S = G * int(rng.integers(1, 64 // G + 1))
    params = MoeParams.random(rng, E, H, F)
    x = rng.normal(size=(S, H))
    no_drop = S * k
    gpn = int(rng.choice([d for d in range(1, G + 1) if G % d == 0]))
    group = WorkerGroup.from_topology(Topology(num_nodes=G // gpn, gpus_per_node=gpn))
    owner = _balanced_owner(rng, E, G)
    sharded = ssmb_forward(x, G, params, k, no_drop, group, owner)
    single = pf_moe_forward([x], params, k, no_drop, WorkerGroup((0,)),
                            np.zeros(E, dtype=np.int64))
    return sharded, [single[0]] * G
