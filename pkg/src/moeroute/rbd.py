"""Hierarchical redundancy-bypassing dispatch (RBD).

When several of a token's experts live on the same destination node, only one
copy of the token (the pilot) crosses the inter-node network. The remaining
copies (local replicas) are rebuilt from the pilot on arrival and forwarded to
their experts over intra-node links. The expert input buffers come out
identical to plain padding-free dispatch; only the traffic pattern changes.

Metadata needed to rebuild replicas is charged to the ledger at 8 bytes per
integer (pilot token ids; replica token id, expert id, pilot expert id and
mapping index) and ``dtype_bytes`` per combine weight, as a separate
``rbd_meta`` collective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .collectives import CostLedger, WorkerGroup, alltoallv_rows
from .errors import DimensionError, PlanMismatch
from .pft import PFT, gather_rows, scatter_combine
from .pipeline import regroup_inbound
from .trace import AllocTrace

INDEX_BYTES = 8
REPLICA_INDEX_FIELDS = 4


@dataclass(frozen=True)
class RbdPlan:
    """Pilot/replica split of one worker's PFT rows.

    ``s1_mapping_indices[r]`` is the position of replica ``r``'s pilot among
    the pilots bound for the same expert (0-based), which stays valid across
    the pilot exchange because pilots travel sorted by expert.
    """

    pilot_mask: np.ndarray             # [B] bool
    pilot_of: np.ndarray               # [B] PFT row of each copy's pilot
    pilot_index: np.ndarray            # [P] PFT rows of pilots, ascending (expert-sorted)
    replica_index: np.ndarray          # [R] PFT rows of replicas, ascending
    s1_mapping_indices: np.ndarray     # [R]
    replica_pilot_expert: np.ndarray   # [R]

    @property
    def num_pilots(self) -> int:
        return int(self.pilot_index.shape[0])

    @property
    def num_replicas(self) -> int:
        return int(self.replica_index.shape[0])


def _seed_entropy(seed) -> list[int]:
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


def expert_nodes(owner: np.ndarray, group: WorkerGroup) -> np.ndarray:
    return np.asarray(group.node_of, dtype=np.int64)[np.asarray(owner, dtype=np.int64)]


def select_pilots(pft: PFT, group: WorkerGroup, owner: np.ndarray,
                  seed: "int | Sequence[int]", rank: int = 0) -> RbdPlan:
    """Pick one pilot uniformly at random per (token, destination node).

    ``seed`` may be a single integer or a sequence such as ``(seed, layer, step)``;
    the worker rank is appended so each worker draws independently.
    """
    B = pft.num_rows
    rng = np.random.default_rng(_seed_entropy(seed) + [int(rank)])
    dest_node = expert_nodes(owner, group)[pft.expert_ids]
    num_nodes = max(group.node_of) + 1
    key = pft.token_ids * num_nodes + dest_node
    order = np.lexsort((rng.random(B), key))
    key_sorted = key[order]
    first = np.searchsorted(key_sorted, key_sorted, side="left")
    pilot_of = np.empty(B, dtype=np.int64)
    pilot_of[order] = order[first]
    pilot_mask = pilot_of == np.arange(B)

    pilot_index = np.flatnonzero(pilot_mask)
    pilot_expert = pft.expert_ids[pilot_index]
    rel = np.arange(pilot_index.shape[0]) - np.searchsorted(pilot_expert, pilot_expert, "left")
    rel_of_row = np.full(B, -1, dtype=np.int64)
    rel_of_row[pilot_index] = rel
    replica_index = np.flatnonzero(~pilot_mask)
    return RbdPlan(
        pilot_mask=pilot_mask,
        pilot_of=pilot_of,
        pilot_index=pilot_index,
        replica_index=replica_index,
        s1_mapping_indices=rel_of_row[pilot_of[replica_index]],
        replica_pilot_expert=pft.expert_ids[pilot_of[replica_index]],
    )


def check_plan(plan: RbdPlan, pft: PFT, group: WorkerGroup, owner: np.ndarray) -> None:
    B = pft.num_rows
    if plan.pilot_mask.shape != (B,) or plan.pilot_of.shape != (B,):
        raise PlanMismatch(f"plan covers {plan.pilot_mask.shape[0]} rows, PFT has {B}")
    nodes = expert_nodes(owner, group)
    p = plan.pilot_of
    if np.any(p < 0) or np.any(p >= B) or not np.all(plan.pilot_mask[p]):
        raise PlanMismatch("every copy must map to a pilot row")
    if np.any(pft.token_ids[p] != pft.token_ids) or \
            np.any(nodes[pft.expert_ids[p]] != nodes[pft.expert_ids]):
        raise PlanMismatch("a replica's pilot must share its token and destination node")
    if plan.replica_pilot_expert.shape[0] != plan.num_replicas:
        raise PlanMismatch("replica metadata length mismatch")


@dataclass
class RbdDispatched:
    inbound: list[PFT]
    counts1: np.ndarray                 # pilot rows, source -> pilot owner
    counts2: np.ndarray                 # replica rows, pilot owner -> expert owner
    pilot_rows: list[np.ndarray]        # per source: PFT rows of pilots in send order
    pilot_weights_at: list[np.ndarray]  # per pilot owner: weights of arrived pilots
    replica_abs: list[np.ndarray]       # per pilot owner: pilot slot of each outgoing replica
    replica_weights: list[np.ndarray]   # per pilot owner: weight of each outgoing replica
    num_pilots_at: list[int]            # per expert owner: pilot rows received in stage 1
    merge_order: list[np.ndarray]       # per expert owner: arrival -> expert order


def _meta_exchange(counts: np.ndarray, payload, group: WorkerGroup):
    W = group.num_workers
    empty = [np.empty((int(counts[i].sum()), 0)) for i in range(W)]
    moved = alltoallv_rows(empty, counts, group, None, payload=payload)
    return moved[1:]


def rbd_dispatch(pfts: Sequence[PFT], gate_outs: Sequence[np.ndarray],
                 plans: Sequence[RbdPlan], group: WorkerGroup, owner: np.ndarray,
                 ledger: CostLedger | None = None,
                 trace: AllocTrace | None = None) -> RbdDispatched:
    W = group.num_workers
    if not (len(pfts) == len(gate_outs) == len(plans) == W):
        raise DimensionError(f"expected {W} PFTs, gate outputs and plans")
    owner = np.asarray(owner, dtype=np.int64)
    E = pfts[0].num_experts
    node_of = np.asarray(group.node_of)
    dtype_bytes = ledger.dtype_bytes if ledger is not None else 2

    # Stage 0: pilot buffers and replica metadata, both ordered by destination.
    counts1 = np.zeros((W, W), dtype=np.int64)
    rcounts = np.zeros((W, W), dtype=np.int64)
    send1, pilot_rows = [], []
    p_meta = ([], [], [], [])   # expert, token, weight, source
    r_meta = ([], [], [], [], [], [])   # expert, token, weight, pilot expert, rel, source
    for i, (pft, gate_out, plan) in enumerate(zip(pfts, gate_outs, plans)):
        check_plan(plan, pft, group, owner)
        P = plan.pilot_index
        pdest = owner[pft.expert_ids[P]]
        order1 = np.argsort(pdest, kind="stable")
        rows = P[order1]
        pilot_rows.append(rows)
        counts1[i] = np.bincount(pdest, minlength=W)
        buf = gather_rows(gate_out, pft.token_ids[rows])
        if trace is not None:
            trace.record("rbd", "dispatch_in", i, buf.size)
        send1.append(buf)
        for dst, src in zip(p_meta, (pft.expert_ids[rows], pft.token_ids[rows],
                                     pft.combine_weights[rows],
                                     np.full(rows.shape[0], i, dtype=np.int64))):
            dst.append(src)

        R = plan.replica_index
        rdest = owner[plan.replica_pilot_expert]
        order_r = np.argsort(rdest, kind="stable")
        rcounts[i] = np.bincount(rdest, minlength=W)
        for dst, src in zip(r_meta, (pft.expert_ids[R], pft.token_ids[R],
                                     pft.combine_weights[R], plan.replica_pilot_expert,
                                     plan.s1_mapping_indices,
                                     np.full(R.shape[0], i, dtype=np.int64))):
            dst.append(src[order_r])

    if ledger is not None:
        meta_bytes = (INDEX_BYTES * counts1 + INDEX_BYTES * REPLICA_INDEX_FIELDS * rcounts
                      + dtype_bytes * (counts1 + rcounts))
        ledger.record("rbd_meta", meta_bytes, group)
    rr_e, rr_t, rr_w, rr_pe, rr_rel, rr_src = _meta_exchange(rcounts, r_meta, group)

    # Stage 1: pilots only across nodes.
    rows1, a_e, a_t, a_w, a_src = alltoallv_rows(send1, counts1, group, ledger,
                                                 kind="rbd_stage1", payload=p_meta)

    # Rebuild replicas from arrived pilots into a destination-ordered exchange buffer.
    counts2 = np.zeros((W, W), dtype=np.int64)
    send2, replica_abs, replica_weights = [], [], []
    s2_meta = ([], [], [], [])
    for p in range(W):
        pilot_key = a_src[p] * E + a_e[p]
        abs_idx = np.searchsorted(pilot_key, rr_src[p] * E + rr_pe[p], side="left") + rr_rel[p]
        if abs_idx.size and (abs_idx.max() >= rows1[p].shape[0]
                             or np.any(a_t[p][abs_idx] != rr_t[p])
                             or np.any(a_src[p][abs_idx] != rr_src[p])):
            raise PlanMismatch(f"replica mapping on worker {p} does not resolve to its pilot")
        q = owner[rr_e[p]]
        if np.any(node_of[q] != node_of[p]):
            raise PlanMismatch("a replica's expert must share the pilot's destination node")
        order2 = np.lexsort((rr_t[p], rr_src[p], rr_e[p], q))
        send2.append(rows1[p][abs_idx[order2]])
        replica_abs.append(abs_idx[order2])
        replica_weights.append(rr_w[p][order2])
        counts2[p] = np.bincount(q, minlength=W)
        for dst, src in zip(s2_meta, (rr_e[p], rr_t[p], rr_w[p], rr_src[p])):
            dst.append(src[order2])

    # Stage 2: replicas within each node.
    rows2, b_e, b_t, b_w, b_src = alltoallv_rows(send2, counts2, group, ledger,
                                                 kind="rbd_stage2", payload=s2_meta)

    inbound, merge_order, num_pilots_at = [], [], []
    for q in range(W):
        e = np.concatenate((a_e[q], b_e[q]))
        t = np.concatenate((a_t[q], b_t[q]))
        w = np.concatenate((a_w[q], b_w[q]))
        s = np.concatenate((a_src[q], b_src[q]))
        order = regroup_inbound(e, s, t)
        x = np.concatenate((rows1[q], rows2[q]))[order]
        merge_order.append(order)
        num_pilots_at.append(rows1[q].shape[0])
        inbound.append(PFT(token_ids=t[order], expert_ids=e[order],
                           tokens_per_expert=np.bincount(e, minlength=E).astype(np.int64),
                           combine_weights=w[order], x=x, source_ranks=s[order]))
    return RbdDispatched(inbound=inbound, counts1=counts1, counts2=counts2,
                         pilot_rows=pilot_rows, pilot_weights_at=list(a_w),
                         replica_abs=replica_abs, replica_weights=replica_weights,
                         num_pilots_at=num_pilots_at, merge_order=merge_order)


def rbd_combine(inbound: Sequence[PFT], dispatched: RbdDispatched, originals: Sequence[PFT],
                seq_lens: Sequence[int], group: WorkerGroup,
                ledger: CostLedger | None = None) -> list[np.ndarray]:
    """Reverse of :func:`rbd_dispatch`.

    Replica outputs return to their pilot's worker over intra-node links,
    where every copy is scaled by its combine weight and folded into its
    pilot row. Only the merged pilot rows cross nodes back to the source.
    """
    W = group.num_workers
    pilot_out, replica_out = [], []
    for q in range(W):
        arrival = np.empty_like(inbound[q].x)
        arrival[dispatched.merge_order[q]] = inbound[q].x
        n = dispatched.num_pilots_at[q]
        pilot_out.append(arrival[:n])
        replica_out.append(arrival[n:])
    back2 = alltoallv_rows(replica_out, dispatched.counts2.T.copy(), group, ledger,
                           kind="rbd_combine_stage2")
    merged = []
    for p in range(W):
        rows = pilot_out[p] * dispatched.pilot_weights_at[p][:, None]
        _kernels.active.scatter_add_rows(rows, back2[p], dispatched.replica_abs[p],
                                         dispatched.replica_weights[p])
        merged.append(rows)
    back1 = alltoallv_rows(merged, dispatched.counts1.T.copy(), group, ledger,
                           kind="rbd_combine_stage1")
    outputs = []
    for i, pft in enumerate(originals):
        rows = dispatched.pilot_rows[i]
        outputs.append(scatter_combine(back1[i], pft.token_ids[rows], 1.0, seq_lens[i]))
    return outputs


def routing_matrix(pft: PFT, num_tokens: int, k: int) -> np.ndarray:
    """``[S, k]`` expert ids of the retained copies, ``-1`` where a copy was dropped."""
    out = np.full((num_tokens, k), -1, dtype=np.int64)
    order = np.argsort(pft.token_ids, kind="stable")
    t = pft.token_ids[order]
    slot = np.arange(t.shape[0]) - np.searchsorted(t, t, side="left")
    out[t, slot] = pft.expert_ids[order]
    return out


def redundancy_counts(top_experts: np.ndarray, expert_node: np.ndarray,
                      src_node: int | None = None, inter_only: bool = False) -> tuple[int, int]:
    """``(redundant, total)`` copies; ``-1`` entries in ``top_experts`` are skipped.

    A copy is redundant when an earlier copy of the same token already targets
    the same destination node. With ``inter_only``, copies whose destination
    node is ``src_node`` are left out entirely.
    """
    top_experts = np.asarray(top_experts, dtype=np.int64)
    expert_node = np.asarray(expert_node, dtype=np.int64)
    nodes = np.where(top_experts >= 0, expert_node[np.maximum(top_experts, 0)], -1)
    if inter_only:
        if src_node is None:
            raise ValueError("inter_only needs src_node")
        nodes = np.where(nodes == src_node, -1, nodes)
    total = int(np.count_nonzero(nodes >= 0))
    distinct = int(_kernels.active.count_distinct_per_row(nodes).sum())
    return total - distinct, total


def redundancy_rate(top_experts: np.ndarray, expert_node: np.ndarray,
                    src_node: int | None = None, inter_only: bool = False) -> float:
    """Fraction of dispatched copies that duplicate an earlier copy to the same node."""
    redundant, total = redundancy_counts(top_experts, expert_node, src_node, inter_only)
    return redundant / total if total else 0.0


def uniform_routing(rng: np.random.Generator, num_tokens: int, num_experts: int,
                    k: int) -> np.ndarray:
    """``k`` distinct experts per token, uniformly at random."""
    return np.argpartition(rng.random((num_tokens, num_experts)), k - 1, axis=1)[:, :k]


def ep_first_expert_nodes(num_experts: int, ep_size: int, gpus_per_node: int) -> np.ndarray:
    """Node of each expert for one EP group laid out on consecutive workers."""
    rank = np.arange(num_experts) // (num_experts // ep_size)
    return rank // gpus_per_node


def redundancy_sweep(num_experts: int, k: int, gpus_per_node: int, ep_sizes: Sequence[int],
                     tokens: int, seeds: Sequence[int]) -> list[dict]:
    """Monte Carlo redundancy rate under uniform routing for each EP size.

    The same routing draws are reused across EP sizes.
    """
    draws = [uniform_routing(np.random.default_rng(s), tokens, num_experts, k) for s in seeds]
    rows = []
    for ep in ep_sizes:
        nodes = ep_first_expert_nodes(num_experts, ep, gpus_per_node)
        redundant = total = 0
        for top in draws:
            r, t = redundancy_counts(top, nodes)
            redundant += r
            total += t
        rows.append({
            "ep_size": int(ep),
            "experts_per_node": int(np.bincount(nodes).max()),
            "samples": tokens * len(draws),
            "redundancy_rate": redundant / total,
        })
    return rows
