"""Padding-free MoE forward pass: gate, build PFT, dispatch, per-expert MLP, combine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .collectives import CostLedger, WorkerGroup, alltoall_counts, alltoallv_rows
from .errors import DimensionError
from .gating import gate_forward
from .params import MoeParams, expert_mlp
from .pft import PFT, gather_rows, pft_construct, scatter_combine
from .trace import AllocTrace


@dataclass
class Dispatched:
    """Inbound expert buffers plus what the combine step needs to undo the routing.

    ``inbound[j]`` holds worker ``j``'s rows grouped by expert id, then by
    source rank, then by source token. ``send_order[i]`` permutes worker
    ``i``'s PFT rows into destination order and ``recv_order[j]`` permutes
    arrival order into expert order.
    """

    inbound: list[PFT]
    send_counts: np.ndarray
    send_order: list[np.ndarray]
    recv_order: list[np.ndarray]


def _owner_array(owner, num_experts: int, W: int) -> np.ndarray:
    owner = np.asarray(owner, dtype=np.int64)
    if owner.shape != (num_experts,):
        raise DimensionError(f"owner must have one entry per expert ({num_experts})")
    if owner.size and (owner.min() < 0 or owner.max() >= W):
        raise DimensionError(f"owner ranks must lie in [0, {W})")
    return owner


def regroup_inbound(expert_ids, source_ranks, token_ids) -> np.ndarray:
    """Permutation sorting inbound rows by (expert, source rank, source token)."""
    return np.lexsort((token_ids, source_ranks, expert_ids))


def pf_dispatch(pfts: Sequence[PFT], gate_outs: Sequence[np.ndarray], group: WorkerGroup,
                owner: np.ndarray, ledger: CostLedger | None = None,
                trace: AllocTrace | None = None) -> Dispatched:
    W = group.num_workers
    if len(pfts) != W or len(gate_outs) != W:
        raise DimensionError(f"expected {W} PFTs and gate outputs")
    E = pfts[0].num_experts
    owner = _owner_array(owner, E, W)

    send_order, send_bufs, counts = [], [], np.zeros((W, W), dtype=np.int64)
    meta_e, meta_t, meta_w, meta_src = [], [], [], []
    for i, (pft, gate_out) in enumerate(zip(pfts, gate_outs)):
        dest = owner[pft.expert_ids]
        order = np.argsort(dest, kind="stable")
        send_order.append(order)
        counts[i] = np.bincount(dest, minlength=W)
        buf = gather_rows(gate_out, pft.token_ids[order])
        if trace is not None:
            trace.record("pf", "dispatch_in", i, buf.size)
        send_bufs.append(buf)
        meta_e.append(pft.expert_ids[order])
        meta_t.append(pft.token_ids[order])
        meta_w.append(pft.combine_weights[order])
        meta_src.append(np.full(pft.num_rows, i, dtype=np.int64))

    # Row counts go first so receivers can size their buffers.
    alltoall_counts(counts)
    rows, r_e, r_t, r_w, r_src = alltoallv_rows(
        send_bufs, counts, group, ledger, kind="pf_dispatch",
        payload=(meta_e, meta_t, meta_w, meta_src))

    inbound, recv_order = [], []
    for j in range(W):
        order = regroup_inbound(r_e[j], r_src[j], r_t[j])
        recv_order.append(order)
        x = rows[j][order]
        if trace is not None:
            trace.record("pf", "dispatch_out", j, x.size)
        inbound.append(PFT(token_ids=r_t[j][order], expert_ids=r_e[j][order],
                           tokens_per_expert=np.bincount(r_e[j], minlength=E).astype(np.int64),
                           combine_weights=r_w[j][order], x=x, source_ranks=r_src[j][order]))
    return Dispatched(inbound, counts, send_order, recv_order)


def sequential_expert_mlp(pft: PFT, w1: np.ndarray, w2: np.ndarray,
                          trace: AllocTrace | None = None, rank: int = 0) -> PFT:
    """Run each expert's two-layer MLP over its contiguous segment of ``pft.x``.

    ``w1``/``w2`` are indexed by global expert id; experts with no rows are skipped.
    """
    x = pft.x
    if x is None or x.shape[0] != int(pft.tokens_per_expert.sum()):
        raise DimensionError("pft.x rows must equal sum(tokens_per_expert)")
    if w1.shape[0] < pft.num_experts or w2.shape[0] < pft.num_experts:
        raise DimensionError("expert weights do not cover every expert")
    if x.shape[1] != w1.shape[1] or w1.shape[2] != w2.shape[1]:
        raise DimensionError(f"x {x.shape} incompatible with w1 {w1.shape}, w2 {w2.shape}")
    bounds = pft.segment_bounds()
    out = np.empty((x.shape[0], w2.shape[2]), dtype=np.float64)
    for e in np.flatnonzero(pft.tokens_per_expert):
        lo, hi = bounds[e], bounds[e + 1]
        out[lo:hi] = expert_mlp(x[lo:hi], w1[e], w2[e])
    if trace is not None:
        trace.record("pf", "interm", rank, x.shape[0] * w1.shape[2])
    return pft.with_x(out)


def pf_combine(inbound: Sequence[PFT], dispatched: Dispatched, originals: Sequence[PFT],
               seq_lens: Sequence[int], group: WorkerGroup, ledger: CostLedger | None = None,
               trace: AllocTrace | None = None) -> list[np.ndarray]:
    """Send expert outputs home and scatter them, weighted, into ``[S_i, H]``."""
    W = group.num_workers
    back_bufs = []
    for j in range(W):
        arrival = np.empty_like(inbound[j].x)
        arrival[dispatched.recv_order[j]] = inbound[j].x
        back_bufs.append(arrival)
    back = alltoallv_rows(back_bufs, dispatched.send_counts.T.copy(), group, ledger,
                          kind="pf_combine")
    outputs = []
    for i, pft in enumerate(originals):
        combine_in = np.empty_like(back[i])
        combine_in[dispatched.send_order[i]] = back[i]
        if trace is not None:
            trace.record("pf", "combine_in", i, combine_in.size)
        outputs.append(scatter_combine(combine_in, pft.token_ids, pft.combine_weights,
                                       seq_lens[i]))
    return outputs


def route_tokens(tokens: Sequence[np.ndarray], params: MoeParams, k: int,
                 max_token_count: int) -> tuple[list[np.ndarray], list[PFT]]:
    """Gate every worker's batch and build its PFT."""
    gate_outs, pfts = [], []
    for x in tokens:
        g = gate_forward(x, params.gate, k)
        gate_outs.append(g.gate_out)
        pfts.append(pft_construct(max_token_count, g.top_experts, g.combine_weights,
                                  params.num_experts))
    return gate_outs, pfts


def pf_moe_forward(tokens: Sequence[np.ndarray], params: MoeParams, k: int,
                   max_token_count: int, group: WorkerGroup, owner: np.ndarray,
                   ledger: CostLedger | None = None, trace: AllocTrace | None = None,
                   rbd_seed: "int | Sequence[int] | None" = None) -> list[np.ndarray]:
    """Padding-free MoE layer over ``group``; ``tokens[i]`` is worker ``i``'s batch.

    With ``rbd_seed`` set, dispatch and combine use the two-stage
    redundancy-bypassing path seeded by it.
    """
    if isinstance(tokens, np.ndarray) and tokens.ndim == 2:
        tokens = [tokens]
    if len(tokens) != group.num_workers:
        raise DimensionError(f"expected {group.num_workers} token batches, got {len(tokens)}")
    gate_outs, pfts = route_tokens(tokens, params, k, max_token_count)
    seq_lens = [x.shape[0] for x in gate_outs]
    if rbd_seed is None:
        dispatched = pf_dispatch(pfts, gate_outs, group, owner, ledger, trace)
        done = [sequential_expert_mlp(p, params.w1, params.w2, trace, j)
                for j, p in enumerate(dispatched.inbound)]
        return pf_combine(done, dispatched, pfts, seq_lens, group, ledger, trace)

    from .rbd import rbd_combine, rbd_dispatch, select_pilots

    plans = [select_pilots(p, group, owner, rbd_seed, rank=i) for i, p in enumerate(pfts)]
    dispatched = rbd_dispatch(pfts, gate_outs, plans, group, owner, ledger, trace)
    done = [sequential_expert_mlp(p, params.w1, params.w2, trace, j)
            for j, p in enumerate(dispatched.inbound)]
    return rbd_combine(done, dispatched, pfts, seq_lens, group, ledger)
