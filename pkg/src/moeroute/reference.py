"""Zero-padded MoE forward pass (mask + fixed-capacity expert buffers).

This is the correctness oracle for the padding-free pipeline and the baseline
for padded communication and memory costs. It is written independently of
:mod:`moeroute.pft`: the capacity rule is re-derived here with plain loops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .collectives import CostLedger, WorkerGroup, alltoallv_rows
from .errors import DimensionError, ValidationError
from .gating import gate_forward
from .params import MoeParams, expert_mlp
from .trace import AllocTrace


@dataclass(frozen=True)
class DispatchMask:
    mask: np.ndarray      # [S, E, C] of 0/1
    weights: np.ndarray   # [S, E, C] combine weight at each occupied slot
    capacity: int

    @property
    def slots_used(self) -> np.ndarray:
        return self.mask.sum(axis=(0, 2))


def build_dispatch_mask(top_experts: np.ndarray, combine_weights: np.ndarray,
                        max_token_count: int, num_experts: int) -> DispatchMask:
    top_experts = np.asarray(top_experts)
    combine_weights = np.asarray(combine_weights, dtype=np.float64)
    if top_experts.ndim != 2 or top_experts.shape != combine_weights.shape:
        raise ValidationError("top_experts and combine_weights must both be [S, k]")
    if max_token_count < 1:
        raise ValidationError("max_token_count must be ≥ 1")
    S, k = top_experts.shape
    C = int(max_token_count)
    candidates: list[list[tuple[float, int, int]]] = [[] for _ in range(num_experts)]
    for t in range(S):
        for j in range(k):
            e = int(top_experts[t, j])
            if not 0 <= e < num_experts:
                raise ValidationError(f"expert ids must lie in [0, {num_experts})")
            candidates[e].append((-float(combine_weights[t, j]), t * k + j, t))
    mask = np.zeros((S, num_experts, C), dtype=np.int8)
    weights = np.zeros((S, num_experts, C), dtype=np.float64)
    for e, cands in enumerate(candidates):
        kept = sorted(cands)[:C]
        for slot, (neg_w, _, t) in enumerate(sorted(kept, key=lambda c: c[1])):
            mask[t, e, slot] = 1
            weights[t, e, slot] = -neg_w
    return DispatchMask(mask=mask, weights=weights, capacity=C)


def padded_moe_forward(tokens: Sequence[np.ndarray], params: MoeParams, k: int,
                       max_token_count: int, group: WorkerGroup, owner: np.ndarray,
                       ledger: CostLedger | None = None,
                       trace: AllocTrace | None = None) -> list[np.ndarray]:
    """GShard-style forward over ``group``; ``tokens[i]`` is worker ``i``'s ``[S_i, H]`` batch.

    ``owner[e]`` is the rank that hosts expert ``e``. Every worker sends an
    ``[E_local(j), C, H]`` block to every rank ``j`` regardless of routing.
    """
    W = group.num_workers
    if len(tokens) != W:
        raise DimensionError(f"expected {W} token batches, got {len(tokens)}")
    E, H = params.num_experts, params.model_dim
    C = int(max_token_count)
    owner = np.asarray(owner, dtype=np.int64)
    if owner.shape != (E,):
        raise DimensionError(f"owner must have one entry per expert ({E})")
    by_dest = np.argsort(owner, kind="stable")   # experts grouped by owner, ascending id
    local = [np.flatnonzero(owner == j) for j in range(W)]
    counts = np.array([[len(local[j]) * C for j in range(W)] for _ in range(W)],
                      dtype=np.int64)

    masks, send = [], []
    for i, x in enumerate(tokens):
        g = gate_forward(x, params.gate, k)
        dm = build_dispatch_mask(g.top_experts, g.combine_weights, C, E)
        masks.append(dm)
        dispatched = np.einsum("sec,sh->ech", dm.mask.astype(np.float64), g.gate_out)
        if trace is not None:
            trace.record("padded", "dispatch_in", i, dispatched.size)
        send.append(dispatched[by_dest].reshape(E * C, H))
    recv = alltoallv_rows(send, counts, group, ledger, kind="padded_dispatch")

    outs = []
    for j in range(W):
        blocks = recv[j].reshape(W, len(local[j]), C, H)
        done = np.empty_like(blocks)
        for li, e in enumerate(local[j]):
            done[:, li] = expert_mlp(blocks[:, li].reshape(W * C, H), params.w1[e],
                                     params.w2[e]).reshape(W, C, H)
        outs.append(done.reshape(W * len(local[j]) * C, H))
    back = alltoallv_rows(outs, counts.T.copy(), group, ledger, kind="padded_combine")

    results = []
    for i, dm in enumerate(masks):
        expert_out = np.empty((E, C, H))
        expert_out[by_dest] = back[i].reshape(E, C, H)
        results.append(np.einsum("sec,ech->sh", dm.weights, expert_out))
    return results
