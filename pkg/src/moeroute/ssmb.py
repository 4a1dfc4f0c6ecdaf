"""Sequence-sharded MoE block.

Ranks of a tensor-parallel group all hold the same sequence. Inside the MoE
block each rank keeps only its contiguous slice of the sequence, runs the
padding-free MoE layer on it as an EP rank, and an all-gather restores the
full sequence on every rank afterwards.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .collectives import CostLedger, WorkerGroup, allgather_rows
from .errors import DimensionError, ValidationError
from .params import MoeParams
from .pipeline import pf_moe_forward
from .trace import AllocTrace


def shard_bounds(S: int, G: int) -> np.ndarray:
    """Row offsets of ``G`` contiguous shards; the last shard takes any remainder."""
    if G > S:
        raise ValidationError(f"ssmb_group ({G}) must be ≤ seq_len ({S})")
    if G < 1:
        raise ValidationError("ssmb_group must be ≥ 1")
    base = S // G
    bounds = np.arange(G + 1) * base
    bounds[-1] = S
    return bounds


def ssmb_forward(sequences: "np.ndarray | Sequence[np.ndarray]", G: int, params: MoeParams,
                 k: int, max_token_count: int, group: WorkerGroup, owner: np.ndarray,
                 ledger: CostLedger | None = None, trace: AllocTrace | None = None,
                 rbd_seed: "int | Sequence[int] | None" = None) -> list[np.ndarray]:
    """Forward one MoE block with the sequence sharded over groups of ``G`` ranks.

    ``group`` has ``W`` ranks split into ``W // G`` consecutive TP groups;
    ``sequences[t]`` is the ``[S, H]`` sequence held by TP group ``t`` (a
    single array is accepted when ``W == G``). Returns each rank's full output.
    """
    W = group.num_workers
    if G < 1 or W % G:
        raise ValidationError(f"ssmb_group ({G}) must divide the group size ({W})")
    if isinstance(sequences, np.ndarray) and sequences.ndim == 2:
        sequences = [sequences]
    if len(sequences) != W // G:
        raise DimensionError(f"expected {W // G} sequences, got {len(sequences)}")

    shards, bounds = [], []
    for seq in sequences:
        b = shard_bounds(seq.shape[0], G)
        bounds.append(b)
        shards.extend(seq[b[g]:b[g + 1]] for g in range(G))
    partial = pf_moe_forward(shards, params, k, max_token_count, group, owner, ledger, trace,
                             rbd_seed=rbd_seed)
    outputs: list[np.ndarray] = []
    for t in range(W // G):
        ranks = range(t * G, (t + 1) * G)
        outputs.extend(allgather_rows([partial[r] for r in ranks], group.subgroup(ranks),
                                      ledger, kind="ssmb_allgather"))
    return outputs
