"""Padding-free token buffers.

A :class:`PFT` keeps only the routed token copies that survived capacity
dropping, sorted by expert, together with the routing arrays needed to send
them to their experts and bring them back.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ValidationError


@dataclass
class PFT:
    token_ids: np.ndarray         # [B] source token row of each copy
    expert_ids: np.ndarray        # [B] non-decreasing
    tokens_per_expert: np.ndarray  # [E]
    combine_weights: np.ndarray   # [B]
    x: np.ndarray | None = None   # [B, H] once rows are materialized
    source_ranks: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_rows(self) -> int:
        return int(self.token_ids.shape[0])

    @property
    def num_experts(self) -> int:
        return int(self.tokens_per_expert.shape[0])

    def segment_bounds(self) -> np.ndarray:
        """Row offsets of each expert's segment, length ``E + 1``."""
        return np.concatenate(([0], np.cumsum(self.tokens_per_expert)))

    def with_x(self, x: np.ndarray) -> "PFT":
        return PFT(self.token_ids, self.expert_ids, self.tokens_per_expert,
                   self.combine_weights, x, self.source_ranks)


def _check_routing(top_experts, combine_weights, num_experts):
    top_experts = np.asarray(top_experts)
    combine_weights = np.asarray(combine_weights, dtype=np.float64)
    if top_experts.ndim != 2 or top_experts.shape != combine_weights.shape:
        raise ValidationError(
            f"top_experts {top_experts.shape} and combine_weights {combine_weights.shape} "
            "must both be [S, k]")
    if top_experts.size and (top_experts.min() < 0 or top_experts.max() >= num_experts):
        raise ValidationError(f"expert ids must lie in [0, {num_experts})")
    srt = np.sort(top_experts, axis=1)
    if np.any(srt[:, 1:] == srt[:, :-1]):
        raise ValidationError("each token must route to k distinct experts")
    return top_experts.astype(np.int64), combine_weights


def retained_copies(top_experts: np.ndarray, combine_weights: np.ndarray, num_experts: int,
                    max_token_count: int, method: str = "sort") -> np.ndarray:
    """Boolean mask over flattened ``[S*k]`` copies that survive capacity dropping.

    Each expert keeps its ``max_token_count`` copies with the highest weight;
    equal weights favour the lower flattened index. ``method="sort"`` ranks all
    copies by weight and counts per expert in that order; ``method="direct"``
    selects the top copies of each expert independently.
    """
    flat_e = top_experts.reshape(-1)
    flat_w = combine_weights.reshape(-1)
    n = flat_e.shape[0]
    keep = np.zeros(n, dtype=bool)
    if method == "sort":
        by_weight = np.argsort(-flat_w, kind="stable")
        kept = _kernels.active.capacity_keep(flat_e[by_weight], num_experts, max_token_count)
        keep[by_weight[kept]] = True
    elif method == "direct":
        idx = np.arange(n)
        order = np.lexsort((idx, -flat_w, flat_e))
        e_sorted = flat_e[order]
        starts = np.searchsorted(e_sorted, e_sorted, side="left")
        keep[order[(idx - starts) < max_token_count]] = True
    else:
        raise ValueError(f"unknown method {method!r}")
    return keep


def pft_construct(max_token_count: int, top_experts: np.ndarray, combine_weights: np.ndarray,
                  num_experts: int, method: str = "sort") -> PFT:
    """Build the routing arrays of a PFT (``x`` is left empty)."""
    if isinstance(max_token_count, bool) or int(max_token_count) != max_token_count \
            or max_token_count < 1:
        raise ValidationError("max_token_count must be ≥ 1")
    top_experts, combine_weights = _check_routing(top_experts, combine_weights, num_experts)
    k = top_experts.shape[1]
    keep = retained_copies(top_experts, combine_weights, num_experts, int(max_token_count),
                           method)
    flat_e = top_experts.reshape(-1)
    by_expert = np.argsort(flat_e, kind="stable")
    by_expert = by_expert[keep[by_expert]]
    expert_ids = flat_e[by_expert]
    return PFT(
        token_ids=(by_expert // k).astype(np.int64),
        expert_ids=expert_ids.astype(np.int64),
        tokens_per_expert=np.bincount(expert_ids, minlength=num_experts).astype(np.int64),
        combine_weights=combine_weights.reshape(-1)[by_expert],
    )


def gather_rows(gate_out: np.ndarray, token_ids: np.ndarray) -> np.ndarray:
    """``out[i] = gate_out[token_ids[i]]``."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    S = gate_out.shape[0]
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= S):
        raise IndexError(f"token id out of range [0, {S})")
    return _kernels.active.gather_rows(gate_out, token_ids)


def scatter_combine(combine_in: np.ndarray, token_ids: np.ndarray,
                    combine_weights: np.ndarray, S: int) -> np.ndarray:
    """Weighted scatter-add of buffer rows back to ``[S, H]`` in ascending row order."""
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= S):
        raise IndexError(f"token id out of range [0, {S})")
    weights = np.broadcast_to(np.asarray(combine_weights, dtype=np.float64),
                              token_ids.shape)
    out = np.zeros((S, combine_in.shape[1]), dtype=np.float64)
    return _kernels.active.scatter_add_rows(out, combine_in, token_ids, weights)
