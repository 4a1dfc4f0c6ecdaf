"""Deterministic simulator and planner for padding-free, hierarchy-aware MoE token routing."""

from .collectives import (CostLedger, WorkerGroup, allgather_rows, alltoall_counts,
                          alltoallv_rows)
from .config import (NAMED_MODELS, ModelConfig, Placement, RunConfig, Strategy, Topology,
                     load_config, place_experts, placement_cost)
from .errors import (CountMismatch, DimensionError, MoeRouteError, ParseError, PlanMismatch,
                     ValidationError)
from .gating import GateOutput, gate_forward
from .params import MoeParams
from .pft import PFT, gather_rows, pft_construct, scatter_combine
from .pipeline import pf_combine, pf_dispatch, pf_moe_forward, sequential_expert_mlp
from .planner import (activation_sizes, advantage_region, buffer_footprint, ssmb_saving,
                      ted_min_cost)
from .rbd import rbd_combine, rbd_dispatch, redundancy_rate, select_pilots
from .reference import build_dispatch_mask, padded_moe_forward
from .ssmb import ssmb_forward
from .trace import AllocTrace

__version__ = "0.1.0"

__all__ = [
    "AllocTrace", "CostLedger", "CountMismatch", "DimensionError", "GateOutput", "ModelConfig",
    "MoeParams", "MoeRouteError", "NAMED_MODELS", "PFT", "ParseError", "Placement",
    "PlanMismatch", "RunConfig", "Strategy", "Topology", "ValidationError", "WorkerGroup",
    "activation_sizes", "advantage_region", "allgather_rows", "alltoall_counts",
    "alltoallv_rows", "buffer_footprint", "build_dispatch_mask", "gate_forward", "gather_rows",
    "load_config", "padded_moe_forward", "pf_combine", "pf_dispatch", "pf_moe_forward",
    "pft_construct", "place_experts", "placement_cost", "rbd_combine", "rbd_dispatch",
    "redundancy_rate", "scatter_combine", "select_pilots", "sequential_expert_mlp",
    "ssmb_forward", "ssmb_saving", "ted_min_cost",
]
