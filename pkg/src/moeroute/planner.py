"""Analytical memory models for expert-specialized MoE layers.

All byte counts assume ``dtype_bytes`` per element (2 for half precision).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction

from .config import ModelConfig
from .trace import AllocTrace


def _exact(value: Fraction) -> "int | float":
    return int(value) if value.denominator == 1 else float(value)


@dataclass(frozen=True)
class ActivationReport:
    dispatch: "int | float"
    combine: "int | float"
    interm0: "int | float"
    interm1: "int | float"
    with_capacity: bool

    @property
    def total(self) -> "int | float":
        return self.dispatch + self.combine + self.interm0 + self.interm1


def activation_sizes(cfg: ModelConfig, apply_capacity: bool = False) -> ActivationReport:
    """Bytes of the four per-layer MoE activations.

    Dispatch and combine buffers hold ``k*b*S`` rows of width ``H``; the two
    intermediates hold ``k*b*S`` rows of width ``H_FFN``. ``apply_capacity``
    scales all four by the capacity factor.
    """
    rows = Fraction(cfg.top_k * cfg.micro_batch * cfg.seq_len * cfg.dtype_bytes)
    if apply_capacity:
        rows *= Fraction(cfg.capacity_factor)
    outer = _exact(rows * cfg.model_dim)
    inner = _exact(rows * cfg.ffn_dim)
    return ActivationReport(outer, outer, inner, inner, apply_capacity)


def ssmb_saving(G: int, c: float, k: int, S: int, H: int) -> "int | float":
    """Activation bytes saved per device by sharding the MoE block over ``G`` ranks.

    ``4*c*k*S*H*(G-1)/G``; ``S`` is the per-device token count (batch folded in).
    """
    if G < 1:
        raise ValueError("G must be ≥ 1")
    return _exact(4 * Fraction(c) * k * S * H * Fraction(G - 1, G))


def ted_min_cost(G: int, H_FFN: int, H: int) -> "int | float":
    """Smallest extra model-state bytes of keeping experts unsliced vs TP=G: ``8*H_FFN*H*(G-1)/G``."""
    if G < 1:
        raise ValueError("G must be ≥ 1")
    return _exact(8 * H_FFN * H * Fraction(G - 1, G))


class Region(str, enum.Enum):
    SSMB = "SSMB"
    TED = "TED"
    TIE = "Tie"


def advantage_threshold(S: int, c: float) -> Fraction:
    return Fraction(2) / (Fraction(c) * S)


def advantage_region(k: int, H_FFN: int, S: int, c: float) -> Region:
    """SSMB saves more memory than TED exactly when ``k/H_FFN > 2/(c*S)``."""
    r = Fraction(k, H_FFN)
    threshold = advantage_threshold(S, c)
    if r > threshold:
        return Region.SSMB
    if r < threshold:
        return Region.TED
    return Region.TIE


@dataclass(frozen=True)
class Footprint:
    pf_elements: int
    padded_elements: int

    @property
    def ratio(self) -> float:
        return self.padded_elements / self.pf_elements if self.pf_elements else float("inf")


def buffer_footprint(trace: AllocTrace) -> Footprint:
    """Dispatch-buffer elements allocated by each pipeline, summed over ranks."""
    return Footprint(pf_elements=trace.total("pf", "dispatch_in"),
                     padded_elements=trace.total("padded", "dispatch_in"))


PLAN_COLUMNS = ("model_name", "r", "threshold", "region", "ssmb_saving_bytes",
                "ted_min_cost_bytes")


def plan_row(cfg: ModelConfig, G: int) -> dict:
    S = cfg.seq_len * cfg.micro_batch
    return {
        "model_name": cfg.name,
        "r": float(Fraction(cfg.top_k, cfg.ffn_dim)),
        "threshold": float(advantage_threshold(S, cfg.capacity_factor)),
        "region": advantage_region(cfg.top_k, cfg.ffn_dim, S, cfg.capacity_factor).value,
        "ssmb_saving_bytes": ssmb_saving(G, cfg.capacity_factor, cfg.top_k, S, cfg.model_dim),
        "ted_min_cost_bytes": ted_min_cost(G, cfg.ffn_dim, cfg.model_dim),
    }
