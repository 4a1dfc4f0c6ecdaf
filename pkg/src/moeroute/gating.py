"""Linear top-k router."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class GateOutput:
    top_experts: np.ndarray      # [S, k] int64
    combine_weights: np.ndarray  # [S, k] raw softmax probabilities of the selected experts
    gate_out: np.ndarray         # [S, H] the input tokens, passed through
    probs: np.ndarray            # [S, E] full softmax


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def top_k(probs: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the k largest entries per row; ties go to the lower id."""
    order = np.argsort(-probs, axis=-1, kind="stable")[:, :k]
    return order.astype(np.int64), np.take_along_axis(probs, order, axis=-1)


def gate_forward(tokens: np.ndarray, gate_weights: np.ndarray, k: int) -> GateOutput:
    tokens = np.asarray(tokens, dtype=np.float64)
    gate_weights = np.asarray(gate_weights, dtype=np.float64)
    if tokens.ndim != 2 or gate_weights.ndim != 2:
        raise DimensionError("tokens and gate_weights must be 2-D")
    if tokens.shape[1] != gate_weights.shape[0]:
        raise DimensionError(
            f"tokens have H={tokens.shape[1]} but gate_weights expect H={gate_weights.shape[0]}")
    E = gate_weights.shape[1]
    if not 1 <= k <= E:
        raise DimensionError(f"k={k} must lie in [1, {E}]")
    probs = softmax(tokens @ gate_weights)
    top_experts, weights = top_k(probs, k)
    return GateOutput(top_experts=top_experts, combine_weights=weights, gate_out=tokens,
                      probs=probs)
