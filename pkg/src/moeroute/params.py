from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class MoeParams:
    """Router and expert weights shared by every worker.

    ``w1[e]`` is ``[H, H_FFN]`` and ``w2[e]`` is ``[H_FFN, H]``. Experts apply
    ``relu(x @ w1[e]) @ w2[e]`` with no biases.
    """

    gate: np.ndarray  # [H, E]
    w1: np.ndarray    # [E, H, H_FFN]
    w2: np.ndarray    # [E, H_FFN, H]

    def __post_init__(self) -> None:
        H, E = self.gate.shape
        if self.w1.shape[:2] != (E, H) or self.w2.shape[0] != E or self.w2.shape[2] != H \
                or self.w2.shape[1] != self.w1.shape[2]:
            raise DimensionError(
                f"inconsistent weights: gate {self.gate.shape}, w1 {self.w1.shape}, "
                f"w2 {self.w2.shape}")

    @property
    def num_experts(self) -> int:
        return self.gate.shape[1]

    @property
    def model_dim(self) -> int:
        return self.gate.shape[0]

    @classmethod
    def random(cls, rng: np.random.Generator, num_experts: int, model_dim: int,
               ffn_dim: int) -> "MoeParams":
        gate = rng.uniform(-0.1, 0.1, size=(model_dim, num_experts))
        w1 = rng.uniform(-1.0, 1.0, size=(num_experts, model_dim, ffn_dim)) / np.sqrt(model_dim)
        w2 = rng.uniform(-1.0, 1.0, size=(num_experts, ffn_dim, model_dim)) / np.sqrt(ffn_dim)
        return cls(gate=gate, w1=w1, w2=w2)

    def permuted(self, perm: np.ndarray) -> "MoeParams":
        """Relabel experts so that new expert ``i`` is old expert ``perm[i]``."""
        return MoeParams(gate=self.gate[:, perm], w1=self.w1[perm], w2=self.w2[perm])


def expert_mlp(x: np.ndarray, w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    return np.maximum(x @ w1, 0.0) @ w2
