import math

import numpy as np
import pytest

from moeroute.errors import DimensionError
from moeroute.gating import gate_forward, softmax


def scalar_gate(tokens, gate, k):
    """Independent per-element evaluation: plain Python floats, no numpy reductions."""
    experts, weights = [], []
    for row in tokens.tolist():
        logits = [sum(row[h] * gate[h][e] for h in range(len(row))) for e in range(len(gate[0]))]
        m = max(logits)
        ex = [math.exp(v - m) for v in logits]
        z = sum(ex)
        probs = [v / z for v in ex]
        ranked = sorted(range(len(probs)), key=lambda e: (-probs[e], e))[:k]
        experts.append(ranked)
        weights.append([probs[e] for e in ranked])
    return experts, weights


def test_full_support_sums_to_one(rng):
    out = gate_forward(rng.normal(size=(5, 3)), rng.normal(size=(3, 6)), k=6)
    assert sorted(out.top_experts[0].tolist()) == list(range(6))
    assert np.allclose(out.combine_weights.sum(axis=1), 1.0, atol=1e-6)


def test_tie_picks_lower_expert():
    out = gate_forward(np.zeros((1, 2)), np.zeros((2, 2)), k=1)
    assert out.probs.tolist() == [[0.5, 0.5]]
    assert out.top_experts.tolist() == [[0]]


def test_seeded_2x2_matches_scalar_oracle():
    r = np.random.default_rng(2)
    tokens, gate = r.normal(size=(2, 2)), r.normal(size=(2, 2))
    for k in (1, 2):
        out = gate_forward(tokens, gate, k)
        experts, weights = scalar_gate(tokens, gate.tolist(), k)
        assert out.top_experts.tolist() == experts
        assert np.max(np.abs(out.combine_weights - np.array(weights))) <= 1e-12


def test_larger_instance_matches_scalar_oracle(rng):
    tokens, gate = rng.normal(size=(17, 5)), rng.normal(size=(5, 7))
    out = gate_forward(tokens, gate, 3)
    experts, weights = scalar_gate(tokens, gate.tolist(), 3)
    assert out.top_experts.tolist() == experts
    assert np.max(np.abs(out.combine_weights - np.array(weights))) <= 1e-12


def test_row_permutation_equivariance(rng):
    tokens, gate = rng.normal(size=(9, 4)), rng.normal(size=(4, 5))
    perm = rng.permutation(9)
    a = gate_forward(tokens, gate, 2)
    b = gate_forward(tokens[perm], gate, 2)
    assert np.array_equal(a.top_experts[perm], b.top_experts)
    assert np.allclose(a.combine_weights[perm], b.combine_weights, rtol=0, atol=1e-15)


def test_softmax_shift_invariance(rng):
    logits = rng.normal(size=(4, 6))
    assert np.allclose(softmax(logits), softmax(logits + 123.0), rtol=1e-12, atol=0)


@pytest.mark.parametrize("tokens, gate, k", [
    (np.zeros((2, 3)), np.zeros((4, 2)), 1),
    (np.zeros(3), np.zeros((3, 2)), 1),
    (np.zeros((2, 3)), np.zeros((3, 2)), 3),
    (np.zeros((2, 3)), np.zeros((3, 2)), 0),
])
def test_dimension_errors(tokens, gate, k):
    with pytest.raises(DimensionError):
        gate_forward(tokens, gate, k)
