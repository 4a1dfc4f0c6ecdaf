import numpy as np

from moeroute.collectives import CostLedger, WorkerGroup
from moeroute.params import MoeParams
from moeroute.reference import build_dispatch_mask, padded_moe_forward
from moeroute.verify import padded_outputs, pf_outputs, random_instance


def test_mask_hand_trace():
    dm = build_dispatch_mask([[0], [1], [0], [0]], [[0.9], [0.8], [0.5], [0.7]], 2, 2)
    ones = sorted(map(tuple, np.argwhere(dm.mask == 1).tolist()))
    assert ones == [(0, 0, 0), (1, 1, 0), (3, 0, 1)]
    assert not dm.mask[2].any()
    assert dm.weights[3, 0, 1] == 0.7


def test_mask_without_drops(rng):
    S, k, E = 9, 2, 4
    top = np.stack([rng.permutation(E)[:k] for _ in range(S)])
    dm = build_dispatch_mask(top, rng.random((S, k)), S * k, E)
    assert dm.mask.sum() == S * k


def test_single_expert_mask_is_permutation():
    S = 5
    dm = build_dispatch_mask(np.zeros((S, 1), dtype=int), np.ones((S, 1)), S, 1)
    m = dm.mask[:, 0, :]
    assert (m.sum(axis=0) == 1).all() and (m.sum(axis=1) == 1).all()


def test_degenerate_dense_mlp(rng):
    S, H, F = 6, 4, 5
    params = MoeParams.random(rng, 1, H, F)
    x = rng.normal(size=(S, H))
    out = padded_moe_forward([x], params, 1, S, WorkerGroup((0,)), np.zeros(1, dtype=int))[0]
    # one expert: softmax over a single logit is exactly 1
    expected = np.maximum(x @ params.w1[0], 0) @ params.w2[0]
    assert np.allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_zero_weights_give_zero(rng):
    params = MoeParams.random(rng, 4, 3, 3)
    params = MoeParams(params.gate, np.zeros_like(params.w1), np.zeros_like(params.w2))
    out = padded_moe_forward([rng.normal(size=(5, 3))] * 2, params, 2, 3,
                             WorkerGroup((0, 1)), np.array([0, 0, 1, 1]))
    assert all(not o.any() for o in out)


def test_padded_volume_is_fixed(rng):
    inst = random_instance(11)
    ledger = CostLedger(2)
    padded_outputs(inst, ledger)
    W, E, C, H = (inst.group.num_workers, inst.num_experts, inst.max_token_count,
                  inst.params.model_dim)
    assert ledger.total_bytes("padded_dispatch") == W * E * C * H * 2
    assert ledger.total_bytes("padded_combine") == W * E * C * H * 2


def test_randomized_matches_padding_free():
    for seed in range(10):
        inst = random_instance(seed)
        pf, ref = pf_outputs(inst), padded_outputs(inst)
        for a, b in zip(pf, ref):
            assert np.all(np.abs(a - b) <= 1e-5 * np.abs(b) + 1e-12)
