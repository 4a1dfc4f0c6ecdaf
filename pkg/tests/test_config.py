import textwrap

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moeroute.config import (NAMED_MODELS, ModelConfig, RunConfig, Strategy, Topology,
                             load_config, place_experts, placement_cost)
from moeroute.errors import ParseError, ValidationError


def write(tmp_path, text):
    path = tmp_path / "run.yaml"
    path.write_text(textwrap.dedent(text))
    return path


SMALL = """
model:
  num_experts: 64
  model_dim: 2048
  ffn_dim: 1408
  top_k: 6
  seq_len: 2048
  num_layers: 28
  capacity_factor: 1.25
topology:
  num_nodes: 8
  gpus_per_node: 8
  bw_intra: 200e9
  bw_inter: 25e9
run:
  ep_size: 64
  strategy: dp_first
  seed: 7
"""


def test_load_small_model(tmp_path):
    cfg = load_config(write(tmp_path, SMALL))
    small = NAMED_MODELS["small"]
    for key in ("num_experts", "model_dim", "ffn_dim", "top_k", "seq_len", "num_layers"):
        assert getattr(cfg.model, key) == getattr(small, key)
    assert cfg.topology.bw_intra == 200e9 and cfg.topology.bw_inter == 25e9
    assert cfg.strategy is Strategy.DP_FIRST
    assert cfg.seed == 7 and cfg.dp_size == 1
    # ceil(1.25 * 2048 * 6 / 64)
    assert cfg.max_token_count == 240


def test_preset_with_override(tmp_path):
    cfg = load_config(write(tmp_path, """
        model: {preset: large, seq_len: 512}
        run: {max_token_count: 9}
    """))
    assert cfg.model.num_experts == 256 and cfg.model.seq_len == 512
    assert cfg.max_token_count == 9


def test_top_k_zero_message(tmp_path):
    path = write(tmp_path, SMALL.replace("top_k: 6", "top_k: 0"))
    with pytest.raises(ValidationError) as err:
        load_config(path)
    assert str(err.value) == "top_k must be ≥ 1"


def test_ep_size_divisibility_message(tmp_path):
    path = write(tmp_path, """
        model: {num_experts: 8, model_dim: 16, ffn_dim: 16, top_k: 2, seq_len: 8}
        topology: {num_nodes: 1, gpus_per_node: 3}
        run: {ep_size: 3}
    """)
    with pytest.raises(ValidationError) as err:
        load_config(path)
    assert str(err.value) == "num_experts (8) must be divisible by ep_size (3)"


@pytest.mark.parametrize("text, message", [
    ("model: {num_experts: 8, model_dim: 4, ffn_dim: 4, top_k: 2, seq_len: 4, colour: 1}",
     "model.colour: unknown key"),
    ("model: {model_dim: 4, ffn_dim: 4, top_k: 2, seq_len: 4}", "model.num_experts is required"),
    ("model: {num_experts: 8, model_dim: 4, ffn_dim: 4, top_k: 2, seq_len: 4}\n"
     "topology: {bw_intra: 1e9, bw_inter: 2e9}", "bw_intra must be ≥ bw_inter"),
    ("model: {num_experts: 8, model_dim: 4, ffn_dim: 4, top_k: 2, seq_len: 4}\n"
     "run: {max_token_count: 0}", "max_token_count must be ≥ 1"),
    ("model: {num_experts: 8, model_dim: 4, ffn_dim: 4, top_k: 2.5, seq_len: 4}",
     "model.top_k: expected int, got 2.5"),
])
def test_validation_messages(tmp_path, text, message):
    with pytest.raises(ValidationError) as err:
        load_config(write(tmp_path, text))
    assert str(err.value) == message


def test_parse_errors(tmp_path):
    with pytest.raises(ParseError):
        load_config(write(tmp_path, "model: [unclosed"))
    with pytest.raises(ParseError):
        load_config(write(tmp_path, "- just a list"))
    with pytest.raises(ParseError):
        load_config(tmp_path / "missing.yaml")


def eight_node_config(strategy):
    return RunConfig(model=ModelConfig(num_experts=8, model_dim=64, ffn_dim=128, top_k=2,
                                       seq_len=32),
                     topology=Topology(num_nodes=8, gpus_per_node=8), ep_size=8,
                     strategy=strategy)


def test_ep_first_puts_all_experts_in_each_node():
    cfg = eight_node_config("ep_first")
    pl = place_experts(cfg)
    for g in range(pl.dp_size):
        nodes = {cfg.topology.node_of(int(w)) for w in pl.expert_owner[g]}
        assert len(nodes) == 1
    # every expert has one replica per node
    for e in range(8):
        nodes = sorted(cfg.topology.node_of(int(w)) for w in pl.expert_owner[:, e])
        assert nodes == list(range(8))


def test_dp_first_one_expert_per_node():
    cfg = eight_node_config("dp_first")
    pl = place_experts(cfg)
    for n in range(8):
        workers = range(n * 8, (n + 1) * 8)
        experts = {int(e) for w in workers for e in pl.experts_of(w)}
        assert len(experts) == 1
    for e in range(8):
        nodes = {cfg.topology.node_of(int(w)) for w in pl.expert_owner[:, e]}
        assert len(nodes) == 1


def test_singleton_placement():
    cfg = RunConfig(model=ModelConfig(num_experts=1, model_dim=4, ffn_dim=4, top_k=1,
                                      seq_len=4),
                    topology=Topology(num_nodes=1, gpus_per_node=1))
    pl = place_experts(cfg)
    assert pl.expert_owner.tolist() == [[0]]


def test_placement_cost_eight_nodes():
    ep = placement_cost(place_experts(eight_node_config("ep_first")), eight_node_config("ep_first"))
    dp = placement_cost(place_experts(eight_node_config("dp_first")), eight_node_config("dp_first"))
    assert ep.ep_internode_bytes == 0 and ep.dp_internode_bytes > 0
    assert dp.dp_internode_bytes == 0 and dp.ep_internode_bytes > 0
    # the two strategies swap which traffic crosses nodes
    assert ep.dp_internode_bytes == dp.dp_intranode_bytes
    assert ep.ep_intranode_bytes == dp.ep_internode_bytes + dp.ep_intranode_bytes


def test_placement_cost_hand_values():
    cfg = eight_node_config("ep_first")
    rep = placement_cost(place_experts(cfg), cfg)
    # 64 workers * 2 (dispatch+combine) * b*S*k=64 copies * H*2 bytes=128
    assert rep.ep_intranode_bytes == 64 * 2 * 64 * 128
    # each worker holds 1 expert of 2*64*128*2 bytes; ring factor 2*7/8
    assert rep.dp_internode_bytes == 64 * 2 * 7 / 8 * (2 * 64 * 128 * 2)


def test_single_node_has_no_internode_traffic():
    cfg = RunConfig(model=ModelConfig(num_experts=8, model_dim=8, ffn_dim=8, top_k=2,
                                      seq_len=8),
                    topology=Topology(num_nodes=1, gpus_per_node=8), ep_size=4)
    for s in Strategy:
        rep = placement_cost(place_experts(cfg, s), cfg)
        assert rep.ep_internode_bytes == 0 and rep.dp_internode_bytes == 0


@settings(max_examples=60, deadline=None)
@given(nodes=st.integers(1, 4), gpn=st.sampled_from([1, 2, 4, 8]),
       ep_exp=st.integers(0, 5), per_rank=st.integers(1, 3))
def test_placement_properties(nodes, gpn, ep_exp, per_rank):
    W = nodes * gpn
    ep = 2 ** ep_exp
    if W % ep:
        return
    model = ModelConfig(num_experts=ep * per_rank, model_dim=8, ffn_dim=8, top_k=1, seq_len=8)
    cfg = RunConfig(model=model, topology=Topology(num_nodes=nodes, gpus_per_node=gpn),
                    ep_size=ep)
    totals = set()
    for s in Strategy:
        pl = place_experts(cfg, s)
        assert sorted(pl.ep_groups.ravel().tolist()) == list(range(W))
        for g in range(pl.dp_size):
            owners = pl.expert_owner[g]
            counts = np.bincount([list(pl.ep_groups[g]).index(w) for w in owners], minlength=ep)
            assert counts.tolist() == [per_rank] * ep
        rep = placement_cost(pl, cfg)
        totals.add(rep.ep_internode_bytes + rep.ep_intranode_bytes)
    assert len(totals) == 1
