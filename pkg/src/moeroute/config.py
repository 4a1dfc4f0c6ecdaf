"""Run configuration, cluster topology and expert placement.

Config files are YAML with three top-level sections (``model``, ``topology``,
``run``); see ``docs/config.md`` for the full schema.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .errors import ParseError, ValidationError

DEFAULT_GPUS_PER_NODE = 8
DEFAULT_BW_INTRA = 200e9
DEFAULT_BW_INTER = 25e9


def _require_int(key: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ValidationError(f"{key} must be an integer")


def _require_count(key: str, value: Any) -> None:
    _require_int(key, value)
    if value < 1:
        raise ValidationError(f"{key} must be ≥ 1")


@dataclass(frozen=True)
class ModelConfig:
    num_experts: int
    model_dim: int
    ffn_dim: int
    top_k: int
    seq_len: int
    micro_batch: int = 1
    num_layers: int = 1
    fine_grained_factor: int = 1
    capacity_factor: float = 1.0
    dtype_bytes: int = 2
    name: str = "custom"

    def __post_init__(self) -> None:
        for key in ("num_experts", "model_dim", "ffn_dim", "seq_len", "micro_batch",
                    "num_layers", "dtype_bytes"):
            _require_count(key, getattr(self, key))
        _require_int("top_k", self.top_k)
        if self.top_k < 1:
            raise ValidationError("top_k must be ≥ 1")
        if self.top_k > self.num_experts:
            raise ValidationError(
                f"top_k ({self.top_k}) must be ≤ num_experts ({self.num_experts})")
        _require_int("fine_grained_factor", self.fine_grained_factor)
        if self.fine_grained_factor < 1:
            raise ValidationError("fine_grained_factor must be ≥ 1")
        if not self.capacity_factor > 0:
            raise ValidationError("capacity_factor must be > 0")

    def default_capacity(self) -> int:
        """Per-worker, per-expert token capacity ``ceil(c * b * S * k / E)``."""
        tokens = self.micro_batch * self.seq_len * self.top_k
        return max(1, math.ceil(self.capacity_factor * tokens / self.num_experts))


# Expert-specialized presets, plus one conventional MoE used for the SSMB/TED
# contrast (Mixtral-8x7B public architecture).
NAMED_MODELS: dict[str, ModelConfig] = {
    "small": ModelConfig(num_experts=64, model_dim=2048, ffn_dim=1408, top_k=6,
                         seq_len=2048, num_layers=28, capacity_factor=1.25, name="small"),
    "medium": ModelConfig(num_experts=128, model_dim=5120, ffn_dim=1536, top_k=6,
                          seq_len=4096, num_layers=28, capacity_factor=1.25, name="medium"),
    "large": ModelConfig(num_experts=256, model_dim=7168, ffn_dim=2048, top_k=8,
                         seq_len=4096, num_layers=28, capacity_factor=1.25, name="large"),
    "super": ModelConfig(num_experts=256, model_dim=7168, ffn_dim=2560, top_k=8,
                         seq_len=4096, num_layers=61, capacity_factor=1.25, name="super"),
    "mixtral-8x7b": ModelConfig(num_experts=8, model_dim=4096, ffn_dim=14336, top_k=2,
                                seq_len=4096, num_layers=32, capacity_factor=1.25,
                                name="mixtral-8x7b"),
}


@dataclass(frozen=True)
class Topology:
    num_nodes: int = 1
    gpus_per_node: int = DEFAULT_GPUS_PER_NODE
    bw_intra: float = DEFAULT_BW_INTRA
    bw_inter: float = DEFAULT_BW_INTER
    latency_intra: float = 0.0
    latency_inter: float = 0.0

    def __post_init__(self) -> None:
        _require_count("num_nodes", self.num_nodes)
        _require_count("gpus_per_node", self.gpus_per_node)
        if not self.bw_inter > 0:
            raise ValidationError("bw_inter must be > 0")
        if not self.bw_intra >= self.bw_inter:
            raise ValidationError("bw_intra must be ≥ bw_inter")
        if self.latency_intra < 0 or self.latency_inter < 0:
            raise ValidationError("latencies must be ≥ 0")

    @property
    def num_workers(self) -> int:
        return self.num_nodes * self.gpus_per_node

    def node_of(self, worker: int) -> int:
        return worker // self.gpus_per_node


class Strategy(str, enum.Enum):
    EP_FIRST = "ep_first"
    DP_FIRST = "dp_first"

    @classmethod
    def parse(cls, value: "str | Strategy") -> "Strategy":
        if isinstance(value, Strategy):
            return value
        norm = str(value).strip().lower().replace("-", "_")
        aliases = {"epfirst": "ep_first", "dpfirst": "dp_first"}
        norm = aliases.get(norm, norm)
        try:
            return cls(norm)
        except ValueError:
            raise ValidationError(
                f"strategy must be one of 'ep_first', 'dp_first' (got {value!r})") from None


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    topology: Topology = field(default_factory=Topology)
    ep_size: int = 1
    strategy: Strategy = Strategy.EP_FIRST
    seed: int = 0
    max_token_count: int | None = None
    ssmb_group: int = 1
    rbd: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        _require_count("ep_size", self.ep_size)
        _require_count("ssmb_group", self.ssmb_group)
        _require_int("seed", self.seed)
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")
        if self.max_token_count is None:
            object.__setattr__(self, "max_token_count", self.model.default_capacity())
        _require_int("max_token_count", self.max_token_count)
        if self.max_token_count < 1:
            raise ValidationError("max_token_count must be ≥ 1")
        E, W = self.model.num_experts, self.topology.num_workers
        if E % self.ep_size:
            raise ValidationError(
                f"num_experts ({E}) must be divisible by ep_size ({self.ep_size})")
        if W % self.ep_size:
            raise ValidationError(
                f"total workers ({W}) must be divisible by ep_size ({self.ep_size})")

    @property
    def dp_size(self) -> int:
        return self.topology.num_workers // self.ep_size


@dataclass(frozen=True)
class Placement:
    """Expert-to-worker assignment.

    ``expert_owner[g, e]`` is the global worker id that owns expert ``e`` in
    EP group ``g``. EP group ``g`` lists its workers in rank order in
    ``ep_groups[g]``; ``dp_groups[r]`` holds the replicas of EP rank ``r``.
    """

    ep_size: int
    dp_size: int
    strategy: Strategy
    expert_owner: np.ndarray
    ep_groups: np.ndarray
    dp_groups: np.ndarray

    @property
    def num_experts(self) -> int:
        return self.expert_owner.shape[1]

    def local_owner(self, group: int = 0) -> np.ndarray:
        """Owner of each expert as a rank inside EP group ``group``."""
        rank_of = {int(w): r for r, w in enumerate(self.ep_groups[group])}
        return np.array([rank_of[int(w)] for w in self.expert_owner[group]], dtype=np.int64)

    def experts_of(self, worker: int) -> np.ndarray:
        g, _ = np.nonzero(self.ep_groups == worker)
        return np.flatnonzero(self.expert_owner[g[0]] == worker)


@dataclass(frozen=True)
class CostReport:
    """Byte volumes; integers whenever the exact value is integral."""

    ep_internode_bytes: "int | float"
    ep_intranode_bytes: "int | float"
    dp_internode_bytes: "int | float"
    dp_intranode_bytes: "int | float"

    def as_dict(self) -> dict[str, "int | float"]:
        return {
            "ep_internode_bytes": self.ep_internode_bytes,
            "ep_intranode_bytes": self.ep_intranode_bytes,
            "dp_internode_bytes": self.dp_internode_bytes,
            "dp_intranode_bytes": self.dp_intranode_bytes,
        }


def _exact(value: Fraction) -> "int | float":
    return int(value) if value.denominator == 1 else float(value)


def place_experts(cfg: RunConfig, strategy: "Strategy | str | None" = None) -> Placement:
    """Assign experts to workers.

    EP-first fills EP groups with consecutive workers, so a node holds as many
    distinct experts as it can and replicas sit on other nodes. DP-first puts
    consecutive workers in the same DP group, so replicas share a node and an
    EP group strides across nodes. Workers are numbered row-major by node.
    """
    strategy = cfg.strategy if strategy is None else Strategy.parse(strategy)
    E, ep, dp = cfg.model.num_experts, cfg.ep_size, cfg.dp_size
    if E % ep:
        raise ValidationError(f"num_experts ({E}) must be divisible by ep_size ({ep})")
    workers = np.arange(ep * dp, dtype=np.int64)
    if strategy is Strategy.EP_FIRST:
        ep_groups = workers.reshape(dp, ep)
    else:
        ep_groups = workers.reshape(ep, dp).T.copy()
    dp_groups = ep_groups.T.copy()
    per_rank = E // ep
    rank_of_expert = np.arange(E) // per_rank
    expert_owner = ep_groups[:, rank_of_expert]
    return Placement(ep_size=ep, dp_size=dp, strategy=strategy, expert_owner=expert_owner,
                     ep_groups=ep_groups, dp_groups=dp_groups)


def placement_cost(placement: Placement, cfg: RunConfig) -> CostReport:
    """Per-step EP and DP byte volumes split by link class.

    EP volume is the expectation under uniform routing: each worker sends
    ``b*S*k`` token copies of ``H*dtype_bytes`` bytes, spread evenly over the
    ranks of its EP group, once for dispatch and once for combine. DP volume
    uses the ring all-reduce factor ``2(G-1)/G`` over each worker's expert
    parameters. Both are summed over all workers and layers.
    """
    m, topo = cfg.model, cfg.topology
    row_bytes = m.model_dim * m.dtype_bytes
    per_worker = 2 * m.micro_batch * m.seq_len * m.top_k * row_bytes * m.num_layers
    ep_inter = ep_intra = Fraction(0)
    for group in placement.ep_groups:
        nodes = np.array([topo.node_of(int(w)) for w in group])
        for n_src in nodes:
            remote = int(np.count_nonzero(nodes != n_src))
            ep_inter += Fraction(per_worker * remote, placement.ep_size)
            ep_intra += Fraction(per_worker * (placement.ep_size - remote), placement.ep_size)

    dp_inter = dp_intra = Fraction(0)
    G = placement.dp_size
    param_bytes = (m.num_experts // placement.ep_size) * 2 * m.model_dim * m.ffn_dim \
        * m.dtype_bytes * m.num_layers
    sync = Fraction(2 * (G - 1), G) * param_bytes
    for group in placement.dp_groups:
        if len({topo.node_of(int(w)) for w in group}) > 1:
            dp_inter += sync * len(group)
        else:
            dp_intra += sync * len(group)
    return CostReport(*(_exact(v) for v in (ep_inter, ep_intra, dp_inter, dp_intra)))


def load_config(path: "str | Path") -> RunConfig:
    """Read and validate a YAML run config."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParseError(f"malformed config {path}: {exc}") from exc
    if not isinstance(raw, Mapping):
        raise ParseError(f"config {path} must be a mapping with model/topology/run sections")
    return config_from_dict(raw)


_MODEL_KEYS = {"num_experts": int, "model_dim": int, "ffn_dim": int, "top_k": int,
               "seq_len": int, "micro_batch": int, "num_layers": int,
               "fine_grained_factor": int, "capacity_factor": float, "dtype_bytes": int,
               "name": str}
_TOPO_KEYS = {"num_nodes": int, "gpus_per_node": int, "bw_intra": float, "bw_inter": float,
              "latency_intra": float, "latency_inter": float}
_RUN_KEYS = {"ep_size": int, "strategy": str, "seed": int, "max_token_count": int,
             "ssmb_group": int, "rbd": bool}


def config_from_dict(raw: Mapping[str, Any]) -> RunConfig:
    unknown = set(raw) - {"model", "topology", "run"}
    if unknown:
        raise ValidationError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    model_raw = raw.get("model")
    if model_raw is None:
        raise ValidationError("model section is required")
    if isinstance(model_raw, str):
        model_raw = {"preset": model_raw}
    model_raw = dict(_section("model", model_raw))
    preset = model_raw.pop("preset", None)
    values = _typed("model", model_raw, _MODEL_KEYS)
    if preset is not None:
        if preset not in NAMED_MODELS:
            raise ValidationError(f"model.preset: unknown model {preset!r}")
        model = replace(NAMED_MODELS[preset], **values)
    else:
        missing = [k for k in ("num_experts", "model_dim", "ffn_dim", "top_k", "seq_len")
                   if k not in values]
        if missing:
            raise ValidationError(f"model.{missing[0]} is required")
        model = ModelConfig(**values)
    topology = Topology(**_typed("topology", _section("topology", raw.get("topology", {})),
                                 _TOPO_KEYS))
    run = _typed("run", _section("run", raw.get("run", {})), _RUN_KEYS)
    return RunConfig(model=model, topology=topology, **run)


def _section(name: str, value: Any) -> Mapping[str, Any]:
    if value is None:
        return {}
    if not isinstance(value, Mapping):
        raise ValidationError(f"{name} must be a mapping")
    return value


def _typed(section: str, values: Mapping[str, Any], schema: Mapping[str, type]) -> dict:
    out = {}
    for key, value in values.items():
        if key not in schema:
            raise ValidationError(f"{section}.{key}: unknown key")
        kind = schema[key]
        try:
            if kind is int:
                if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                    raise TypeError
                value = int(value)
            elif kind is float:
                value = float(value)
            elif kind is bool:
                if not isinstance(value, bool):
                    raise TypeError
            else:
                value = str(value)
        except (TypeError, ValueError):
            raise ValidationError(
                f"{section}.{key}: expected {kind.__name__}, got {value!r}") from None
        out[key] = value
    return out
