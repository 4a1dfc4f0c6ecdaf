"""In-process collectives over logical workers, with a byte/time ledger.

Collectives run as one deterministic pass over all workers. Every call
records the bytes it moved between each ordered pair of workers; pairs on the
same node count as intra-node traffic (a worker's sends to itself included),
pairs on different nodes as inter-node traffic.

Modeled time is an alpha-beta estimate: each worker pays
``latency + bytes / bandwidth`` for every peer it sends a non-empty message
to, and the collective takes as long as its slowest worker. Self-sends are
local copies and cost nothing.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

from .config import Topology
from .errors import CountMismatch, DimensionError


@dataclass(frozen=True)
class WorkerGroup:
    node_of: tuple[int, ...]
    topology: Topology = field(default_factory=Topology)

    @property
    def num_workers(self) -> int:
        return len(self.node_of)

    @classmethod
    def from_topology(cls, topology: Topology, workers: Sequence[int] | None = None
                      ) -> "WorkerGroup":
        """Group over ``workers`` (global ids, default all) in the given rank order."""
        if workers is None:
            workers = range(topology.num_workers)
        return cls(tuple(topology.node_of(int(w)) for w in workers), topology)

    def subgroup(self, ranks: Sequence[int]) -> "WorkerGroup":
        return WorkerGroup(tuple(self.node_of[r] for r in ranks), self.topology)

    def same_node(self) -> np.ndarray:
        nodes = np.asarray(self.node_of)
        return nodes[:, None] == nodes[None, :]


@dataclass(frozen=True)
class CollectiveRecord:
    collective_id: int
    kind: str
    intra_bytes: int
    inter_bytes: int
    intra_messages: int
    inter_messages: int
    modeled_time_s: float


class CostLedger:
    """Append-only record of collective traffic."""

    CSV_COLUMNS = ("collective_id", "kind", "intra_bytes", "inter_bytes", "modeled_time_s")

    def __init__(self, dtype_bytes: int = 2):
        self.dtype_bytes = dtype_bytes
        self.records: list[CollectiveRecord] = []

    def record(self, kind: str, pair_bytes: np.ndarray, group: WorkerGroup) -> CollectiveRecord:
        pair_bytes = np.asarray(pair_bytes, dtype=np.int64)
        W = group.num_workers
        if pair_bytes.shape != (W, W):
            raise DimensionError(f"pair_bytes must be [{W}, {W}], got {pair_bytes.shape}")
        if np.any(pair_bytes < 0):
            raise ValueError("byte counts must be non-negative")
        same = group.same_node()
        remote = ~np.eye(W, dtype=bool)
        sent = (pair_bytes > 0) & remote
        topo = group.topology
        bw = np.where(same, topo.bw_intra, topo.bw_inter)
        lat = np.where(same, topo.latency_intra, topo.latency_inter)
        cost = np.where(sent, lat + pair_bytes / bw, 0.0)
        rec = CollectiveRecord(
            collective_id=len(self.records),
            kind=kind,
            intra_bytes=int(pair_bytes[same].sum()),
            inter_bytes=int(pair_bytes[~same].sum()),
            intra_messages=int(np.count_nonzero(sent & same)),
            inter_messages=int(np.count_nonzero(sent & ~same)),
            modeled_time_s=float(cost.sum(axis=1).max()) if W else 0.0,
        )
        self.records.append(rec)
        return rec

    def select(self, *kinds: str) -> list[CollectiveRecord]:
        return [r for r in self.records if not kinds or r.kind in kinds]

    def intra_bytes(self, *kinds: str) -> int:
        return sum(r.intra_bytes for r in self.select(*kinds))

    def inter_bytes(self, *kinds: str) -> int:
        return sum(r.inter_bytes for r in self.select(*kinds))

    def total_bytes(self, *kinds: str) -> int:
        return self.intra_bytes(*kinds) + self.inter_bytes(*kinds)

    def modeled_time(self, *kinds: str) -> float:
        return sum(r.modeled_time_s for r in self.select(*kinds))

    def write_csv(self, fh: TextIO) -> None:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(self.CSV_COLUMNS)
        for r in self.records:
            writer.writerow([r.collective_id, r.kind, r.intra_bytes, r.inter_bytes,
                             repr(r.modeled_time_s)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()


def alltoall_counts(counts: np.ndarray) -> np.ndarray:
    """Exchange per-pair counts: ``recv[j, i] = send[i, j]``."""
    counts = np.asarray(counts)
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    return counts.T.copy()


def alltoallv_rows(buffers: Sequence[np.ndarray], send_counts: np.ndarray, group: WorkerGroup,
                   ledger: CostLedger | None = None, kind: str = "alltoallv",
                   payload: Sequence[Sequence[np.ndarray]] = ()) -> list[np.ndarray]:
    """Uneven all-to-all of row buffers.

    Worker ``i``'s buffer holds contiguous segments for destinations
    ``0..W-1`` in order, of ``send_counts[i, j]`` rows each. Worker ``j``
    receives those segments concatenated in ascending source order.

    ``payload`` optionally carries per-row side arrays (one list per array,
    indexed by worker) that move with the rows and are not charged to the
    ledger; they are returned after the row buffers.
    """
    W = group.num_workers
    send_counts = np.asarray(send_counts, dtype=np.int64)
    if send_counts.shape != (W, W) or len(buffers) != W:
        raise CountMismatch(f"expected {W} buffers and [{W}, {W}] counts")
    widths = {b.shape[1] for b in buffers if b.ndim == 2}
    if len(widths) > 1 or any(b.ndim != 2 for b in buffers):
        raise DimensionError("all buffers must be 2-D with the same width")
    H = widths.pop() if widths else 0
    for i, buf in enumerate(buffers):
        if buf.shape[0] != send_counts[i].sum():
            raise CountMismatch(
                f"worker {i} holds {buf.shape[0]} rows but declares {send_counts[i].sum()}")
    offsets = np.zeros((W, W + 1), dtype=np.int64)
    offsets[:, 1:] = np.cumsum(send_counts, axis=1)
    out = [np.concatenate([buffers[i][offsets[i, j]:offsets[i, j + 1]] for i in range(W)])
           if W else np.empty((0, H)) for j in range(W)]
    moved_payload = [[np.concatenate([arrs[i][offsets[i, j]:offsets[i, j + 1]]
                                      for i in range(W)]) for j in range(W)]
                     for arrs in payload]
    if ledger is not None:
        ledger.record(kind, send_counts * H * ledger.dtype_bytes, group)
    if payload:
        return out, *moved_payload
    return out


def allgather_rows(shards: Sequence[np.ndarray], group: WorkerGroup,
                   ledger: CostLedger | None = None, kind: str = "allgather") -> list[np.ndarray]:
    """Concatenate shards in worker order and give every worker the full result.

    Traffic follows a ring: worker ``i`` forwards every shard except its
    successor's own to worker ``i + 1``, so each worker receives
    ``total - own`` bytes, i.e. ``(W-1)/W`` of the result for equal shards.
    """
    W = group.num_workers
    if W != len(shards):
        raise CountMismatch(f"expected {W} shards, got {len(shards)}")
    widths = {s.shape[1] for s in shards}
    if len(widths) > 1:
        raise DimensionError("all shards must have the same width")
    full = np.concatenate(list(shards)) if W else np.empty((0, 0))
    if ledger is not None:
        rows = np.array([s.shape[0] for s in shards], dtype=np.int64)
        H = full.shape[1]
        pair = np.zeros((W, W), dtype=np.int64)
        if W > 1:
            for i in range(W):
                nxt = (i + 1) % W
                pair[i, nxt] = (rows.sum() - rows[nxt]) * H * ledger.dtype_bytes
        ledger.record(kind, pair, group)
    return [full.copy() for _ in range(W)]
