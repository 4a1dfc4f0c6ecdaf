import numpy as np

from moeroute.collectives import WorkerGroup
from moeroute.config import Topology
from moeroute.pft import pft_construct


def empty_routing(k):
    return np.zeros((0, k), dtype=np.int64), np.zeros((0, k))


def group(nodes, gpn, **kw):
    return WorkerGroup.from_topology(Topology(num_nodes=nodes, gpus_per_node=gpn, **kw))


def manual_pfts(routings, E, cap=1000):
    """PFTs from explicit (top_experts, weights) per worker."""
    return [pft_construct(cap, np.asarray(t, dtype=np.int64), np.asarray(w, dtype=float), E)
            for t, w in routings]
