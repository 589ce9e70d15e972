"""Small hand-built graphs and topologies used by the worked examples."""
from __future__ import annotations

import numpy as np

from .graph import Graph, from_edges


def psgs_example_graph() -> Graph:
    """Six nodes; node 3 has two equal-weight out-neighbours, node 0 (one
    out-edge) and node 2 (a sink). With fanouts ``[1, 1]`` node 3's
    two-hop PSGS is ``1 + 1 + 0.5``."""
    edges = [(3, 0), (3, 2), (0, 1), (1, 4), (4, 5), (5, 3)]
    src, dst = zip(*edges)
    return from_edges(src, dst, node_count=6)


def fap_example_graph() -> Graph:
    """Six nodes with equal edge weights.

    Node 3 is reached in one hop from node 0 (which has two out-edges)
    and from node 5 (single out-edge), and in two hops only along
    ``4 -> 0 -> 3``. Under a uniform seed distribution the two-hop access
    probability of node 3 is ``1/6 + 1/4 + 1/12 = 1/2``.
    """
    edges = [(0, 3), (0, 1), (4, 0), (5, 3), (1, 2), (2, 1), (3, 4)]
    src, dst = zip(*edges)
    return from_edges(src, dst, node_count=6)


def chain_graph(n: int = 3) -> Graph:
    return from_edges(np.arange(n - 1), np.arange(1, n), node_count=n)


def star_graph(leaves: int, inward: bool = True) -> Graph:
    """Node 0 plus ``leaves`` leaves; edges point at the centre when
    ``inward`` is set, away from it otherwise."""
    leaf = np.arange(1, leaves + 1)
    centre = np.zeros(leaves, dtype=np.int64)
    if inward:
        return from_edges(leaf, centre, node_count=leaves + 1)
    return from_edges(centre, leaf, node_count=leaves + 1)


def random_graph(rng: np.random.Generator, n: int, m: int, weighted: bool = True,
                 sinks: bool = True) -> Graph:
    """Random directed multigraph with ``n`` nodes and ``m`` edges.

    With ``sinks=False`` every node gets at least one out-edge.
    """
    src = rng.integers(0, n, size=m)
    if not sinks:
        src = np.concatenate([np.arange(n), src[: max(m - n, 0)]])
    dst = rng.integers(0, n, size=src.size)
    w = rng.uniform(0.1, 5.0, size=src.size) if weighted else None
    return from_edges(src, dst, w, node_count=n)


def bimodal_graph(hubs: int = 8, leaves: int = 400, hub_degree: int = 60,
                  leaf_degree: int = 2, rng_seed: int = 7) -> Graph:
    """Nodes ``0..hubs-1`` are hubs with many out-edges into other hubs and
    leaves; the rest are leaves with a couple of out-edges to other leaves,
    so seed PSGS is sharply bimodal."""
    rng = np.random.default_rng(rng_seed)
    n = hubs + leaves
    src, dst = [], []
    for h in range(hubs):
        targets = rng.choice(n, size=hub_degree, replace=False)
        src.extend([h] * hub_degree)
        dst.extend(targets.tolist())
    for v in range(hubs, n):
        targets = hubs + rng.choice(leaves, size=leaf_degree, replace=False)
        src.extend([v] * leaf_degree)
        dst.extend(targets.tolist())
    return from_edges(src, dst, node_count=n)


FIVE_FEATURE_FAP = np.array([5.0, 4.0, 3.0, 2.0, 1.0])  # id 0 hottest, id 4 coldest


def scenario_topology(scenario: str):
    """Topologies of the four placement scenarios ``a``-``d``: one server
    with 2 NUMA nodes x 2 GPUs (without/with NVLink), or two single-GPU
    servers (without/with InfiniBand)."""
    from .placement import ClusterTopology

    if scenario in ("a", "b"):
        return ClusterTopology(servers=1, numa_per_server=2, gpus_per_server=4,
                               gpu_feature_capacity=1, host_feature_capacity=4,
                               disk_feature_capacity=0, nvlink_within_numa=scenario == "b")
    if scenario in ("c", "d"):
        return ClusterTopology(servers=2, numa_per_server=1, gpus_per_server=1,
                               gpu_feature_capacity=1, host_feature_capacity=1,
                               disk_feature_capacity=4, infiniband=scenario == "d")
    raise ValueError(f"unknown scenario {scenario!r}")
