"""Multi-hop weighted neighbour sampling without replacement.

Every frontier instance at hop ``k`` draws ``min(outdeg, fanout[k])``
distinct out-neighbours. Draws use exponential keys (Efraimidis-Spirakis):
each candidate edge gets ``log(u) / p`` and the largest keys win, which
gives exact weighted sampling without replacement in one pass.

Instances are expanded independently, so a node reached twice at one hop
is expanded twice. This is the path-multiplicity convention the PSGS
table counts.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .graph import TransitionView


def rng_stream(rng_seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator for the stream named ``(rng_seed, *keys)``.

    Streams are independent of the order in which they are created, so
    per-seed or per-trial work can run in any order or on any worker.
    """
    entropy = [int(rng_seed), *[int(k) for k in keys]]
    if any(e < 0 for e in entropy):
        raise ValueError("rng seeds and stream keys must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return rng_stream(rng)


@dataclass(frozen=True)
class SamplingConfig:
    fanouts: tuple[int, ...]

    def __post_init__(self):
        fan = tuple(int(f) for f in self.fanouts)
        if not fan:
            raise ValueError("at least one hop is required")
        if any(f < 1 for f in fan):
            raise ValueError(f"fanouts must be >= 1, got {fan}")
        object.__setattr__(self, "fanouts", fan)

    @property
    def hops(self) -> int:
        return len(self.fanouts)

    @classmethod
    def parse(cls, text: str) -> "SamplingConfig":
        return cls(tuple(int(x) for x in str(text).replace(" ", "").split(",") if x))


@dataclass(frozen=True, eq=False)
class SampleResult:
    seed: int
    frontiers: list[np.ndarray]
    parents: list[np.ndarray]

    @property
    def counts(self) -> list[int]:
        return [int(f.size) for f in self.frontiers]

    @property
    def total_instances(self) -> int:
        return sum(self.counts)

    @property
    def unique_nodes(self) -> np.ndarray:
        return np.unique(np.concatenate(self.frontiers))

    def same_as(self, other: "SampleResult") -> bool:
        if self.seed != other.seed or len(self.frontiers) != len(other.frontiers):
            return False
        return all(
            np.array_equal(a, b) and np.array_equal(p, q)
            for a, b, p, q in zip(self.frontiers, other.frontiers, self.parents, other.parents)
        )


def _expand(t: TransitionView, frontier: np.ndarray, fanout: int, rng: np.random.Generator):
    deg = t.out_degree[frontier]
    total = int(deg.sum())
    if total == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    seg = np.repeat(np.arange(frontier.size), deg)
    seg_start = np.concatenate([[0], np.cumsum(deg)[:-1]])
    within = np.arange(total) - seg_start[seg]
    edge = t.indptr[frontier][seg] + within

    u = 1.0 - rng.random(total)  # (0, 1]
    keys = np.log(u) / t.probs[edge]
    order = np.lexsort((-keys, seg))
    rank = np.arange(total) - seg_start[seg[order]]
    take = order[rank < np.minimum(deg, fanout)[seg[order]]]
    return t.indices[edge[take]], seg[take]


def sample_khop(t: TransitionView, seed: int, cfg: SamplingConfig, rng_seed=0) -> SampleResult:
    """Sample the k-hop tree rooted at ``seed``.

    ``rng_seed`` is an integer stream id or an existing generator.
    """
    seed = int(seed)
    if not 0 <= seed < t.node_count:
        raise IndexError(f"seed {seed} out of range for {t.node_count} nodes")
    rng = _as_generator(rng_seed)
    frontier = np.array([seed], dtype=np.int64)
    frontiers = [frontier]
    parents = [np.zeros(0, dtype=np.int64)]
    for fanout in cfg.fanouts:
        if frontier.size:
            frontier, par = _expand(t, frontier, fanout, rng)
        else:
            par = np.zeros(0, dtype=np.int64)
        frontiers.append(frontier)
        parents.append(par)
    return SampleResult(seed, frontiers, parents)


@dataclass(frozen=True, eq=False)
class BatchSample:
    results: list[SampleResult]
    total_instances: int
    unique_nodes: np.ndarray = field(repr=False)

    @property
    def unique_count(self) -> int:
        return int(self.unique_nodes.size)


def batch_sample(t: TransitionView, seeds: Sequence[int], cfg: SamplingConfig,
                 rng_seed: int = 0) -> BatchSample:
    """Sample every seed with its own stream ``(rng_seed, position)``."""
    seeds = np.asarray(seeds, dtype=np.int64).ravel()
    bad = np.flatnonzero((seeds < 0) | (seeds >= t.node_count))
    if bad.size:
        raise IndexError(f"invalid seed {int(seeds[bad[0]])} at position {int(bad[0])}")
    results = [
        sample_khop(t, int(s), cfg, rng_stream(rng_seed, pos)) for pos, s in enumerate(seeds)
    ]
    total = sum(r.total_instances for r in results)
    if results:
        unique = np.unique(np.concatenate([f for r in results for f in r.frontiers]))
    else:
        unique = np.zeros(0, dtype=np.int64)
    return BatchSample(results, total, unique)
