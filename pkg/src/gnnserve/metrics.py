"""Per-node workload metrics: PSGS, FAP and the inclusion-exclusion access
probability, plus the dense and Monte-Carlo oracles used to check them.

PSGS (expected sampled-subgraph size of a seed) is

    Q[i] = 1 + sum_{k=1..K} sum_j min(outdeg(j), l_k) * A^{k-1}[i, j]

evaluated with Horner nesting ``m_1 + A(m_2 + A(m_3 + ...))`` so only K
sparse mat-vecs are needed. FAP (expected visits of a node within K hops
of a random seed) is ``sum_k p0^T A^k``, evaluated by K successive
products over the transpose.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import Graph, TransitionView, transition_view
from .sampler import SamplingConfig, rng_stream, sample_khop

TABLE_MAGIC = b"QVTAB1"
_TABLE_HEADER = struct.Struct("<QQ")
_WALK_BLOCK = 8192

__all__ = [
    "SamplingConfig", "PsgsTable", "FapTable", "AccessProbTable", "MCEstimate", "FapEstimate",
    "compute_psgs", "compute_fap", "compute_access_prob_ie", "psgs_dense", "fap_dense",
    "psgs_oracle_mc", "fap_oracle_mc", "seed_distribution", "save_table", "load_table",
    "write_table_csv", "read_table_csv",
]


class MetricsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PsgsTable:
    values: np.ndarray
    config: SamplingConfig

    @property
    def hops(self) -> int:
        return self.config.hops

    def __getitem__(self, node):
        return self.values[node]

    def batch_sum(self, seeds) -> float:
        seeds = np.asarray(seeds, dtype=np.int64)
        if seeds.size and (seeds.min() < 0 or seeds.max() >= self.values.size):
            raise IndexError("seed out of range for PSGS table")
        return float(_neumaier(self.values[seeds]))


@dataclass(frozen=True, eq=False)
class FapTable:
    values: np.ndarray
    hops: int
    seed_distribution: np.ndarray
    per_hop: np.ndarray  # shape (hops + 1, n); row k is p_k

    def __getitem__(self, node):
        return self.values[node]


@dataclass(frozen=True, eq=False)
class AccessProbTable:
    values: np.ndarray
    layers: int
    history: np.ndarray  # shape (layers, n); row j-1 is P(., j)

    def __getitem__(self, node):
        return self.values[node]


def _neumaier(x: np.ndarray) -> float:
    s = 0.0
    c = 0.0
    for v in np.asarray(x, dtype=np.float64).tolist():
        t = s + v
        if abs(s) >= abs(v):
            c += (s - t) + v
        else:
            c += (v - t) + s
        s = t
    return s + c


def _row_dot(indptr: np.ndarray, indices: np.ndarray, weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``out[i] = sum_e weights[e] * x[indices[e]]`` over row ``i``.

    Terms are added left to right with Neumaier compensation, vectorised
    across rows, so results do not depend on how rows are grouped.
    """
    n = indptr.size - 1
    deg = np.diff(indptr)
    s = np.zeros(n)
    c = np.zeros(n)
    if deg.size == 0 or deg.max() == 0:
        return s
    by_deg = np.argsort(-deg, kind="stable")
    neg_sorted = -deg[by_deg]
    for k in range(int(deg.max())):
        active = by_deg[: np.searchsorted(neg_sorted, -k, side="left")]
        e = indptr[active] + k
        term = weights[e] * x[indices[e]]
        prev = s[active]
        tot = prev + term
        c[active] += np.where(np.abs(prev) >= np.abs(term), (prev - tot) + term, (term - tot) + prev)
        s[active] = tot
    return s + c


def _sum_rows(rows: list[np.ndarray]) -> np.ndarray:
    s = np.zeros_like(rows[0], dtype=np.float64)
    c = np.zeros_like(s)
    for term in rows:
        tot = s + term
        c += np.where(np.abs(s) >= np.abs(term), (s - tot) + term, (term - tot) + s)
        s = tot
    return s + c


def _view(g_or_t) -> TransitionView:
    return g_or_t if isinstance(g_or_t, TransitionView) else transition_view(g_or_t)


def compute_psgs(t: TransitionView, cfg: SamplingConfig) -> PsgsTable:
    t = _view(t)
    deg = t.out_degree.astype(np.float64)
    y = np.minimum(deg, cfg.fanouts[-1])
    for fan in reversed(cfg.fanouts[:-1]):
        y = np.minimum(deg, fan) + _row_dot(t.indptr, t.indices, t.probs, y)
    return PsgsTable(1.0 + y, cfg)


def seed_distribution(g_or_t, kind="uniform") -> np.ndarray:
    """``uniform``, ``out-degree`` (weighted by out-degree) or an explicit
    array of non-negative weights, normalised to sum to one."""
    g = g_or_t.graph if isinstance(g_or_t, TransitionView) else g_or_t
    n = g.node_count
    if isinstance(kind, str):
        if kind == "uniform":
            return np.full(n, 1.0 / n)
        if kind == "out-degree":
            w = g.out_degrees.astype(np.float64)
        else:
            raise MetricsError(f"unknown seed distribution {kind!r}")
    else:
        w = np.asarray(kind, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise MetricsError("seed weights must be n non-negative finite values with positive sum")
    return w / w.sum()


def _check_seed_dist(p0, n) -> np.ndarray:
    p0 = np.asarray(p0, dtype=np.float64)
    if p0.shape != (n,):
        raise MetricsError(f"seed distribution must have length {n}")
    if np.any(p0 < 0) or not np.all(np.isfinite(p0)):
        raise MetricsError("seed distribution has negative or non-finite entries")
    if abs(_neumaier(p0) - 1.0) > 1e-12:
        raise MetricsError(f"seed distribution sums to {p0.sum()!r}, not 1")
    return p0


def compute_fap(t: TransitionView, K: int, seed_dist=None) -> FapTable:
    t = _view(t)
    if K < 0:
        raise MetricsError("K must be >= 0")
    n = t.node_count
    p0 = np.full(n, 1.0 / n) if seed_dist is None else _check_seed_dist(seed_dist, n)
    tptr, tidx, tprob = t.transposed()
    rows = [p0]
    for _ in range(K):
        rows.append(_row_dot(tptr, tidx, tprob, rows[-1]))
    per_hop = np.vstack(rows)
    return FapTable(_sum_rows(rows), K, p0, per_hop)


def compute_access_prob_ie(g: Graph, t: TransitionView, layers: int) -> AccessProbTable:
    """Probability that each node is sampled within ``layers`` layers.

    ``P(n,1) = 1/|V|`` and for ``j > 1``

        P(n,j) = P(n,j-1) + (1 - P(n,j-1)) * (1 - prod_s (1 - P(s,j-1) R(s,n)))

    over in-neighbours ``s`` of ``n`` with ``R(s,n)`` the one-hop
    transition probability.
    """
    if layers < 1:
        raise MetricsError("layers must be >= 1")
    if t.graph is not g and t.node_count != g.node_count:
        raise MetricsError("graph and transition view disagree on node count")
    n = g.node_count
    tptr, tidx, tprob = t.transposed()
    p = np.full(n, 1.0 / n)
    hist = [p]
    edge_row = np.repeat(np.arange(n), np.diff(tptr))
    for _ in range(layers - 1):
        x = p[tidx] * tprob
        certain = x >= 1.0
        logs = np.log1p(-np.where(certain, 0.0, x))
        sumlog = _row_dot(tptr, np.arange(tidx.size), logs, np.ones(tidx.size))
        reached = -np.expm1(sumlog)
        reached[np.unique(edge_row[certain])] = 1.0
        p = p + (1.0 - p) * reached
        hist.append(p)
    return AccessProbTable(p, layers, np.vstack(hist))


def psgs_dense(t: TransitionView, cfg: SamplingConfig) -> np.ndarray:
    """Dense ``1 + sum_k A^{k-1} m_k`` using explicit matrix powers."""
    t = _view(t)
    a = t.dense()
    deg = t.out_degree.astype(np.float64)
    q = np.ones(t.node_count)
    for k, fan in enumerate(cfg.fanouts, start=1):
        q += np.linalg.matrix_power(a, k - 1) @ np.minimum(deg, fan)
    return q


def fap_dense(t: TransitionView, K: int, seed_dist=None) -> np.ndarray:
    t = _view(t)
    a = t.dense()
    n = t.node_count
    p0 = np.full(n, 1.0 / n) if seed_dist is None else np.asarray(seed_dist, dtype=np.float64)
    return sum(p0 @ np.linalg.matrix_power(a, k) for k in range(K + 1))


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    ci_low: float
    ci_high: float
    trials: int
    unique_mean: float

    def within(self, value: float, sigmas: float = 3.0) -> bool:
        return abs(self.mean - value) <= sigmas * self.stderr + 1e-12


def psgs_oracle_mc(g, cfg: SamplingConfig, node: int, trials: int, rng_seed: int = 0) -> MCEstimate:
    """Mean sampled-tree size (node instances, hop 0 included) over
    ``trials`` independent runs of the sampler, trial ``i`` on stream
    ``(rng_seed, i)``. ``unique_mean`` is the distinct-node count, kept as
    a diagnostic."""
    if trials < 1:
        raise MetricsError("trials must be >= 1")
    t = _view(g)
    sizes = np.empty(trials)
    uniq = np.empty(trials)
    for i in range(trials):
        r = sample_khop(t, node, cfg, rng_stream(rng_seed, i))
        sizes[i] = r.total_instances
        uniq[i] = r.unique_nodes.size
    mean = float(sizes.mean())
    se = float(sizes.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    return MCEstimate(mean, se, mean - 1.96 * se, mean + 1.96 * se, trials, float(uniq.mean()))


@dataclass(frozen=True, eq=False)
class FapEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    trials: int


def _walk_keys(t: TransitionView) -> np.ndarray:
    deg = np.diff(t.indptr)
    rows = np.repeat(np.arange(t.node_count), deg)
    cum = np.cumsum(t.probs)
    start = np.concatenate([[0.0], cum])[t.indptr[:-1]]
    return rows + (cum - np.repeat(start, deg))


def walk_step(t: TransitionView, pos: np.ndarray, u: np.ndarray, keys=None) -> np.ndarray:
    """Advance walkers at ``pos`` one step using uniforms ``u``; walkers at
    absorbing nodes (or already stopped, ``-1``) return ``-1``."""
    keys = _walk_keys(t) if keys is None else keys
    out = np.full(pos.shape, -1, dtype=np.int64)
    live = pos >= 0
    live[live] = t.out_degree[pos[live]] > 0
    p = pos[live]
    e = np.searchsorted(keys, p + u[live], side="right")
    e = np.clip(e, t.indptr[p], t.indptr[p + 1] - 1)
    out[live] = t.indices[e]
    return out


def fap_oracle_mc(g, K: int, trials: int, rng_seed: int = 0, seed_dist=None) -> FapEstimate:
    """Per-node expected visits over steps ``0..K`` of random walks.

    Walks run in fixed blocks of 8192, block ``b`` on stream
    ``(rng_seed, b)``, so estimates do not depend on execution order.
    """
    if trials < 1:
        raise MetricsError("trials must be >= 1")
    t = _view(g)
    n = t.node_count
    p0 = np.full(n, 1.0 / n) if seed_dist is None else _check_seed_dist(seed_dist, n)
    keys = _walk_keys(t)
    total = np.zeros(n)
    total_sq = np.zeros(n)
    for b, lo in enumerate(range(0, trials, _WALK_BLOCK)):
        size = min(_WALK_BLOCK, trials - lo)
        rng = rng_stream(rng_seed, b)
        pos = rng.choice(n, size=size, p=p0)
        visits = [pos]
        for _ in range(K):
            pos = walk_step(t, pos, rng.random(size), keys)
            visits.append(pos)
        v = np.stack(visits, axis=1)
        walker = np.repeat(np.arange(size), K + 1)
        node = v.ravel()
        ok = node >= 0
        pair = walker[ok] * n + node[ok]
        uniq, cnt = np.unique(pair, return_counts=True)
        nodes = uniq % n
        total += np.bincount(nodes, weights=cnt, minlength=n)
        total_sq += np.bincount(nodes, weights=cnt.astype(np.float64) ** 2, minlength=n)
    mean = total / trials
    if trials > 1:
        var = np.maximum(total_sq / trials - mean**2, 0.0) * trials / (trials - 1)
        se = np.sqrt(var / trials)
    else:
        se = np.zeros(n)
    return FapEstimate(mean, se, trials)


def save_table(path, values: np.ndarray, hops: int) -> None:
    values = np.asarray(values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(TABLE_MAGIC)
        fh.write(_TABLE_HEADER.pack(values.size, int(hops)))
        fh.write(values.tobytes())


def load_table(path) -> tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    if data[:6] != TABLE_MAGIC:
        raise MetricsError(f"{path}: bad magic, expected {TABLE_MAGIC!r}")
    n, k = _TABLE_HEADER.unpack_from(data, 6)
    body = data[6 + _TABLE_HEADER.size:]
    if len(body) != 8 * n:
        raise MetricsError(f"{path}: expected {n} values")
    return np.frombuffer(body, dtype="<f8").astype(np.float64), int(k)


def write_table_csv(path, values: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("node_id,value\n")
        for i, v in enumerate(np.asarray(values, dtype=np.float64).tolist()):
            fh.write(f"{i},{v!r}\n")


def read_table_csv(path) -> np.ndarray:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.size == 0:
        return np.zeros(0)
    ids = rows[:, 0].astype(np.int64)
    if not np.array_equal(ids, np.arange(ids.size)):
        raise MetricsError(f"{path}: node ids must be 0..n-1 in order")
    return rows[:, 1].copy()
