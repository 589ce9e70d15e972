"""Directed weighted graphs in compressed sparse-row form.

A :class:`Graph` stores the raw edge list exactly as loaded (parallel edges
and self-loops included). A :class:`TransitionView` is the row-stochastic
matrix derived from it: parallel edges are merged by summing their weights,
zero-weight edges are dropped and zero-out-degree rows stay all-zero
(absorbing).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

CSR_MAGIC = b"QVCSR1"
_CSR_HEADER = struct.Struct("<QQ")


class GraphError(ValueError):
    """Base class for graph loading and validation failures."""


class GraphParseError(GraphError):
    def __init__(self, path, lineno: int, line: str, reason: str):
        self.path = str(path)
        self.lineno = lineno
        self.line = line
        super().__init__(f"{path}:{lineno}: {reason}: {line.strip()!r}")


class GraphValidationError(GraphError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    node_count: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    edge_weights: np.ndarray

    def __post_init__(self):
        for name in ("row_offsets", "col_indices", "edge_weights"):
            arr = getattr(self, name)
            arr.setflags(write=False)
        _validate_csr(self.node_count, self.row_offsets, self.col_indices, self.edge_weights)

    @property
    def edge_count(self) -> int:
        return int(self.col_indices.shape[0])

    @property
    def out_degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets).astype(np.int64)

    def out_neighbors(self, node: int) -> np.ndarray:
        return self.col_indices[self.row_offsets[node]:self.row_offsets[node + 1]]

    def out_weights(self, node: int) -> np.ndarray:
        return self.edge_weights[self.row_offsets[node]:self.row_offsets[node + 1]]

    def edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(src, dst, weight)`` arrays in CSR order."""
        src = np.repeat(np.arange(self.node_count, dtype=np.int64), self.out_degrees)
        return src, self.col_indices.copy(), self.edge_weights.copy()

    def to_scipy(self) -> sp.csr_matrix:
        """Weighted adjacency as a scipy CSR matrix (duplicates summed)."""
        m = sp.csr_matrix(
            (self.edge_weights, self.col_indices, self.row_offsets),
            shape=(self.node_count, self.node_count),
        )
        m = m.copy()
        m.sum_duplicates()
        return m

    def edge_multiset(self) -> list[tuple[int, int, float]]:
        src, dst, w = self.edges()
        return sorted(zip(src.tolist(), dst.tolist(), w.tolist()))

    def __repr__(self) -> str:
        return f"Graph(node_count={self.node_count}, edge_count={self.edge_count})"


def _validate_csr(n, offsets, cols, weights):
    if n <= 0:
        raise GraphValidationError("graph has no nodes")
    if offsets.shape != (n + 1,):
        raise GraphValidationError(f"row_offsets must have length {n + 1}, got {offsets.shape[0]}")
    if offsets[0] != 0:
        raise GraphValidationError("row_offsets[0] must be 0")
    if np.any(np.diff(offsets) < 0):
        raise GraphValidationError("row_offsets must be non-decreasing")
    if offsets[-1] != cols.shape[0] or cols.shape != weights.shape:
        raise GraphValidationError("row_offsets[-1] must equal edge_count and match weights")
    if cols.size and (cols.min() < 0 or cols.max() >= n):
        raise GraphValidationError("col_indices out of range")
    if not np.all(np.isfinite(weights)):
        raise GraphValidationError("edge weights must be finite")
    if np.any(weights < 0):
        raise GraphValidationError("edge weights must be non-negative")
    deg = np.diff(offsets)
    if np.any(deg > 0):
        sums = np.add.reduceat(weights, offsets[:-1][deg > 0]) if weights.size else np.zeros(0)
        if np.any(sums <= 0):
            bad = int(np.flatnonzero(deg > 0)[np.flatnonzero(sums <= 0)[0]])
            raise GraphValidationError(f"node {bad} has out-edges whose weights are all zero")


def from_edges(src, dst, weights=None, node_count: int | None = None) -> Graph:
    """Build a :class:`Graph` from parallel edge arrays.

    Edges keep their relative input order within each source row.
    """
    src = np.asarray(src, dtype=np.int64).ravel()
    dst = np.asarray(dst, dtype=np.int64).ravel()
    if src.shape != dst.shape:
        raise GraphValidationError("src and dst must have the same length")
    if weights is None:
        weights = np.ones(src.shape[0], dtype=np.float64)
    else:
        weights = np.asarray(weights, dtype=np.float64).ravel()
        if weights.shape != src.shape:
            raise GraphValidationError("weights must match the edge count")
    if src.size and (src.min() < 0 or dst.min() < 0):
        raise GraphValidationError("node ids must be non-negative")
    if node_count is None:
        if src.size == 0:
            raise GraphValidationError("empty graph")
        node_count = int(max(src.max(), dst.max())) + 1
    if src.size and max(src.max(), dst.max()) >= node_count:
        raise GraphValidationError("node id exceeds node_count")
    order = np.argsort(src, kind="stable")
    counts = np.bincount(src, minlength=node_count)
    offsets = np.zeros(node_count + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return Graph(node_count, offsets, dst[order].copy(), weights[order].copy())


def _parse_edge_list(path: Path):
    src, dst, wts = [], [], []
    declared = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line.startswith("#"):
                parts = line[1:].replace(":", " ").split()
                if len(parts) == 2 and parts[0].lower() == "nodes":
                    try:
                        declared = int(parts[1])
                    except ValueError:
                        raise GraphParseError(path, lineno, raw, "bad node-count directive") from None
                continue
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (2, 3):
                raise GraphParseError(path, lineno, raw, "expected 'src dst [weight]'")
            try:
                s, d = int(parts[0]), int(parts[1])
                w = float(parts[2]) if len(parts) == 3 else 1.0
            except ValueError:
                raise GraphParseError(path, lineno, raw, "non-numeric field") from None
            if s < 0 or d < 0:
                raise GraphParseError(path, lineno, raw, "negative node id")
            if not np.isfinite(w) or w < 0:
                raise GraphParseError(path, lineno, raw, "weight must be finite and non-negative")
            src.append(s)
            dst.append(d)
            wts.append(w)
    return src, dst, wts, declared


def _remap(src, dst):
    ids = np.unique(np.concatenate([src, dst]))
    return np.searchsorted(ids, src), np.searchsorted(ids, dst), ids.size


def load_graph(path, format: str = "edge-list-text", remap: bool = False) -> Graph:
    """Load a graph from ``edge-list-text`` or ``csr-binary``.

    Edge lists hold one ``src dst [weight]`` edge per line; ``#`` starts a
    comment. A ``# nodes N`` line declares the node count so trailing
    isolated nodes can be represented. Without it every id in
    ``0..max_id`` must appear in some edge, unless ``remap`` is set, in
    which case ids are relabelled densely in ascending order.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"graph file not found: {path}")
    if format == "csr-binary":
        return load_csr_binary(path)
    if format != "edge-list-text":
        raise GraphError(f"unknown graph format {format!r}")

    src, dst, wts, declared = _parse_edge_list(path)
    if not src:
        raise GraphValidationError(f"{path}: empty graph")
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if remap:
        src, dst, n = _remap(src, dst)
        return from_edges(src, dst, wts, node_count=n)
    if declared is not None:
        if max(src.max(), dst.max()) >= declared:
            raise GraphValidationError(f"{path}: node id exceeds declared node count {declared}")
        return from_edges(src, dst, wts, node_count=declared)
    n = int(max(src.max(), dst.max())) + 1
    seen = np.zeros(n, dtype=bool)
    seen[src] = True
    seen[dst] = True
    if not seen.all():
        missing = np.flatnonzero(~seen)
        raise GraphValidationError(
            f"{path}: node ids are not contiguous; {missing.size} ids unused "
            f"(first {missing[:5].tolist()}); pass remap=True or declare '# nodes N'"
        )
    return from_edges(src, dst, wts, node_count=n)


def save_edge_list(g: Graph, path) -> None:
    src, dst, w = g.edges()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# nodes {g.node_count}\n")
        for s, d, x in zip(src.tolist(), dst.tolist(), w.tolist()):
            fh.write(f"{s} {d} {x!r}\n")


def save_csr_binary(g: Graph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CSR_MAGIC)
        fh.write(_CSR_HEADER.pack(g.node_count, g.edge_count))
        fh.write(np.asarray(g.row_offsets, dtype="<u8").tobytes())
        fh.write(np.asarray(g.col_indices, dtype="<u8").tobytes())
        fh.write(np.asarray(g.edge_weights, dtype="<f8").tobytes())


def load_csr_binary(path) -> Graph:
    data = Path(path).read_bytes()
    if data[:6] != CSR_MAGIC:
        raise GraphError(f"{path}: bad magic, expected {CSR_MAGIC!r}")
    if len(data) < 6 + _CSR_HEADER.size:
        raise GraphError(f"{path}: truncated header")
    n, m = _CSR_HEADER.unpack_from(data, 6)
    pos = 6 + _CSR_HEADER.size
    expected = pos + 8 * (n + 1) + 16 * m
    if len(data) != expected:
        raise GraphError(f"{path}: expected {expected} bytes, found {len(data)}")
    offsets = np.frombuffer(data, dtype="<u8", count=n + 1, offset=pos).astype(np.int64)
    pos += 8 * (n + 1)
    cols = np.frombuffer(data, dtype="<u8", count=m, offset=pos).astype(np.int64)
    pos += 8 * m
    weights = np.frombuffer(data, dtype="<f8", count=m, offset=pos).astype(np.float64)
    return Graph(int(n), offsets, cols, weights)


@dataclass(frozen=True, eq=False)
class TransitionView:
    """Row-stochastic view of a graph.

    ``indptr``/``indices``/``probs`` form a coalesced CSR matrix with one
    entry per distinct positive-weight edge ``i -> j`` and
    ``probs = w(i->j) / sum_j w(i->.)``.
    """

    graph: Graph
    row_sums: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    probs: np.ndarray
    _transpose: list = field(default_factory=list, repr=False, compare=False)

    @property
    def node_count(self) -> int:
        return self.graph.node_count

    @property
    def out_degree(self) -> np.ndarray:
        """Number of distinct out-neighbours reachable with positive probability."""
        return np.diff(self.indptr).astype(np.int64)

    def row(self, node: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.indptr[node], self.indptr[node + 1]
        return self.indices[lo:hi], self.probs[lo:hi]

    def delta(self, i: int, j: int) -> float:
        cols, p = self.row(i)
        hit = p[cols == j]
        return float(hit[0]) if hit.size else 0.0

    def matrix(self) -> sp.csr_matrix:
        n = self.node_count
        return sp.csr_matrix((self.probs, self.indices, self.indptr), shape=(n, n))

    def transposed(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """CSR arrays of the transpose: row ``i`` lists ``(j, delta(j, i))``."""
        if not self._transpose:
            t = self.matrix().T.tocsr()
            t.sort_indices()
            self._transpose.append(
                (t.indptr.astype(np.int64), t.indices.astype(np.int64), t.data.astype(np.float64))
            )
        return self._transpose[0]

    def dense(self) -> np.ndarray:
        return self.matrix().toarray()


def transition_view(g: Graph) -> TransitionView:
    if np.any(g.edge_weights < 0):
        raise GraphValidationError("negative edge weight")
    m = g.to_scipy()
    m.eliminate_zeros()
    m.sort_indices()
    indptr = m.indptr.astype(np.int64)
    indices = m.indices.astype(np.int64)
    data = m.data.astype(np.float64)
    deg = np.diff(indptr)
    row_sums = np.zeros(g.node_count)
    nz = deg > 0
    if data.size:
        row_sums[nz] = np.add.reduceat(data, indptr[:-1][nz])
    probs = data / np.repeat(np.where(nz, row_sums, 1.0), deg)
    return TransitionView(g, row_sums, indptr, indices, probs)


def in_adjacency(g: Graph) -> Graph:
    """Transpose: every edge ``(i -> j, w)`` becomes ``(j -> i, w)``."""
    src, dst, w = g.edges()
    return from_edges(dst, src, w, node_count=g.node_count)
