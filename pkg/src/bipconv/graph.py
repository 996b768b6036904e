"""Graph and bipartite-graph data structures with labeled edges.

Edges carry real-vector labels (spatial offsets in every spatial pipeline
here). All types are immutable after construction and safe to share across
concurrent readers.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np
from scipy.spatial import cKDTree

from .tensor import Tensor, as_tensor

__all__ = [
    "DirectedGraph",
    "BipartiteGraph",
    "GraphSignal",
    "as_bipartite",
    "neighborhood",
    "radius_graph",
    "with_self_loops",
    "isolated_out_nodes",
    "write_graph",
    "read_graph",
]


def _as_edge_arrays(edges, label_dim: Optional[int] = None):
    """Normalize an edge sequence to (src, dst, labels) arrays."""
    if isinstance(edges, tuple) and len(edges) == 3 and isinstance(edges[0], np.ndarray):
        src, dst, labels = edges
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.float64)
    else:
        edges = list(edges)
        src = np.asarray([e[0] for e in edges], dtype=np.int64)
        dst = np.asarray([e[1] for e in edges], dtype=np.int64)
        if edges:
            rows = [np.atleast_1d(np.asarray(e[2], dtype=np.float64)) for e in edges]
            if len({r.shape[0] for r in rows}) != 1:
                raise ValueError("all edge labels must share one dimension")
            labels = np.stack(rows)
        else:
            labels = np.zeros((0, 0 if label_dim is None else label_dim))
    if labels.ndim == 1:
        labels = labels[:, None]
    if labels.ndim != 2 or labels.shape[0] != src.shape[0]:
        raise ValueError("edge labels must form one real vector per edge, all of one dimension")
    if not np.all(np.isfinite(labels)):
        raise ValueError("edge labels must be finite")
    return src, dst, labels


def _check_positions(positions, num_nodes: int, what: str) -> Optional[np.ndarray]:
    if positions is None:
        return None
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[0] != num_nodes:
        raise ValueError(f"{what} must have exactly {num_nodes} rows, got shape {positions.shape}")
    if not np.all(np.isfinite(positions)):
        raise ValueError(f"{what} must be finite")
    positions.setflags(write=False)
    return positions


class DirectedGraph:
    """Directed graph with labeled edges and optional node positions.

    An edge (src, dst, label) carries information src -> dst; duplicate
    (src, dst) pairs are rejected at construction.
    """

    def __init__(self, num_nodes: int, edges, positions=None, label_dim: Optional[int] = None):
        if num_nodes < 0:
            raise ValueError("num_nodes must be non-negative")
        self.num_nodes = int(num_nodes)
        self.src, self.dst, self.labels = _as_edge_arrays(edges, label_dim)
        if self.src.size:
            if self.src.min() < 0 or self.src.max() >= num_nodes:
                raise ValueError("edge source index out of range")
            if self.dst.min() < 0 or self.dst.max() >= num_nodes:
                raise ValueError("edge destination index out of range")
            pairs = self.src * num_nodes + self.dst
            if np.unique(pairs).size != pairs.size:
                raise ValueError("duplicate (src, dst) edge in DirectedGraph")
        self.positions = _check_positions(positions, num_nodes, "positions")
        for arr in (self.src, self.dst, self.labels):
            arr.setflags(write=False)

    @property
    def num_edges(self) -> int:
        return self.src.shape[0]

    @property
    def label_dim(self) -> int:
        return self.labels.shape[1]

    def edges(self) -> Iterator[tuple[int, int, np.ndarray]]:
        for i in range(self.num_edges):
            yield int(self.src[i]), int(self.dst[i]), self.labels[i]

    def __repr__(self) -> str:
        return f"DirectedGraph(nodes={self.num_nodes}, edges={self.num_edges})"


class BipartiteGraph:
    """Bipartite graph: every edge runs from an in-node to an out-node.

    Edges are stored in canonical (src, dst, label) lexicographic order and
    exact duplicate triples are silently dropped, so machine-generated edge
    lists (e.g. coarsening remaps) are forgiving while downstream reductions
    stay bit-stable under input permutations.
    """

    def __init__(self, num_in: int, num_out: int, edges,
                 in_positions=None, out_positions=None,
                 label_dim: Optional[int] = None, shared_nodes: bool = False):
        if num_in < 0 or num_out < 0:
            raise ValueError("node counts must be non-negative")
        self.num_in = int(num_in)
        self.num_out = int(num_out)
        src, dst, labels = _as_edge_arrays(edges, label_dim)
        if src.size:
            if src.min() < 0 or src.max() >= num_in:
                raise ValueError("edge source index out of range")
            if dst.min() < 0 or dst.max() >= num_out:
                raise ValueError("edge destination index out of range")
            order = np.lexsort(tuple(labels[:, k] for k in reversed(range(labels.shape[1])))
                               + (dst, src))
            src, dst, labels = src[order], dst[order], labels[order]
            same = np.zeros(src.shape[0], dtype=bool)
            same[1:] = ((src[1:] == src[:-1]) & (dst[1:] == dst[:-1])
                        & np.all(labels[1:] == labels[:-1], axis=1))
            keep = ~same
            src, dst, labels = src[keep], dst[keep], labels[keep]
        self.src, self.dst, self.labels = src, dst, labels
        self.in_positions = _check_positions(in_positions, num_in, "in_positions")
        self.out_positions = _check_positions(out_positions, num_out, "out_positions")
        self.shared_nodes = bool(shared_nodes)
        self._by_dst = None
        for arr in (self.src, self.dst, self.labels):
            arr.setflags(write=False)

    @property
    def num_edges(self) -> int:
        return self.src.shape[0]

    @property
    def label_dim(self) -> int:
        return self.labels.shape[1]

    def edges(self) -> Iterator[tuple[int, int, np.ndarray]]:
        for i in range(self.num_edges):
            yield int(self.src[i]), int(self.dst[i]), self.labels[i]

    def _dst_index(self):
        if self._by_dst is None:
            order = np.lexsort((self.src, self.dst))
            bounds = np.searchsorted(self.dst[order], np.arange(self.num_out + 1))
            self._by_dst = (order, bounds)
        return self._by_dst

    def __repr__(self) -> str:
        return f"BipartiteGraph(in={self.num_in}, out={self.num_out}, edges={self.num_edges})"


class GraphSignal:
    """A |V| x N feature matrix bound to a node set."""

    def __init__(self, features, num_nodes: Optional[int] = None):
        t = as_tensor(features)
        if t.ndim != 2:
            raise ValueError(f"signal features must be a matrix, got shape {t.shape}")
        if num_nodes is not None and t.shape[0] != num_nodes:
            raise ValueError(f"signal has {t.shape[0]} rows but graph has {num_nodes} nodes")
        self.features: Tensor = t
        self.num_nodes = t.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def array(self) -> np.ndarray:
        return self.features.data

    def __repr__(self) -> str:
        return f"GraphSignal(nodes={self.num_nodes}, dim={self.feature_dim})"


def as_bipartite(g: DirectedGraph) -> BipartiteGraph:
    """Embed a graph as a bipartite graph with identical in/out node sets."""
    return BipartiteGraph(
        g.num_nodes, g.num_nodes, (g.src, g.dst, g.labels),
        in_positions=g.positions, out_positions=g.positions,
        label_dim=g.label_dim, shared_nodes=True,
    )


def neighborhood(bg: BipartiteGraph, v_o: int) -> list[tuple[int, np.ndarray]]:
    """In-nodes with an edge into v_o, ascending by source index."""
    if not 0 <= v_o < bg.num_out:
        raise IndexError(f"out-node {v_o} out of range [0, {bg.num_out})")
    order, bounds = bg._dst_index()
    sel = order[bounds[v_o]:bounds[v_o + 1]]
    return [(int(bg.src[i]), bg.labels[i]) for i in sel]


def radius_graph(positions, rho: float) -> DirectedGraph:
    """Connect every ordered pair of distinct points within distance rho.

    The edge i -> j carries label p_i - p_j; the edge set is symmetric with
    antisymmetric labels. Self-loops are excluded.
    """
    if rho <= 0:
        raise ValueError(f"radius must be positive, got {rho}")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2:
        raise ValueError(f"positions must be an n x k matrix, got shape {positions.shape}")
    if not np.all(np.isfinite(positions)):
        raise ValueError("positions must be finite")
    n = positions.shape[0]
    if n == 0:
        return DirectedGraph(0, [], positions=positions, label_dim=positions.shape[1])
    pairs = cKDTree(positions).query_pairs(r=rho, output_type="ndarray")
    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    labels = positions[src] - positions[dst]
    return DirectedGraph(n, (src, dst, labels), positions=positions,
                         label_dim=positions.shape[1])


def with_self_loops(bg: BipartiteGraph) -> BipartiteGraph:
    """Add a zero-label self edge for every node of a shared-node bipartite graph."""
    if not bg.shared_nodes:
        raise ValueError("self loops are only defined when in and out node sets coincide")
    n = bg.num_in
    idx = np.arange(n, dtype=np.int64)
    src = np.concatenate([bg.src, idx])
    dst = np.concatenate([bg.dst, idx])
    labels = np.concatenate([bg.labels, np.zeros((n, bg.label_dim))], axis=0)
    return BipartiteGraph(n, n, (src, dst, labels),
                          in_positions=bg.in_positions, out_positions=bg.out_positions,
                          label_dim=bg.label_dim, shared_nodes=True)


def isolated_out_nodes(bg: BipartiteGraph) -> np.ndarray:
    """Out-node indices with an empty in-neighborhood."""
    deg = np.bincount(bg.dst, minlength=bg.num_out)
    return np.flatnonzero(deg == 0)


# ---------------------------------------------------------------------------
# line-oriented serialization


def _fmt_row(row) -> str:
    return " ".join(f"{v:.17g}" for v in row)


def write_graph(path, g) -> None:
    """Serialize a graph to the line-oriented text format.

    DirectedGraph header: ``GRAPH v1 <num_nodes> <num_edges> <label_dim> <pos_dim>``
    followed by one position row per node (when pos_dim > 0) and one edge per
    line ``src dst l1 ... ld``. The bipartite variant uses
    ``BIGRAPH v1 <num_in> <num_out> <num_edges> <label_dim> <pos_dim>`` with
    in-node positions before out-node positions. Floats carry 17 significant
    digits so files round-trip exactly.
    """
    lines = []
    if isinstance(g, DirectedGraph):
        pos_dim = 0 if g.positions is None else g.positions.shape[1]
        lines.append(f"GRAPH v1 {g.num_nodes} {g.num_edges} {g.label_dim} {pos_dim}")
        if pos_dim:
            lines.extend(_fmt_row(p) for p in g.positions)
    elif isinstance(g, BipartiteGraph):
        pos_dim = 0 if g.in_positions is None else g.in_positions.shape[1]
        if (g.out_positions is None) != (g.in_positions is None):
            raise ValueError("bipartite serialization needs positions on both sides or neither")
        lines.append(f"BIGRAPH v1 {g.num_in} {g.num_out} {g.num_edges} {g.label_dim} {pos_dim}")
        if pos_dim:
            lines.extend(_fmt_row(p) for p in g.in_positions)
            lines.extend(_fmt_row(p) for p in g.out_positions)
    else:
        raise TypeError(f"cannot serialize {type(g).__name__}")
    for i in range(g.num_edges):
        lines.append(f"{g.src[i]} {g.dst[i]} " + _fmt_row(g.labels[i]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _read_rows(lines, start: int, count: int, dim: int) -> tuple[np.ndarray, int]:
    rows = np.zeros((count, dim))
    for i in range(count):
        rows[i] = [float(v) for v in lines[start + i].split()]
    return rows, start + count


def read_graph(path):
    """Read a graph serialized by :func:`write_graph`."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    head = lines[0].split()
    if head[:2] == ["GRAPH", "v1"]:
        num_nodes, num_edges, label_dim, pos_dim = map(int, head[2:6])
        pos = None
        at = 1
        if pos_dim:
            pos, at = _read_rows(lines, at, num_nodes, pos_dim)
        src, dst, labels = _read_edges(lines, at, num_edges, label_dim)
        return DirectedGraph(num_nodes, (src, dst, labels), positions=pos, label_dim=label_dim)
    if head[:2] == ["BIGRAPH", "v1"]:
        num_in, num_out, num_edges, label_dim, pos_dim = map(int, head[2:7])
        in_pos = out_pos = None
        at = 1
        if pos_dim:
            in_pos, at = _read_rows(lines, at, num_in, pos_dim)
            out_pos, at = _read_rows(lines, at, num_out, pos_dim)
        src, dst, labels = _read_edges(lines, at, num_edges, label_dim)
        return BipartiteGraph(num_in, num_out, (src, dst, labels),
                              in_positions=in_pos, out_positions=out_pos, label_dim=label_dim)
    raise ValueError(f"{path}: unrecognized graph header {lines[0]!r}")


def _read_edges(lines, start: int, count: int, label_dim: int):
    src = np.zeros(count, dtype=np.int64)
    dst = np.zeros(count, dtype=np.int64)
    labels = np.zeros((count, label_dim))
    for i in range(count):
        parts = lines[start + i].split()
        src[i], dst[i] = int(parts[0]), int(parts[1])
        labels[i] = [float(v) for v in parts[2:]]
    return src, dst, labels
