"""Spatial graph coarsening and expansion.

Coarsening assigns nodes to axis-aligned voxels, numbers the non-empty
voxels lexicographically, and places each super-node at the centroid of its
members. The coarsening bipartite graph connects input nodes to super-nodes
so that a single bipartite convolution replaces a conv-then-pool pair;
expansion runs the same construction in the other direction to interpolate
features onto a denser node set.

Only spatial graphs are supported: remapped edges are labeled with position
offsets, and coarsening a graph without positions is an error.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.spatial import cKDTree

from .graph import BipartiteGraph, DirectedGraph

__all__ = [
    "Clustering",
    "voxel_grid",
    "build_coarsening_bigraph",
    "midpoint_expand",
    "build_expansion_bigraph",
]

logger = logging.getLogger(__name__)


class Clustering:
    """Vertex-exclusive grouping of nodes into super-nodes with centroids."""

    def __init__(self, member_of: np.ndarray, super_positions: np.ndarray):
        member_of = np.asarray(member_of, dtype=np.int64)
        super_positions = np.asarray(super_positions, dtype=np.float64)
        k = super_positions.shape[0]
        if member_of.size and (member_of.min() < 0 or member_of.max() >= k):
            raise ValueError("cluster index out of range")
        counts = np.bincount(member_of, minlength=k)
        if k and counts.min() == 0:
            raise ValueError("every cluster must be non-empty")
        self.member_of = member_of
        self.super_positions = super_positions
        self.num_clusters = k
        member_of.setflags(write=False)
        super_positions.setflags(write=False)

    def members(self) -> list[np.ndarray]:
        order = np.argsort(self.member_of, kind="stable")
        bounds = np.searchsorted(self.member_of[order], np.arange(self.num_clusters + 1))
        return [order[bounds[k]:bounds[k + 1]] for k in range(self.num_clusters)]

    def __repr__(self) -> str:
        return f"Clustering(nodes={self.member_of.size}, clusters={self.num_clusters})"


def voxel_grid(positions, resolution: float) -> Clustering:
    """Cluster points into axis-aligned voxels of side ``resolution``.

    The voxel origin is the componentwise minimum of the positions; non-empty
    voxels become clusters numbered in lexicographic voxel-index order, and
    each cluster's position is the centroid of its members.
    """
    if resolution <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[0] == 0:
        raise ValueError(f"positions must be a non-empty n x k matrix, got {positions.shape}")
    cells = np.floor((positions - positions.min(axis=0)) / resolution).astype(np.int64)
    uniq, member_of = np.unique(cells, axis=0, return_inverse=True)
    member_of = member_of.reshape(-1)
    k = uniq.shape[0]
    counts = np.bincount(member_of, minlength=k).astype(np.float64)
    centroids = np.zeros((k, positions.shape[1]))
    np.add.at(centroids, member_of, positions)
    centroids /= counts[:, None]
    return Clustering(member_of, centroids)


def build_coarsening_bigraph(g: DirectedGraph, clustering: Clustering, radius: float,
                             remap: str = "radius") -> BipartiteGraph:
    """Bipartite graph from a graph's nodes onto a clustering's super-nodes.

    remap="radius": edge (v_i -> u_k) whenever ||p_i - u_k|| <= radius, with
    label p_i - u_k. This realizes the pooling stage's (radius, resolution)
    spatial parameters directly.

    remap="edges": every original edge (i -> j) becomes (i -> cluster(j))
    keeping its original label. This is the literal remap under which a
    sum-reduction bipartite convolution reproduces conv-then-pool exactly.
    """
    if g.positions is None:
        raise ValueError("coarsening needs node positions")
    if clustering.member_of.shape[0] != g.num_nodes:
        raise ValueError(f"clustering covers {clustering.member_of.shape[0]} nodes, "
                         f"graph has {g.num_nodes}")
    supers = clustering.super_positions
    if remap == "radius":
        if radius <= 0:
            raise ValueError(f"radius must be positive, got {radius}")
        neighbor_lists = cKDTree(supers).query_ball_point(g.positions, r=radius)
        src = np.concatenate([np.full(len(ks), i, dtype=np.int64)
                              for i, ks in enumerate(neighbor_lists)]) \
            if g.num_nodes else np.zeros(0, np.int64)
        dst = np.concatenate([np.asarray(sorted(ks), dtype=np.int64)
                              for ks in neighbor_lists]) \
            if g.num_nodes else np.zeros(0, np.int64)
        labels = g.positions[src] - supers[dst]
    elif remap == "edges":
        src = g.src
        dst = clustering.member_of[g.dst]
        labels = g.labels
    else:
        raise ValueError(f"unknown remap mode {remap!r}; expected 'radius' or 'edges'")
    return BipartiteGraph(g.num_nodes, clustering.num_clusters, (src, dst, labels),
                          in_positions=g.positions, out_positions=supers,
                          label_dim=g.label_dim if g.num_edges else g.positions.shape[1])


def midpoint_expand(g: DirectedGraph) -> DirectedGraph:
    """Insert a node at the midpoint of every undirected edge.

    The input must be symmetric (every edge paired with its reverse). Each
    midpoint connects to both endpoints in both directions with position-
    offset labels; original nodes and edges are retained.
    """
    if g.positions is None:
        raise ValueError("midpoint expansion needs node positions")
    pair_set = set(zip(g.src.tolist(), g.dst.tolist()))
    for i, j in pair_set:
        if (j, i) not in pair_set:
            raise ValueError(f"graph is not symmetric: edge ({i}, {j}) has no reverse")
    undirected = sorted({(min(i, j), max(i, j)) for i, j in pair_set if i != j})
    n = g.num_nodes
    mid_pos = np.asarray([(g.positions[i] + g.positions[j]) / 2.0 for i, j in undirected]) \
        if undirected else np.zeros((0, g.positions.shape[1]))
    positions = np.concatenate([g.positions, mid_pos], axis=0)

    src = [g.src]
    dst = [g.dst]
    labels = [g.labels]
    for m, (i, j) in enumerate(undirected):
        mid = n + m
        for a, b in ((mid, i), (i, mid), (mid, j), (j, mid)):
            src.append(np.asarray([a]))
            dst.append(np.asarray([b]))
            labels.append((positions[a] - positions[b])[None, :])
    return DirectedGraph(n + len(undirected),
                         (np.concatenate(src), np.concatenate(dst),
                          np.concatenate(labels, axis=0)),
                         positions=positions, label_dim=positions.shape[1])


def build_expansion_bigraph(coarse_positions, fine_positions, radius: float) -> BipartiteGraph:
    """Bipartite graph from a coarse node set onto a finer one.

    Edge (u_k -> w) whenever ||u_k - w|| <= radius, labeled u_k - w. Fine
    nodes with no coarse node in range are permitted (they will produce zero
    interpolation output); their count is logged.
    """
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    coarse = np.asarray(coarse_positions, dtype=np.float64)
    fine = np.asarray(fine_positions, dtype=np.float64)
    if coarse.ndim != 2 or fine.ndim != 2 or coarse.shape[1] != fine.shape[1]:
        raise ValueError("coarse and fine positions must be matrices of one spatial dim")
    neighbor_lists = cKDTree(coarse).query_ball_point(fine, r=radius)
    src = np.concatenate([np.asarray(sorted(ks), dtype=np.int64) for ks in neighbor_lists]) \
        if fine.shape[0] else np.zeros(0, np.int64)
    dst = np.concatenate([np.full(len(ks), w, dtype=np.int64)
                          for w, ks in enumerate(neighbor_lists)]) \
        if fine.shape[0] else np.zeros(0, np.int64)
    labels = coarse[src] - fine[dst]
    isolated = sum(1 for ks in neighbor_lists if not ks)
    if isolated:
        logger.warning("expansion leaves %d of %d fine nodes without coarse neighbors",
                       isolated, fine.shape[0])
    return BipartiteGraph(coarse.shape[0], fine.shape[0], (src, dst, labels),
                          in_positions=coarse, out_positions=fine,
                          label_dim=coarse.shape[1])
