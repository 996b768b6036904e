"""Convolution, pooling, aggregation, and global-pool operators.

There is exactly one convolution code path: :func:`graph_conv` delegates to
:func:`bipartite_conv` over the identity bipartite embedding. All operators
are pure functions over (graph, signal, parameters) and accumulate in a
canonical edge order, so outputs are bit-stable under edge permutations.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import ShapeError
from .graph import BipartiteGraph, DirectedGraph, GraphSignal, as_bipartite
from . import tensor as T
from .tensor import REDUCTIONS, Tensor

__all__ = [
    "bipartite_conv",
    "graph_conv",
    "graph_pool",
    "aggregate",
    "global_max_pool",
]


def _check_reduction(red: str) -> str:
    if red not in REDUCTIONS:
        raise ValueError(f"unknown reduction {red!r}; expected one of {REDUCTIONS}")
    return red


def bipartite_conv(bg: BipartiteGraph, signal: GraphSignal, kernel, red: str = "sum",
                   bias: Optional[Tensor] = None, counters=None) -> GraphSignal:
    """Convolve a signal on the in-node set onto the out-node set.

    For each out-node, the kernel's per-edge messages over its in-neighborhood
    are reduced with ``red`` (attention kernels fix the reduction to sum).
    Out-nodes with an empty neighborhood emit zero rows. The kernel is
    evaluated exactly once per edge; no work is spent on non-output nodes.

    Args:
        bg: bipartite graph whose edges route messages.
        signal: features bound to the in-node set.
        kernel: any of the weighting-kernel families.
        red: "sum", "mean", or "max".
        bias: optional per-output-channel bias added after the reduction.
        counters: optional op-count accumulator (see bench module).
    """
    _check_reduction(red)
    if signal.num_nodes != bg.num_in:
        raise ShapeError(f"signal has {signal.num_nodes} rows, graph expects {bg.num_in}")
    if signal.feature_dim != kernel.in_dim:
        raise ShapeError(f"signal dim {signal.feature_dim} != kernel in_dim {kernel.in_dim}")
    messages = kernel.messages(bg, signal.features, counters=counters)
    effective = kernel.fixed_reduction or red
    out = T.segment_reduce(messages, bg.dst, bg.num_out, effective, order_keys=bg.src)
    if bias is not None:
        out = T.add_bias(out, bias)
    if counters is not None:
        counters.kernel_evals += bg.num_edges
        counters.count_layer(bg.num_in, signal.feature_dim, bg.num_out, kernel.out_dim)
    return GraphSignal(out, num_nodes=bg.num_out)


def graph_conv(g: DirectedGraph, signal: GraphSignal, kernel, red: str = "sum",
               bias: Optional[Tensor] = None, counters=None) -> GraphSignal:
    """Graph convolution, defined by delegation to the bipartite operator."""
    return bipartite_conv(as_bipartite(g), signal, kernel, red, bias=bias, counters=counters)


def graph_pool(clusters, signal: GraphSignal, red: str = "sum", counters=None) -> GraphSignal:
    """Reduce each cluster of node features into one super-node row.

    ``clusters`` is a vertex-exclusive list of index groups; nodes assigned to
    no group are dropped. A node in two groups is an error.
    """
    _check_reduction(red)
    members: list[np.ndarray] = [np.asarray(c, dtype=np.int64) for c in clusters]
    if members:
        flat = np.concatenate(members) if any(c.size for c in members) else np.zeros(0, np.int64)
    else:
        flat = np.zeros(0, np.int64)
    if flat.size:
        if flat.min() < 0 or flat.max() >= signal.num_nodes:
            raise IndexError("cluster member index out of range")
        if np.unique(flat).size != flat.size:
            raise ValueError("clusters must be vertex exclusive; a node appears twice")
    for k, c in enumerate(members):
        if c.size == 0:
            raise ValueError(f"cluster {k} is empty")
    seg = np.concatenate([np.full(c.size, k, dtype=np.int64) for k, c in enumerate(members)]) \
        if members else np.zeros(0, np.int64)
    rows = T.gather_rows(signal.features, flat)
    out = T.segment_reduce(rows, seg, len(members), red, order_keys=flat)
    if counters is not None:
        counters.count_layer(signal.num_nodes, signal.feature_dim,
                             len(members), signal.feature_dim)
    return GraphSignal(out, num_nodes=len(members))


def aggregate(out1: GraphSignal, out2: GraphSignal, n1: int, n2: int) -> GraphSignal:
    """Node-count-weighted average of two signals on one output node set.

    Computes (n1*out1 + n2*out2) / (n1 + n2) elementwise; with n2 = 0 the
    result is out1 itself (bitwise), and symmetrically for n1 = 0.
    """
    if n1 < 0 or n2 < 0 or n1 + n2 == 0:
        raise ValueError(f"need non-negative weights with n1+n2 > 0, got {n1}, {n2}")
    if out1.features.shape != out2.features.shape:
        raise ShapeError(f"signal shapes differ: {out1.features.shape} vs {out2.features.shape}")
    if n2 == 0:
        return out1
    if n1 == 0:
        return out2
    total = float(n1 + n2)
    mixed = T.add(T.scale(out1.features, n1 / total), T.scale(out2.features, n2 / total))
    return GraphSignal(mixed, num_nodes=out1.num_nodes)


def global_max_pool(signal: GraphSignal, counters=None) -> GraphSignal:
    """Elementwise max over all node rows; gradient routes to the argmax rows."""
    if signal.num_nodes == 0:
        raise ValueError("global max pool of an empty signal")
    n = signal.num_nodes
    seg = np.zeros(n, dtype=np.int64)
    out = T.segment_reduce(signal.features, seg, 1, "max", order_keys=np.arange(n))
    if counters is not None:
        counters.count_layer(n, signal.feature_dim, 1, signal.feature_dim)
    return GraphSignal(out, num_nodes=1)
