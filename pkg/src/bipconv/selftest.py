"""Fast invariant suite behind the ``selftest`` CLI command.

Each check is a compact, independent verification of a library contract;
one PASS/FAIL line prints per check.
"""

from __future__ import annotations

import numpy as np

from . import arch as A
from . import ops
from . import tensor as T
from .coarsen import build_coarsening_bigraph, voxel_grid
from .graph import GraphSignal, as_bipartite, radius_graph
from .kernels import EdgeConditionedKernel, eca_coeffs, gat_coeffs, make_kernel
from .rng import SplitMix64, derive
from .tensor import Tensor


def _random_spatial_graph(rng: SplitMix64, n: int, radius: float = 0.4):
    pos = rng.uniform_array((n, 2))
    return radius_graph(pos, radius)


def _check_embedding_equivalence() -> bool:
    for seed in range(10):
        rng = SplitMix64(derive(7, seed))
        g = _random_spatial_graph(rng, 12 + seed)
        sig = GraphSignal(rng.uniform_array((g.num_nodes, 3)))
        kernel = EdgeConditionedKernel(2, 3, 4, rng=SplitMix64(seed))
        for red in ("sum", "mean", "max"):
            a = ops.graph_conv(g, sig, kernel, red).array
            b = ops.bipartite_conv(as_bipartite(g), sig, kernel, red).array
            if not np.array_equal(a, b):
                return False
    return True


def _check_fusion_sum() -> bool:
    for seed in range(10):
        rng = SplitMix64(derive(11, seed))
        g = _random_spatial_graph(rng, 20)
        clustering = voxel_grid(g.positions, 0.35)
        bg = build_coarsening_bigraph(g, clustering, radius=0.0, remap="edges")
        sig = GraphSignal(rng.uniform_array((g.num_nodes, 2)))
        kernel = EdgeConditionedKernel(2, 2, 3, rng=SplitMix64(seed))
        fused = ops.bipartite_conv(bg, sig, kernel, "sum").array
        conv = ops.graph_conv(g, sig, kernel, "sum")
        pooled = ops.graph_pool(clustering.members(), conv, "sum").array
        if not np.allclose(fused, pooled, rtol=0.0, atol=1e-12):
            return False
    return True


def _check_max_fusion_counterexample() -> bool:
    # two sources into one pooled pair of nodes: max-of-max over remapped
    # edges differs from pooled per-node maxima whenever the per-node
    # winners disagree
    g_edges = [(0, 1, [1.0]), (1, 0, [-1.0]), (0, 2, [2.0]), (2, 0, [-2.0])]
    from .graph import DirectedGraph

    g = DirectedGraph(3, g_edges, positions=np.array([[0.0], [1.0], [2.0]]))
    clustering = voxel_grid(g.positions, 5.0)  # one cluster holding all nodes
    bg = build_coarsening_bigraph(g, clustering, radius=0.0, remap="edges")
    sig = GraphSignal(np.array([[1.0], [5.0], [-3.0]]))
    kernel = EdgeConditionedKernel(1, 1, 1, rng=SplitMix64(3))
    fused = ops.bipartite_conv(bg, sig, kernel, "max").array
    conv = ops.graph_conv(g, sig, kernel, "max")
    pooled = ops.graph_pool(clustering.members(), conv, "max").array
    return not np.allclose(fused, pooled, atol=1e-12)


def _check_lattice_stride() -> bool:
    from .graph import BipartiteGraph

    rng = SplitMix64(21)
    n = 64
    taps = {-1: 0.25, 0: 0.5, 1: -0.75}

    class TapKernel:
        in_dim = 1
        out_dim = 1
        fixed_reduction = None

        def messages(self, bg, feats, counters=None):
            w = Tensor(np.array([[[taps[int(t)]]] for t in bg.labels[:, 0]]))
            return T.edge_matvec(w, T.gather_rows(feats, bg.src))

    outs = np.arange(0, n, 2)
    edges = []
    for oi, center in enumerate(outs):
        for t in (-1, 0, 1):
            if 0 <= center + t < n:
                edges.append((center + t, oi, [float(t)]))
    bg = BipartiteGraph(n, outs.size, edges)
    x = rng.uniform_array((n, 1), -1.0, 1.0)
    got = ops.bipartite_conv(bg, GraphSignal(x), TapKernel(), "sum").array
    want = np.zeros((outs.size, 1))
    for oi, center in enumerate(outs):
        acc = 0.0
        for t in (-1, 0, 1):
            acc += (taps[t] * x[center + t, 0]) if 0 <= center + t < n else 0.0
        want[oi, 0] = acc
    return np.array_equal(got, want)


def _check_attention_normalization() -> bool:
    for seed in range(10):
        rng = SplitMix64(derive(31, seed))
        g = _random_spatial_graph(rng, 15)
        bg = as_bipartite(g)
        if bg.num_edges == 0:
            continue
        feats = Tensor(rng.uniform_array((g.num_nodes, 3)))
        for family in ("gat", "eca"):
            kernel = make_kernel(family, 2, 3, 4, SplitMix64(seed))
            alpha = (gat_coeffs(kernel, feats, bg) if family == "gat"
                     else eca_coeffs(kernel, bg.labels, bg)).data[:, 0]
            sums = np.zeros(bg.num_out)
            np.add.at(sums, bg.dst, alpha)
            covered = np.unique(bg.dst)
            if np.abs(sums[covered] - 1.0).max() > 1e-12:
                return False
    return True


def _check_aggregation() -> bool:
    rng = SplitMix64(41)
    for _ in range(100):
        n1 = rng.randint(10)
        n2 = rng.randint(10)
        if n1 + n2 == 0:
            n1 = 1
        a = rng.uniform_array((4, 3))
        b = rng.uniform_array((4, 3))
        got = ops.aggregate(GraphSignal(a), GraphSignal(b), n1, n2).array
        want = (n1 * a + n2 * b) / (n1 + n2)
        if n2 == 0:
            if not np.array_equal(got, a):
                return False
        elif not np.allclose(got, want, atol=1e-12):
            return False
    return True


def _check_conv_gradients() -> bool:
    rng = SplitMix64(51)
    g = _random_spatial_graph(rng, 10, radius=0.6)
    sig = GraphSignal(rng.uniform_array((10, 2)))
    kernel = EdgeConditionedKernel(2, 2, 3, rng=SplitMix64(5))
    w0 = kernel.mlp[0][0]

    def f(_):
        out = ops.graph_conv(g, sig, kernel, "mean")
        return T.sum_all(T.apply_activation(out.features, "tanh"))

    return T.grad_check(f, w0, max_coords=12) <= 1e-4


def _check_voxel_translation() -> bool:
    rng = SplitMix64(61)
    pos = rng.uniform_array((40, 2), 0.0, 5.0)
    a = voxel_grid(pos, 1.0)
    b = voxel_grid(pos + 3.0, 1.0)
    return np.array_equal(a.member_of, b.member_of)


def _check_parser_roundtrip() -> bool:
    strings = [
        "C(16)-C(32)-MP(2.5/32,7.5/32)-C(32)-C(32)-MP(7.5/32,22.5/32)-C(64)-GMP-FC(64)-D(0.2)-FC(10)",
        "C(16)-MP(2,3.4)-C(32)-MP(4,6.8)-C(64)-MP(8,30)-C(128)-D(0.5)-FC(10)",
    ]
    for s in strings:
        spec = A.parse_arch(s)
        if A.parse_arch(A.render_arch(spec)) != spec:
            return False
        fused = A.fuse_pooling(spec)
        if A.fuse_pooling(fused) != fused:
            return False
        if any(isinstance(l, (A.MaxPool, A.AvgPool)) for l in fused.layers):
            return False
    return True


def _check_build_determinism() -> bool:
    from .network import build_network

    spec = A.parse_arch("BC(8,2,3.4)-FC(4)")
    a = build_network(spec, 1, seed=9)
    b = build_network(spec, 1, seed=9)
    for (_, ta), (_, tb) in zip(a.parameters(), b.parameters()):
        if not np.array_equal(ta.data, tb.data):
            return False
    return True


CHECKS = [
    ("embedding equivalence (graph conv == bipartite conv)", _check_embedding_equivalence),
    ("fusion equivalence, sum reduction", _check_fusion_sum),
    ("max fusion counterexample", _check_max_fusion_counterexample),
    ("lattice stride-2 correlation", _check_lattice_stride),
    ("attention normalization", _check_attention_normalization),
    ("multi-graph aggregation", _check_aggregation),
    ("conv gradient check", _check_conv_gradients),
    ("voxel translation consistency", _check_voxel_translation),
    ("parser round-trip and fusion", _check_parser_roundtrip),
    ("build determinism", _check_build_determinism),
]


def run_selftest(out=print) -> int:
    failures = 0
    for name, fn in CHECKS:
        try:
            ok = fn()
        except Exception as exc:  # a crashed check is a failure, not an abort
            out(f"FAIL  {name}: {exc}")
            failures += 1
            continue
        out(f"{'PASS' if ok else 'FAIL'}  {name}")
        failures += 0 if ok else 1
    out(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return 0 if failures == 0 else 2
