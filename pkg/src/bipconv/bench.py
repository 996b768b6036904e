"""Instrumented op counting for the conv-then-pool vs fused comparison.

Counts, not wall-clock, are the asserted metric; wall-clock is reported for
reference only. The accounting model:

* kernel_evals: one per edge message, summed over conv layers.
* mac_ops: multiply-accumulates of kernel generation, message transforms,
  and dense layers (reduction adds are not MACs and are excluded).
* nodes_materialized: output feature rows allocated per layer, summed; a
  conv-then-pool stage allocates |V_i| + |V_o| rows where the fused
  bipartite conv allocates only |V_o|.
* peak_live_values: max over layers of live feature scalars, counting a
  layer's input and output rows as simultaneously live.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import arch as A
from .data import GraphSample
from .graph import GraphSignal, radius_graph
from .network import build_network
from .rng import SplitMix64, derive

__all__ = ["OpCounts", "profile_forward", "scaling_report", "grid_sample"]

CSV_COLUMNS = ("size_vi", "size_vo", "path", "kernel_evals", "mac_ops",
               "nodes_materialized", "peak_live_values", "wall_ms")


@dataclass
class OpCounts:
    kernel_evals: int = 0
    mac_ops: int = 0
    nodes_materialized: int = 0
    peak_live_values: int = 0
    wall_ms: float = 0.0

    def count_layer(self, in_nodes: int, in_dim: int, out_nodes: int, out_dim: int) -> None:
        self.nodes_materialized += out_nodes
        live = in_nodes * in_dim + out_nodes * out_dim
        self.peak_live_values = max(self.peak_live_values, live)


def profile_forward(net, sample) -> OpCounts:
    """Exact op counts for one forward pass (single worker, no gradients)."""
    counters = OpCounts()
    t0 = time.perf_counter()
    net.forward(sample, train=False, counters=counters)
    counters.wall_ms = (time.perf_counter() - t0) * 1000.0
    return counters


def _grid_dims(n: int, block: int) -> tuple[int, int]:
    """Factor n = a*b with both sides divisible by block."""
    best = None
    for a in range(block, int(np.sqrt(n)) + 1, 1):
        if n % a == 0:
            b = n // a
            if a % block == 0 and b % block == 0:
                best = (a, b)
    if best is None:
        raise ValueError(f"cannot factor {n} into a grid of {block}-aligned sides")
    return best


def grid_sample(n: int, block: int, radius: float = 2.0, seed: int = 0) -> GraphSample:
    """Unit-spaced 2-d grid of n points with random 1-dim features.

    Voxel clustering at resolution ``block`` groups the grid into exact
    block x block cells, giving a coarsening ratio of block**2. The graph is
    the radius graph at ``radius`` (the connectivity the conv path uses).
    """
    a, b = _grid_dims(n, block)
    rr, cc = np.meshgrid(np.arange(a), np.arange(b), indexing="ij")
    pos = np.stack([rr.reshape(-1), cc.reshape(-1)], axis=1).astype(np.float64)
    rng = SplitMix64(derive(seed, n))
    feats = rng.uniform_array((n, 1))
    graph = radius_graph(pos, radius)
    return GraphSample(graph, GraphSignal(feats), target=0, key=None)


def _spatial_radius(spec: A.ArchSpec) -> float:
    for layer in spec.layers:
        if isinstance(layer, (A.MaxPool, A.AvgPool, A.BConv)):
            return layer.radius
    raise ValueError("spec has no pooling or fused layer with spatial parameters")


def scaling_report(conv_pool_spec: A.ArchSpec, fused_spec: A.ArchSpec,
                   sizes: list[int], ratio: int = 4, seed: int = 0,
                   out_dir: Optional[str] = None, input_dim: int = 1) -> list[dict]:
    """Profile both paths over growing inputs and check the scaling claim.

    Both specs must share their spatial parameters (the fused spec must equal
    the fusion of the conv+pool spec). For every size, asserts that the fused
    path evaluates no more kernels and materializes strictly fewer node rows
    whenever the stage shrinks the node set. Returns one row dict per
    (size, path) and optionally writes a CSV and a rendered table.
    """
    if A.fuse_pooling(conv_pool_spec).layers != fused_spec.layers:
        raise ValueError("specs do not share spatial parameters: fusing the conv+pool "
                         "spec does not yield the fused spec")
    block = int(np.sqrt(ratio))
    if block * block != ratio:
        raise ValueError(f"ratio must be a perfect square for grid coarsening, got {ratio}")
    radius = _spatial_radius(conv_pool_spec)

    rows: list[dict] = []
    for n in sizes:
        sample = grid_sample(n, block, radius=radius, seed=seed)
        for path_name, spec in (("conv+pool", conv_pool_spec), ("fused", fused_spec)):
            net = build_network(spec, input_dim, seed, spatial_dim=2, head=False)
            counts = profile_forward(net, sample)
            rows.append({
                "size_vi": n,
                "size_vo": n // ratio,
                "path": path_name,
                "kernel_evals": counts.kernel_evals,
                "mac_ops": counts.mac_ops,
                "nodes_materialized": counts.nodes_materialized,
                "peak_live_values": counts.peak_live_values,
                "wall_ms": counts.wall_ms,
            })
        base = rows[-2]
        fused = rows[-1]
        if fused["kernel_evals"] > base["kernel_evals"]:
            raise RuntimeError(f"size {n}: fused path evaluated more kernels "
                               f"({fused['kernel_evals']} > {base['kernel_evals']})")
        if n // ratio < n and fused["nodes_materialized"] >= base["nodes_materialized"]:
            raise RuntimeError(f"size {n}: fused path did not materialize fewer rows "
                               f"({fused['nodes_materialized']} >= "
                               f"{base['nodes_materialized']})")

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "scaling.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
        with open(out_dir / "scaling.txt", "w") as fh:
            fh.write(render_table(rows) + "\n")
    return rows


def render_table(rows: list[dict]) -> str:
    cols = list(CSV_COLUMNS)
    cells = [[f"{r[c]:.2f}" if c == "wall_ms" else str(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    head = "  ".join(c.rjust(w) for c, w in zip(cols, widths))
    sep = "-" * len(head)
    body = "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells)
    return "\n".join([head, sep, body])
