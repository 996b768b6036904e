"""Assembles executable networks from parsed architecture specs.

Each conv-like layer owns a weighting kernel and a per-channel bias and is
followed by a relu (identity on the final layer). Pooling and fused
bipartite-conv layers rebuild the node set via voxel clustering; a layer
that changes the node set records the connectivity radius so a later plain
conv can rebuild a radius graph over the coarsened nodes (with zero-label
self edges, so a single-node graph still convolves).

Per-sample graph structures depend only on node positions and the spatial
parameters, so they are computed once per sample and cached.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import arch as A
from . import ops
from . import tensor as T
from .coarsen import build_coarsening_bigraph, voxel_grid
from .errors import BuildError, NumericError
from .graph import DirectedGraph, GraphSignal, as_bipartite, radius_graph, with_self_loops
from .kernels import make_kernel
from .rng import SplitMix64
from .tensor import Tensor

__all__ = ["Network", "build_network"]


@dataclass
class _Ctx:
    train: bool = False
    rng: Optional[SplitMix64] = None
    counters: object = None


class _Layer:
    token: str = "?"
    activation: str = "identity"

    def prepare(self, positions, graph, pending_radius):
        """Return (plan, positions, graph, pending_radius) after this layer."""
        return None, positions, graph, pending_radius

    def forward(self, sig: GraphSignal, plan, ctx: _Ctx) -> GraphSignal:
        raise NotImplementedError

    def parameters(self):
        return []

    def _activate(self, sig: GraphSignal) -> GraphSignal:
        if self.activation == "identity":
            return sig
        return GraphSignal(T.apply_activation(sig.features, self.activation))


class _ConvLayer(_Layer):
    def __init__(self, token, kernel, red, bias, self_loops):
        self.token = token
        self.kernel = kernel
        self.red = red
        self.bias = bias
        self.self_loops = self_loops

    def prepare(self, positions, graph, pending_radius):
        if graph is None:
            if pending_radius is None or positions is None:
                raise BuildError(f"{self.token}: no current graph to convolve on")
            graph = radius_graph(positions, pending_radius)
        bg = as_bipartite(graph)
        if self.self_loops:
            bg = with_self_loops(bg)
        return bg, positions, graph, pending_radius

    def forward(self, sig, plan, ctx):
        out = ops.bipartite_conv(plan, sig, self.kernel, self.red,
                                 bias=self.bias, counters=ctx.counters)
        return self._activate(out)

    def parameters(self):
        named = list(self.kernel.parameters())
        if self.bias is not None:
            named.append(("bias", self.bias))
        return named


class _BConvLayer(_Layer):
    def __init__(self, token, kernel, red, bias, radius, resolution):
        self.token = token
        self.kernel = kernel
        self.red = red
        self.bias = bias
        self.radius = radius
        self.resolution = resolution

    def prepare(self, positions, graph, pending_radius):
        if positions is None:
            raise BuildError(f"{self.token}: coarsening needs node positions")
        clustering = voxel_grid(positions, self.resolution)
        base = DirectedGraph(positions.shape[0], [], positions=positions,
                             label_dim=positions.shape[1])
        bg = build_coarsening_bigraph(base, clustering, self.radius)
        return bg, clustering.super_positions, None, self.radius

    def forward(self, sig, plan, ctx):
        out = ops.bipartite_conv(plan, sig, self.kernel, self.red,
                                 bias=self.bias, counters=ctx.counters)
        return self._activate(out)

    def parameters(self):
        named = list(self.kernel.parameters())
        if self.bias is not None:
            named.append(("bias", self.bias))
        return named


class _PoolLayer(_Layer):
    def __init__(self, token, red, radius, resolution):
        self.token = token
        self.red = red
        self.radius = radius
        self.resolution = resolution

    def prepare(self, positions, graph, pending_radius):
        if positions is None:
            raise BuildError(f"{self.token}: pooling needs node positions")
        clustering = voxel_grid(positions, self.resolution)
        return clustering.members(), clustering.super_positions, None, self.radius

    def forward(self, sig, plan, ctx):
        return ops.graph_pool(plan, sig, self.red, counters=ctx.counters)


class _GlobalPoolLayer(_Layer):
    token = "GMP"

    def forward(self, sig, plan, ctx):
        return ops.global_max_pool(sig, counters=ctx.counters)


class _FCLayer(_Layer):
    def __init__(self, token, weight, bias):
        self.token = token
        self.weight = weight
        self.bias = bias

    def forward(self, sig, plan, ctx):
        out = T.affine(sig.features, self.weight, self.bias)
        if ctx.counters is not None:
            ctx.counters.mac_ops += sig.num_nodes * self.weight.shape[0] * self.weight.shape[1]
            ctx.counters.count_layer(sig.num_nodes, sig.feature_dim,
                                     sig.num_nodes, self.weight.shape[1])
        return self._activate(GraphSignal(out))

    def parameters(self):
        return [("w", self.weight), ("b", self.bias)]


class _DropoutLayer(_Layer):
    def __init__(self, token, p):
        self.token = token
        self.p = p

    def forward(self, sig, plan, ctx):
        if not ctx.train or self.p == 0.0:
            return sig
        if ctx.rng is None:
            raise ValueError("training-mode dropout needs an rng")
        keep = 1.0 - self.p
        mask = (ctx.rng.uniform_array(sig.features.shape) >= self.p) / keep
        return GraphSignal(T.dropout(sig.features, mask))


class Network:
    """Ordered layers with initialized parameters, executable per sample."""

    def __init__(self, spec: A.ArchSpec, layers, input_dim: int, spatial_dim: int, seed: int):
        self.spec = spec
        self.layers = layers
        self.input_dim = input_dim
        self.spatial_dim = spatial_dim
        self.seed = seed
        self._plan_cache: dict[int, list] = {}

    def parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for i, layer in enumerate(self.layers):
            for name, t in layer.parameters():
                named.append((f"layer{i}.{name}", t))
        return named

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.zero_grad()

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        named = dict(self.parameters())
        if set(named) != set(state):
            missing = set(named) ^ set(state)
            raise ValueError(f"checkpoint does not match network parameters: {sorted(missing)}")
        for name, arr in state.items():
            if named[name].shape != arr.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != {named[name].shape}")
            named[name].data = np.ascontiguousarray(arr, dtype=np.float64)

    def plans(self, sample) -> list:
        key = getattr(sample, "key", None)
        if key is not None and key in self._plan_cache:
            return self._plan_cache[key]
        if sample.graph is None:
            raise ValueError("sample has no graph")
        positions = sample.graph.positions
        graph = sample.graph
        pending = None
        plans = []
        for layer in self.layers:
            plan, positions, graph, pending = layer.prepare(positions, graph, pending)
            plans.append(plan)
        if key is not None:
            self._plan_cache[key] = plans
        return plans

    def forward(self, sample, train: bool = False, rng: Optional[SplitMix64] = None,
                counters=None) -> Tensor:
        """Run all layers on one sample and return the final feature rows."""
        if sample.signal.feature_dim != self.input_dim:
            raise ValueError(f"sample feature dim {sample.signal.feature_dim} != "
                             f"network input dim {self.input_dim}")
        ctx = _Ctx(train=train, rng=rng, counters=counters)
        sig = sample.signal
        for i, (layer, plan) in enumerate(zip(self.layers, self.plans(sample))):
            try:
                sig = layer.forward(sig, plan, ctx)
            except NumericError as exc:
                raise NumericError(f"layer {i} ({layer.token}): {exc}") from exc
        return sig.features

    def describe(self) -> str:
        lines = [f"{i}: {layer.token}" for i, layer in enumerate(self.layers)]
        lines.append(f"parameters: {self.num_parameters()}")
        return "\n".join(lines)


def build_network(spec: A.ArchSpec, input_dim: int, seed: int, spatial_dim: int = 2,
                  self_loops: bool = True, use_bias: bool = True,
                  head: bool = True) -> Network:
    """Initialize a network from a spec via a symbolic shape walk.

    Parameters are drawn from a splitmix stream seeded with ``seed``, so equal
    seeds give bit-identical networks. Every conv/FC layer is followed by a
    relu except the last one when ``head`` is true (the usual logits/output
    head). Raises :class:`BuildError` naming the layer index on any
    inconsistency.
    """
    if not spec.layers:
        raise BuildError("empty architecture")
    if input_dim < 1:
        raise BuildError(f"input feature dim must be >= 1, got {input_dim}")
    rng = SplitMix64(seed)
    layers: list[_Layer] = []
    cur = input_dim
    for i, layer_spec in enumerate(spec.layers):
        token = A.render_arch(A.ArchSpec((layer_spec,)))
        try:
            if isinstance(layer_spec, A.Conv):
                kernel = make_kernel(spec.kernel, spatial_dim, cur, layer_spec.features,
                                     rng, ecc_hidden=spec.ecc_hidden)
                bias = T.parameter(np.zeros(layer_spec.features)) if use_bias else None
                layers.append(_ConvLayer(token, kernel, spec.reduction, bias, self_loops))
                cur = layer_spec.features
            elif isinstance(layer_spec, A.BConv):
                kernel = make_kernel(spec.kernel, spatial_dim, cur, layer_spec.features,
                                     rng, ecc_hidden=spec.ecc_hidden)
                bias = T.parameter(np.zeros(layer_spec.features)) if use_bias else None
                layers.append(_BConvLayer(token, kernel, spec.reduction, bias,
                                          layer_spec.radius, layer_spec.resolution))
                cur = layer_spec.features
            elif isinstance(layer_spec, A.MaxPool):
                layers.append(_PoolLayer(token, "max", layer_spec.radius, layer_spec.resolution))
            elif isinstance(layer_spec, A.AvgPool):
                layers.append(_PoolLayer(token, "mean", layer_spec.radius, layer_spec.resolution))
            elif isinstance(layer_spec, A.GMP):
                layers.append(_GlobalPoolLayer())
            elif isinstance(layer_spec, A.FC):
                from .rng import glorot_uniform

                w = T.parameter(glorot_uniform(rng, cur, layer_spec.units,
                                               (cur, layer_spec.units)))
                b = T.parameter(np.zeros(layer_spec.units))
                layers.append(_FCLayer(token, w, b))
                cur = layer_spec.units
            elif isinstance(layer_spec, A.Dropout):
                layers.append(_DropoutLayer(token, layer_spec.p))
            else:
                raise BuildError(f"unsupported layer {layer_spec!r}")
        except (ValueError, BuildError) as exc:
            if isinstance(exc, BuildError) and str(exc).startswith("layer "):
                raise
            raise BuildError(f"layer {i} ({token}): {exc}") from exc
    for layer in layers:
        if isinstance(layer, (_ConvLayer, _BConvLayer, _FCLayer)):
            layer.activation = "relu"
    if head:
        for layer in reversed(layers):
            if isinstance(layer, (_ConvLayer, _BConvLayer, _FCLayer)):
                layer.activation = "identity"
                break
    return Network(spec, layers, input_dim, spatial_dim, seed)
