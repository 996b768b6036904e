"""Per-edge weighting kernels used by the convolution operators.

Each family turns edge or node information into the per-edge message
``W f_src`` consumed by a reduction:

* :class:`EdgeConditionedKernel` generates a full M x N weight matrix per
  edge from the edge label through a small mlp.
* :class:`AttentionKernel` scores edges from the concatenated transformed
  endpoint features and softmax-normalizes per destination.
* :class:`EdgeConditionedAttentionKernel` scores edges from the edge label
  alone, so it never reads node features.

Attention coefficients scale the shared transform of the source feature and
the reduction is fixed to sum (the softmax already normalizes).
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .errors import ShapeError
from .graph import BipartiteGraph
from .rng import SplitMix64, glorot_uniform
from . import tensor as T
from .tensor import Tensor

__all__ = [
    "EdgeConditionedKernel",
    "AttentionKernel",
    "EdgeConditionedAttentionKernel",
    "FixedKernel",
    "make_kernel",
    "ecc_weights",
    "gat_coeffs",
    "eca_coeffs",
]

LEAKY_SLOPE = 0.2


def _mlp_params(rng: SplitMix64, dims: list[int]) -> list[tuple[Tensor, Tensor]]:
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = T.parameter(glorot_uniform(rng, fan_in, fan_out, (fan_in, fan_out)))
        b = T.parameter(np.zeros(fan_out))
        layers.append((w, b))
    return layers


def _mlp_forward(layers, x: Tensor) -> Tensor:
    h = x
    for i, (w, b) in enumerate(layers):
        h = T.affine(h, w, b)
        if i < len(layers) - 1:
            h = T.apply_activation(h, "tanh")
    return h


def _mlp_named(prefix: str, layers) -> list[tuple[str, Tensor]]:
    out = []
    for i, (w, b) in enumerate(layers):
        out.append((f"{prefix}{i}.w", w))
        out.append((f"{prefix}{i}.b", b))
    return out


class EdgeConditionedKernel:
    """W_{edge} = reshape(mlp(label), M x N), one matrix per edge."""

    fixed_reduction: Optional[str] = None

    def __init__(self, label_dim: int, in_dim: int, out_dim: int,
                 hidden=(16,), rng: Optional[SplitMix64] = None):
        self.label_dim = label_dim
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = tuple(hidden)
        rng = rng if rng is not None else SplitMix64(0)
        self.mlp = _mlp_params(rng, [label_dim, *self.hidden, out_dim * in_dim])

    def edge_weights(self, labels) -> Tensor:
        """Stack of per-edge weight matrices, shape (m, M, N)."""
        labels = np.asarray(labels, dtype=np.float64)
        if labels.ndim != 2 or labels.shape[1] != self.label_dim:
            raise ShapeError(f"labels must be (m, {self.label_dim}), got {labels.shape}")
        flat = _mlp_forward(self.mlp, Tensor(labels))
        return T.reshape(flat, (labels.shape[0], self.out_dim, self.in_dim))

    def messages(self, bg: BipartiteGraph, feats: Tensor, counters=None) -> Tensor:
        w = self.edge_weights(bg.labels)
        f_src = T.gather_rows(feats, bg.src)
        if counters is not None:
            dims = [self.label_dim, *self.hidden, self.out_dim * self.in_dim]
            mlp_macs = sum(a * b for a, b in zip(dims[:-1], dims[1:]))
            counters.mac_ops += bg.num_edges * (mlp_macs + self.out_dim * self.in_dim)
        return T.edge_matvec(w, f_src)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return _mlp_named("mlp", self.mlp)


class _AttentionBase:
    fixed_reduction = "sum"

    def _alpha(self, bg: BipartiteGraph, scores: Tensor) -> Tensor:
        s = T.apply_activation(scores, "leaky_relu", alpha=LEAKY_SLOPE)
        return T.segment_softmax(s, bg.dst, bg.num_out, order_keys=bg.src)

    def messages(self, bg: BipartiteGraph, feats: Tensor, counters=None) -> Tensor:
        transformed = T.matmul_nt(feats, self.weight)
        alpha = self._scores_to_alpha(bg, feats, transformed)
        src_t = T.gather_rows(transformed, bg.src)
        if counters is not None:
            counters.mac_ops += feats.shape[0] * self.out_dim * self.in_dim
            counters.mac_ops += bg.num_edges * (self._score_macs() + self.out_dim)
        return T.scale_rows(src_t, alpha)


class AttentionKernel(_AttentionBase):
    """Softmax attention over concatenated transformed endpoint features.

    When the bipartite graph does not share its node sets, the destination
    side has no input feature; the mean of the destination's in-neighborhood
    transformed features stands in for it.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: Optional[SplitMix64] = None):
        self.in_dim = in_dim
        self.out_dim = out_dim
        rng = rng if rng is not None else SplitMix64(0)
        self.weight = T.parameter(glorot_uniform(rng, in_dim, out_dim, (out_dim, in_dim)))
        self.attn_w = T.parameter(glorot_uniform(rng, 2 * out_dim, 1, (2 * out_dim, 1)))
        self.attn_b = T.parameter(np.zeros(1))

    def _score_macs(self) -> int:
        return 2 * self.out_dim

    def _scores_to_alpha(self, bg: BipartiteGraph, feats: Tensor, transformed: Tensor) -> Tensor:
        src_t = T.gather_rows(transformed, bg.src)
        if bg.shared_nodes:
            dst_t = T.gather_rows(transformed, bg.dst)
        else:
            pooled = T.segment_reduce(src_t, bg.dst, bg.num_out, "mean", order_keys=bg.src)
            dst_t = T.gather_rows(pooled, bg.dst)
        scores = T.affine(T.concat_cols(src_t, dst_t), self.attn_w, self.attn_b)
        return self._alpha(bg, scores)

    def coefficients(self, bg: BipartiteGraph, feats: Tensor) -> Tensor:
        """Per-edge attention coefficients, shape (m, 1); sums to 1 per destination."""
        transformed = T.matmul_nt(feats, self.weight)
        return self._scores_to_alpha(bg, feats, transformed)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("weight", self.weight), ("attn.w", self.attn_w), ("attn.b", self.attn_b)]


class EdgeConditionedAttentionKernel(_AttentionBase):
    """Softmax attention scored from the edge label alone."""

    def __init__(self, label_dim: int, in_dim: int, out_dim: int,
                 rng: Optional[SplitMix64] = None):
        self.label_dim = label_dim
        self.in_dim = in_dim
        self.out_dim = out_dim
        rng = rng if rng is not None else SplitMix64(0)
        self.weight = T.parameter(glorot_uniform(rng, in_dim, out_dim, (out_dim, in_dim)))
        self.attn_w = T.parameter(glorot_uniform(rng, label_dim, 1, (label_dim, 1)))
        self.attn_b = T.parameter(np.zeros(1))

    def _score_macs(self) -> int:
        return self.label_dim

    def _scores_to_alpha(self, bg: BipartiteGraph, feats: Tensor, transformed: Tensor) -> Tensor:
        return self.coefficients(bg, bg.labels)

    def coefficients(self, bg: BipartiteGraph, labels=None) -> Tensor:
        labels = np.asarray(bg.labels if labels is None else labels, dtype=np.float64)
        if labels.ndim != 2 or labels.shape != (bg.num_edges, self.label_dim):
            raise ShapeError(f"labels must be ({bg.num_edges}, {self.label_dim}), "
                             f"got {labels.shape}")
        scores = T.affine(Tensor(labels), self.attn_w, self.attn_b)
        return self._alpha(bg, scores)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("weight", self.weight), ("attn.w", self.attn_w), ("attn.b", self.attn_b)]


class FixedKernel:
    """One shared (optionally learnable) M x N weight matrix for every edge."""

    fixed_reduction: Optional[str] = None

    def __init__(self, weight, learnable: bool = False):
        w = np.asarray(weight, dtype=np.float64)
        if w.ndim != 2:
            raise ShapeError(f"fixed kernel weight must be a matrix, got shape {w.shape}")
        self.weight = T.parameter(w) if learnable else Tensor(w)
        self.out_dim, self.in_dim = w.shape

    def messages(self, bg: BipartiteGraph, feats: Tensor, counters=None) -> Tensor:
        if counters is not None:
            counters.mac_ops += bg.num_edges * self.out_dim * self.in_dim
        return T.matmul_nt(T.gather_rows(feats, bg.src), self.weight)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("weight", self.weight)] if self.weight.requires_grad else []


KERNEL_FAMILIES = ("ecc", "gat", "eca")


def make_kernel(family: str, label_dim: int, in_dim: int, out_dim: int,
                rng: SplitMix64, ecc_hidden=(16,)):
    if family == "ecc":
        return EdgeConditionedKernel(label_dim, in_dim, out_dim, hidden=ecc_hidden, rng=rng)
    if family == "gat":
        return AttentionKernel(in_dim, out_dim, rng=rng)
    if family == "eca":
        return EdgeConditionedAttentionKernel(label_dim, in_dim, out_dim, rng=rng)
    raise ValueError(f"unknown kernel family {family!r}; expected one of {KERNEL_FAMILIES}")


def ecc_weights(kernel: EdgeConditionedKernel, labels) -> Tensor:
    return kernel.edge_weights(labels)


def gat_coeffs(kernel: AttentionKernel, features, bg: BipartiteGraph) -> Tensor:
    feats = features.features if hasattr(features, "features") else T.as_tensor(features)
    if feats.shape[0] != bg.num_in:
        raise ShapeError(f"features bound to {feats.shape[0]} nodes, graph has {bg.num_in}")
    return kernel.coefficients(bg, feats)


def eca_coeffs(kernel: EdgeConditionedAttentionKernel, labels, bg: BipartiteGraph) -> Tensor:
    return kernel.coefficients(bg, labels)
