"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations record themselves on the innermost active :class:`Tape` when any
input is tracked; :func:`backward` walks the tape in reverse and accumulates
gradients into every ``requires_grad`` tensor reachable from the loss.

Segment reductions accumulate in a canonical order (sorted by segment, then
by an optional caller-supplied order key, then by row position) so results
are bit-stable across runs and, when order keys are given, across input
permutations.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "parameter",
    "backward",
    "affine",
    "matmul",
    "matmul_nt",
    "add",
    "sub",
    "mul",
    "scale",
    "add_bias",
    "scale_rows",
    "apply_activation",
    "segment_reduce",
    "segment_softmax",
    "gather_rows",
    "reshape",
    "concat_cols",
    "edge_matvec",
    "sum_all",
    "mean_all",
    "cross_entropy",
    "dropout",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]

REDUCTIONS = ("sum", "mean", "max")

_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = _LOCAL.stack = []
    return stack


class Tensor:
    """A dense row-major float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "tape_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.tape_node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def as_tensor(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


class _TapeEntry:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple, backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    def __init__(self):
        self.nodes: list[_TapeEntry] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()


def _active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or (t.tape_node is not None and t.tape_node[0] is tape)


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
    tape = _active_tape()
    if tape is None or not any(_tracked(t, tape) for t in inputs):
        return
    tape.nodes.append(_TapeEntry(out, tuple(inputs), backward_fn))
    out.tape_node = (tape, len(tape.nodes) - 1)


def _out(arr: np.ndarray) -> Tensor:
    return Tensor(arr)


def backward(loss: Tensor, tape: Tape, grads_out: Optional[dict] = None) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    The tape is consumed: its nodes are dropped and it cannot be replayed.
    When ``grads_out`` is given, leaf gradients accumulate into that dict
    (keyed by tensor identity) instead of the tensors' ``grad`` slots, which
    lets concurrent workers keep private accumulators.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward call")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gt in zip(node.inputs, node.backward(g)):
            if gt is None:
                continue
            if t.requires_grad:
                if grads_out is not None:
                    prev = grads_out.get(id(t))
                    grads_out[id(t)] = gt.copy() if prev is None else prev + gt
                else:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += gt
            if t.tape_node is not None and t.tape_node[0] is tape:
                prev = grads.get(id(t))
                grads[id(t)] = gt if prev is None else prev + gt
    tape.nodes.clear()
    tape.consumed = True


# ---------------------------------------------------------------------------
# elementwise and dense linear algebra


def affine(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """out[i, j] = sum_k x[i, k] w[k, j] + bias[j]."""
    if x.ndim != 2 or w.ndim != 2 or bias.ndim != 1:
        raise ShapeError(f"affine expects (n,a),(a,b),(b,), got {x.shape},{w.shape},{bias.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != bias.shape[0]:
        raise ShapeError(f"affine dims do not conform: {x.shape} @ {w.shape} + {bias.shape}")
    out = _out(x.data @ w.data + bias.data)
    xd, wd = x.data, w.data

    def bw(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    _record(out, (x, w, bias), bw)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dims do not conform: {a.shape} @ {b.shape}")
    out = _out(a.data @ b.data)
    ad, bd = a.data, b.data
    _record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))
    return out


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T without materializing a transposed tensor."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"matmul_nt dims do not conform: {a.shape} @ {b.shape}.T")
    out = _out(a.data @ b.data.T)
    ad, bd = a.data, b.data
    _record(out, (a, b), lambda g: (g @ bd, g.T @ ad))
    return out


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name} needs equal shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = _out(a.data + b.data)
    _record(out, (a, b), lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = _out(a.data - b.data)
    _record(out, (a, b), lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = _out(a.data * b.data)
    ad, bd = a.data, b.data
    _record(out, (a, b), lambda g: (g * bd, g * ad))
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = _out(x.data * c)
    _record(out, (x,), lambda g: (g * c,))
    return out


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Row-broadcast add of a per-column bias."""
    if x.ndim != 2 or bias.ndim != 1 or x.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias expects (n,m) and (m,), got {x.shape} and {bias.shape}")
    out = _out(x.data + bias.data)
    _record(out, (x, bias), lambda g: (g, g.sum(axis=0)))
    return out


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each row of x by a per-row scalar s of shape (n, 1)."""
    if x.ndim != 2 or s.shape != (x.shape[0], 1):
        raise ShapeError(f"scale_rows expects (n,m) and (n,1), got {x.shape} and {s.shape}")
    out = _out(x.data * s.data)
    xd, sd = x.data, s.data
    _record(out, (x, s), lambda g: (g * sd, (g * xd).sum(axis=1, keepdims=True)))
    return out


_ACTIVATIONS = ("relu", "tanh", "identity", "leaky_relu")


def apply_activation(x: Tensor, kind: str, alpha: float = 0.2) -> Tensor:
    """Elementwise activation. relu subgradient at 0 is 0."""
    if kind == "identity":
        out = _out(x.data)
        _record(out, (x,), lambda g: (g,))
        return out
    if kind == "relu":
        out = _out(np.maximum(x.data, 0.0))
        pos = x.data > 0
        _record(out, (x,), lambda g: (g * pos,))
        return out
    if kind == "tanh":
        out = _out(np.tanh(x.data))
        od = out.data
        _record(out, (x,), lambda g: (g * (1.0 - od * od),))
        return out
    if kind == "leaky_relu":
        xd = x.data
        out = _out(np.where(xd > 0, xd, alpha * xd))
        pos = xd > 0
        _record(out, (x,), lambda g: (g * np.where(pos, 1.0, alpha),))
        return out
    raise ValueError(f"unknown activation {kind!r}; expected one of {_ACTIVATIONS}")


# ---------------------------------------------------------------------------
# gather / reshape / concat


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError("gather_rows index out of range")
    out = _out(x.data[idx])
    nrows, ncols = x.shape

    def bw(g):
        gx = np.zeros((nrows, ncols))
        np.add.at(gx, idx, g)
        return (gx,)

    _record(out, (x,), bw)
    return out


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = _out(x.data.reshape(shape))
    old = x.shape
    _record(out, (x,), lambda g: (g.reshape(old),))
    return out


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols expects equal row counts, got {a.shape} and {b.shape}")
    out = _out(np.concatenate([a.data, b.data], axis=1))
    na = a.shape[1]
    _record(out, (a, b), lambda g: (g[:, :na], g[:, na:]))
    return out


def edge_matvec(w: Tensor, f: Tensor) -> Tensor:
    """Per-row matrix-vector product: out[e] = w[e] @ f[e].

    w has shape (m, M, N) and f has shape (m, N); result is (m, M).
    """
    if w.ndim != 3 or f.ndim != 2 or w.shape[0] != f.shape[0] or w.shape[2] != f.shape[1]:
        raise ShapeError(f"edge_matvec expects (m,M,N) and (m,N), got {w.shape} and {f.shape}")
    out = _out(np.einsum("emn,en->em", w.data, f.data))
    wd, fd = w.data, f.data

    def bw(g):
        gw = np.einsum("em,en->emn", g, fd)
        gf = np.einsum("emn,em->en", wd, g)
        return gw, gf

    _record(out, (w, f), bw)
    return out


# ---------------------------------------------------------------------------
# segment operations


def _canonical_order(segments: np.ndarray, order_keys: Optional[np.ndarray]) -> np.ndarray:
    m = segments.shape[0]
    if order_keys is None:
        return np.lexsort((np.arange(m), segments))
    return np.lexsort((np.arange(m), np.asarray(order_keys, dtype=np.int64), segments))


def _segment_sums(values: np.ndarray, segments: np.ndarray, num_segments: int,
                  order: np.ndarray) -> np.ndarray:
    """Per-segment sums accumulated strictly sequentially in canonical order.

    np.add.at is unbuffered and processes rows in index order, which pins the
    floating-point association; reduceat/reduce use pairwise schemes whose
    association is an implementation detail (a regression test guards this).
    """
    out = np.zeros((num_segments,) + values.shape[1:])
    if values.shape[0] == 0:
        return out
    np.add.at(out, segments[order], values[order])
    return out


def _check_segments(segments, num_segments: int, m: int) -> np.ndarray:
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != (m,):
        raise ShapeError(f"segment index list has shape {segments.shape}, expected ({m},)")
    if segments.size and (segments.min() < 0 or segments.max() >= num_segments):
        raise IndexError("segment index out of range")
    return segments


def segment_reduce(values: Tensor, segment_of, num_segments: int, red: str,
                   order_keys: Optional[np.ndarray] = None) -> Tensor:
    """Per-segment elementwise reduction of rows.

    Empty segments yield zero rows for every reduction kind. ``mean`` divides
    the segment sum by the segment cardinality. ``max`` routes its gradient to
    the first element attaining the maximum in canonical order.

    Args:
        values: (m, c) rows to reduce.
        segment_of: m segment indices in [0, num_segments).
        num_segments: number of output rows.
        red: one of "sum", "mean", "max".
        order_keys: optional per-row keys; rows are accumulated sorted by
            (segment, key, position), making the result invariant to row
            permutations that carry their keys along.
    """
    if red not in REDUCTIONS:
        raise ValueError(f"unknown reduction {red!r}; expected one of {REDUCTIONS}")
    if values.ndim != 2:
        raise ShapeError(f"segment_reduce expects a matrix, got {values.shape}")
    m, c = values.shape
    segments = _check_segments(segment_of, num_segments, m)

    if m == 0:
        out = _out(np.zeros((num_segments, c)))
        _record(out, (values,), lambda g: (np.zeros((0, c)),))
        return out

    order = _canonical_order(segments, order_keys)
    counts = np.bincount(segments, minlength=num_segments)

    if red in ("sum", "mean"):
        sums = _segment_sums(values.data, segments, num_segments, order)
        if red == "sum":
            out = _out(sums)
            _record(out, (values,), lambda g: (g[segments],))
        else:
            denom = np.maximum(counts, 1).astype(np.float64)
            out = _out(sums / denom[:, None])
            _record(out, (values,), lambda g: (g[segments] / denom[segments, None],))
        return out

    # max
    seg_s = segments[order]
    vals_s = values.data[order]
    starts = np.flatnonzero(np.r_[True, seg_s[1:] != seg_s[:-1]])
    block_max = np.maximum.reduceat(vals_s, starts, axis=0)
    res = np.zeros((num_segments, c))
    res[seg_s[starts]] = block_max
    out = _out(res)

    def bw(g):
        gx = np.zeros((m, c))
        ends = np.r_[starts[1:], m]
        for b in range(starts.shape[0]):
            s, e = starts[b], ends[b]
            block = vals_s[s:e]
            first = np.argmax(block == block_max[b][None, :], axis=0)
            rows = order[s + first]
            gx[rows, np.arange(c)] += g[seg_s[s], np.arange(c)]
        return (gx,)

    _record(out, (values,), bw)
    return out


def segment_softmax(scores: Tensor, segment_of, num_segments: int,
                    order_keys: Optional[np.ndarray] = None) -> Tensor:
    """Softmax of (m, 1) scores normalized within each segment.

    Stabilized by per-segment max subtraction; outputs in each non-empty
    segment are positive and sum to 1.
    """
    if scores.ndim != 2 or scores.shape[1] != 1:
        raise ShapeError(f"segment_softmax expects (m,1) scores, got {scores.shape}")
    m = scores.shape[0]
    segments = _check_segments(segment_of, num_segments, m)
    if m == 0:
        out = _out(np.zeros((0, 1)))
        _record(out, (scores,), lambda g: (np.zeros((0, 1)),))
        return out

    order = _canonical_order(segments, order_keys)
    seg_max = np.full(num_segments, -np.inf)
    np.maximum.at(seg_max, segments, scores.data[:, 0])
    e = np.exp(scores.data - seg_max[segments, None])
    sums = _segment_sums(e, segments, num_segments, order)
    res = e / sums[segments]
    out = _out(res)

    def bw(g):
        dots = _segment_sums(res * g, segments, num_segments, order)
        return (res * (g - dots[segments]),)

    _record(out, (scores,), bw)
    return out


# ---------------------------------------------------------------------------
# scalar heads


def sum_all(x: Tensor) -> Tensor:
    out = _out(np.asarray(x.data.sum()))
    shp = x.shape
    _record(out, (x,), lambda g: (np.broadcast_to(g, shp).copy(),))
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    if n == 0:
        raise ShapeError("mean_all of an empty tensor")
    out = _out(np.asarray(x.data.sum() / n))
    shp = x.shape
    _record(out, (x,), lambda g: (np.broadcast_to(g / n, shp).copy(),))
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits).

    Stabilized by per-row max subtraction.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects (n,C) logits and (n,) targets, "
                         f"got {logits.shape} and {targets.shape}")
    if targets.size == 0:
        raise ShapeError("cross_entropy of an empty batch")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise IndexError("target class out of range")
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = _out(np.asarray(-log_probs[np.arange(n), targets].sum() / n))
    probs = np.exp(log_probs)

    def bw(g):
        gl = probs.copy()
        gl[np.arange(n), targets] -= 1.0
        return (gl * (g / n),)

    _record(out, (logits,), bw)
    return out


def dropout(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a precomputed mask (0 or 1/keep_prob entries)."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape:
        raise ShapeError(f"dropout mask shape {mask.shape} != {x.shape}")
    out = _out(x.data * mask)
    _record(out, (x,), lambda g: (g * mask,))
    return out


# ---------------------------------------------------------------------------
# verification oracle


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map ``x`` to a scalar Tensor using tape operations. The error
    at each coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|).
    ``max_coords`` limits the check to a random subset of coordinates.
    """
    x.zero_grad()
    with Tape() as tape:
        y = f(x)
    backward(y, tape)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    aflat = analytic.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        from .rng import SplitMix64

        rng = SplitMix64(seed)
        picked = set()
        while len(picked) < max_coords:
            picked.add(rng.randint(flat.size))
        coords = np.asarray(sorted(picked))

    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x).item()
        flat[i] = orig - eps
        lo = f(x).item()
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * eps)
        err = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]), abs(numeric))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint format


def save_checkpoint(path, named_params: Iterable[tuple[str, Tensor]]) -> None:
    """Write parameters as a versioned text container that round-trips exactly."""
    items = list(named_params)
    lines = [f"CKPT v1 {len(items)}"]
    for name, t in items:
        if any(ch.isspace() for ch in name):
            raise ValueError(f"parameter name {name!r} contains whitespace")
        arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        lines.append(name + " " + " ".join(str(d) for d in arr.shape))
        rows = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(1, -1)
        for row in rows:
            lines.append(" ".join(f"{v:.17g}" for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("CKPT v1 "):
        raise ValueError(f"{path}: not a CKPT v1 file")
    count = int(lines[0].split()[2])
    params: dict[str, np.ndarray] = {}
    pos = 1
    for _ in range(count):
        head = lines[pos].split()
        name, shape = head[0], tuple(int(d) for d in head[1:])
        pos += 1
        nrows = shape[0] if len(shape) > 1 else 1
        rows = [np.array([float(v) for v in lines[pos + r].split()]) for r in range(nrows)]
        pos += nrows
        params[name] = np.vstack(rows).reshape(shape)
    return params
