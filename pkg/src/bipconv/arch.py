"""Parser and rewriter for the compact architecture string notation.

Layers are separated by ``-``; numeric arguments are decimal literals or
rational literals ``a/b`` (evaluated as division). Supported tokens:

    C(x)        graph convolution with x output features
    MP(r,rho)   max pooling: voxel resolution rho, radius-r connectivity after
    AP(r,rho)   average pooling, same parameters
    BC(x,r,rho) fused bipartite convolution straight onto the coarsened nodes
    FC(y)       fully connected layer with y outputs
    GMP         global max pooling
    D(p)        dropout with drop probability p

``fuse_pooling`` rewrites every conv immediately followed by a pooling layer
into the fused BC form, which keeps the spatial parameters and eliminates the
pooling layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Union

from .errors import ParseError, RewriteError

__all__ = [
    "Conv",
    "MaxPool",
    "AvgPool",
    "BConv",
    "FC",
    "GMP",
    "Dropout",
    "LayerSpec",
    "ArchSpec",
    "parse_arch",
    "render_arch",
    "fuse_pooling",
]


@dataclass(frozen=True)
class Conv:
    features: int


@dataclass(frozen=True)
class MaxPool:
    radius: float
    resolution: float


@dataclass(frozen=True)
class AvgPool:
    radius: float
    resolution: float


@dataclass(frozen=True)
class BConv:
    features: int
    radius: float
    resolution: float


@dataclass(frozen=True)
class FC:
    units: int


@dataclass(frozen=True)
class GMP:
    pass


@dataclass(frozen=True)
class Dropout:
    p: float


LayerSpec = Union[Conv, MaxPool, AvgPool, BConv, FC, GMP, Dropout]


@dataclass(frozen=True)
class ArchSpec:
    """Ordered layer list plus the kernel and reduction configuration."""

    layers: tuple[LayerSpec, ...]
    kernel: str = "ecc"
    ecc_hidden: tuple[int, ...] = (16,)
    reduction: str = "mean"

    def with_config(self, **kwargs) -> "ArchSpec":
        return replace(self, **kwargs)


def _validate_layers(layers, offsets=None) -> None:
    def err(i, msg):
        if offsets is not None:
            raise ParseError(msg, offsets[i])
        raise ValueError(msg)

    seen_gmp = False
    for i, layer in enumerate(layers):
        if isinstance(layer, GMP):
            if seen_gmp:
                err(i, "at most one GMP layer is allowed")
            seen_gmp = True
        elif seen_gmp and not isinstance(layer, (FC, Dropout)):
            err(i, "only FC and D layers may follow GMP")
        if isinstance(layer, (Conv, BConv)) and layer.features < 1:
            err(i, "feature count must be >= 1")
        if isinstance(layer, FC) and layer.units < 1:
            err(i, "unit count must be >= 1")
        if isinstance(layer, Dropout) and not 0.0 <= layer.p < 1.0:
            err(i, "dropout probability must be in [0, 1)")
        if isinstance(layer, (MaxPool, AvgPool, BConv)):
            if layer.radius <= 0 or layer.resolution <= 0:
                err(i, "radius and resolution must be positive")


class _Scanner:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def eof(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.text)

    def expect(self, ch: str) -> None:
        self.skip_ws()
        if self.pos >= len(self.text) or self.text[self.pos] != ch:
            raise ParseError(f"expected {ch!r}", self.pos)
        self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def name(self) -> tuple[str, int]:
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isalpha():
            self.pos += 1
        if self.pos == start:
            raise ParseError("expected a layer name", start)
        return self.text[start:self.pos], start

    def _decimal(self) -> float:
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.text) and (self.text[self.pos].isdigit()
                                             or self.text[self.pos] in ".eE+-"):
            # '-'/'+' only valid directly after an exponent marker
            if self.text[self.pos] in "+-" and (self.pos == start
                                                or self.text[self.pos - 1] not in "eE"):
                break
            self.pos += 1
        token = self.text[start:self.pos]
        if not token:
            raise ParseError("expected a number", start)
        try:
            return float(token)
        except ValueError:
            raise ParseError(f"bad numeric literal {token!r}", start) from None

    def number(self) -> float:
        value = self._decimal()
        self.skip_ws()
        if self.pos < len(self.text) and self.text[self.pos] == "/":
            self.pos += 1
            denom = self._decimal()
            if denom == 0:
                raise ParseError("division by zero in rational literal", self.pos)
            value /= denom
        return value

    def args(self) -> list[float]:
        self.expect("(")
        values = [self.number()]
        while self.peek() == ",":
            self.pos += 1
            values.append(self.number())
        self.expect(")")
        return values


def _int_arg(value: float, what: str, offset: int) -> int:
    if value != int(value):
        raise ParseError(f"{what} must be an integer, got {value}", offset)
    return int(value)


_ARITIES = {"C": 1, "MP": 2, "AP": 2, "BC": 3, "FC": 1, "D": 1, "GMP": 0}


def parse_arch(text: str) -> ArchSpec:
    """Parse an architecture string into an :class:`ArchSpec`.

    Raises :class:`ParseError` citing the byte offset of the offending token.
    """
    scanner = _Scanner(text)
    layers: list[LayerSpec] = []
    offsets: list[int] = []
    if scanner.eof():
        raise ParseError("empty architecture string", 0)
    while True:
        name, start = scanner.name()
        if name not in _ARITIES:
            raise ParseError(f"unknown layer token {name!r}", start)
        arity = _ARITIES[name]
        vals = scanner.args() if arity else []
        if arity and len(vals) != arity:
            raise ParseError(f"{name} takes {arity} argument(s), got {len(vals)}", start)
        if name == "C":
            layers.append(Conv(_int_arg(vals[0], "feature count", start)))
        elif name == "MP":
            layers.append(MaxPool(vals[0], vals[1]))
        elif name == "AP":
            layers.append(AvgPool(vals[0], vals[1]))
        elif name == "BC":
            layers.append(BConv(_int_arg(vals[0], "feature count", start), vals[1], vals[2]))
        elif name == "FC":
            layers.append(FC(_int_arg(vals[0], "unit count", start)))
        elif name == "D":
            layers.append(Dropout(vals[0]))
        else:
            layers.append(GMP())
        offsets.append(start)
        if scanner.eof():
            break
        scanner.expect("-")
        if scanner.eof():
            raise ParseError("trailing layer separator", len(text))
    _validate_layers(layers, offsets)
    return ArchSpec(tuple(layers))


def _num(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def render_arch(spec: ArchSpec) -> str:
    """Canonical string form; rationals are normalized to decimals."""
    parts = []
    for layer in spec.layers:
        if isinstance(layer, Conv):
            parts.append(f"C({layer.features})")
        elif isinstance(layer, MaxPool):
            parts.append(f"MP({_num(layer.radius)},{_num(layer.resolution)})")
        elif isinstance(layer, AvgPool):
            parts.append(f"AP({_num(layer.radius)},{_num(layer.resolution)})")
        elif isinstance(layer, BConv):
            parts.append(f"BC({layer.features},{_num(layer.radius)},{_num(layer.resolution)})")
        elif isinstance(layer, FC):
            parts.append(f"FC({layer.units})")
        elif isinstance(layer, GMP):
            parts.append("GMP")
        elif isinstance(layer, Dropout):
            parts.append(f"D({_num(layer.p)})")
        else:
            raise TypeError(f"cannot render layer {layer!r}")
    return "-".join(parts)


def fuse_pooling(spec: ArchSpec) -> ArchSpec:
    """Rewrite every conv immediately followed by pooling into a fused BC layer.

    Convs not followed by pooling are unchanged; no pooling layer remains in
    the result; all other layers keep their order. A pooling layer with no
    directly preceding conv cannot be fused and is an error.
    """
    out: list[LayerSpec] = []
    i = 0
    layers = spec.layers
    while i < len(layers):
        layer = layers[i]
        nxt = layers[i + 1] if i + 1 < len(layers) else None
        if isinstance(layer, Conv) and isinstance(nxt, (MaxPool, AvgPool)):
            out.append(BConv(layer.features, nxt.radius, nxt.resolution))
            i += 2
            continue
        if isinstance(layer, (MaxPool, AvgPool)):
            raise RewriteError(f"pooling layer at position {i} has no preceding conv to fuse")
        out.append(layer)
        i += 1
    return replace(spec, layers=tuple(out))
