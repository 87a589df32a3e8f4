"""Operation candidates and the continuous mixed edge.

Eight candidate transforms are assignable to every cell edge.  During the
search each edge computes a softmax-weighted sum of all candidates; to cut
cost, only a random quarter of the channels (by default) is routed through
the candidates while the rest bypass the edge unchanged (stride 1) or
through a parameter-free 2x2 average pooling (stride 2), and the results
are recombined depth-wise into the original channel positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    index_select,
    pool2d,
    relu,
    softmax,
    weighted_sum,
)
from .autodiff.nn import BatchNorm2d, Conv2d, Module, ModuleList
from .errors import ConfigError, ShapeError

# Canonical candidate order; column order of every alpha matrix and the
# stable vocabulary of the genotype file format.
OP_KINDS = (
    "none",
    "max_pool_3x3",
    "avg_pool_3x3",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "skip_connect",
    "dil_conv_3x3",
    "dil_conv_5x5",
)
NONE_INDEX = OP_KINDS.index("none")


class Zero(Module):
    """The 'none' candidate: exact zeros at the contract output shape."""

    def __init__(self, stride: int):
        super().__init__()
        self.stride = stride

    def forward(self, x):
        data = x.data[:, :, ::self.stride, ::self.stride]
        return Tensor(np.zeros_like(data))


class Identity(Module):
    def forward(self, x):
        return x


class Pool(Module):
    def __init__(self, kind: str, stride: int):
        super().__init__()
        self.kind = kind
        self.stride = stride

    def forward(self, x):
        return pool2d(x, self.kind, 3, self.stride, 1)


class SepConv(Module):
    """ReLU -> depthwise kxk -> BN -> pointwise 1x1 -> BN (applied once)."""

    def __init__(self, c: int, k: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.dw = Conv2d(c, c, k, stride=stride, padding=k // 2, groups=c, rng=rng)
        self.bn1 = BatchNorm2d(c)
        self.pw = Conv2d(c, c, 1, rng=rng)
        self.bn2 = BatchNorm2d(c)

    def forward(self, x):
        return self.bn2(self.pw(self.bn1(self.dw(relu(x)))))


class DilConv(Module):
    """Dilated (rate 2) depthwise kxk, then pointwise, mirroring SepConv."""

    def __init__(self, c: int, k: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.dw = Conv2d(c, c, k, stride=stride, padding=k - 1, dilation=2, groups=c, rng=rng)
        self.bn1 = BatchNorm2d(c)
        self.pw = Conv2d(c, c, 1, rng=rng)
        self.bn2 = BatchNorm2d(c)

    def forward(self, x):
        return self.bn2(self.pw(self.bn1(self.dw(relu(x)))))


class FactorizedReduce(Module):
    """Strided identity: two offset 1x1 stride-2 convs, concatenated, BN.

    With a single output channel the second branch has zero width and is
    dropped (only reachable at desk-scale widths).
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        if c_out < 1:
            raise ConfigError(f"factorized reduce needs >= 1 output channel, got {c_out}")
        half_a = (c_out + 1) // 2
        self.conv_a = Conv2d(c_in, half_a, 1, stride=2, rng=rng)
        self.conv_b = Conv2d(c_in, c_out - half_a, 1, stride=2, rng=rng) if c_out > half_a else None
        self.bn = BatchNorm2d(c_out)

    def forward(self, x):
        h, w = x.shape[2], x.shape[3]
        if h % 2 or w % 2:
            raise ShapeError(f"factorized reduce needs even spatial extent, got {h}x{w}")
        parts = [self.conv_a(x)]
        if self.conv_b is not None:
            parts.append(self.conv_b(x[:, :, 1:, 1:]))
        return self.bn(concat(parts, axis=1) if len(parts) > 1 else parts[0])


def make_candidate(kind: str, c: int, stride: int, rng: np.random.Generator) -> Module:
    """Build one candidate op mapping (C, H, W) -> (C, H/stride, W/stride)."""
    if kind == "none":
        return Zero(stride)
    if kind == "max_pool_3x3":
        return Pool("max", stride)
    if kind == "avg_pool_3x3":
        return Pool("avg", stride)
    if kind == "sep_conv_3x3":
        return SepConv(c, 3, stride, rng)
    if kind == "sep_conv_5x5":
        return SepConv(c, 5, stride, rng)
    if kind == "skip_connect":
        return Identity() if stride == 1 else FactorizedReduce(c, c, rng)
    if kind == "dil_conv_3x3":
        return DilConv(c, 3, stride, rng)
    if kind == "dil_conv_5x5":
        return DilConv(c, 5, stride, rng)
    raise ConfigError(f"unknown operation candidate {kind!r}")


def mixed_apply(x, alpha_row: Tensor, candidates) -> Tensor:
    """Softmax(alpha_row)-weighted sum of all candidate outputs."""
    weights = softmax(alpha_row, axis=0)
    outs = [op(x) for op in candidates]
    base = outs[0].shape
    for kind, o in zip(OP_KINDS, outs):
        if o.shape != base:
            raise ShapeError(f"candidate {kind} output {o.shape} disagrees with {base}")
    return weighted_sum(weights, outs)


@dataclass
class ChannelMask:
    """Boolean channel subset for one edge; popcount == round(C * rate)."""

    edge_id: int
    mask: np.ndarray
    rate: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        expected = expected_selected(self.mask.size, self.rate)
        got = int(self.mask.sum())
        if got != expected:
            raise ConfigError(f"mask popcount {got} != round(C*rate) = {expected}")

    @property
    def selected(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def rest(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)


def expected_selected(c: int, rate: float) -> int:
    """round(C * rate), clamped so at least one channel is processed."""
    return max(1, int(np.floor(c * rate + 0.5)))


def sample_mask(c: int, rate: float, rng: np.random.Generator, edge_id: int = 0) -> ChannelMask:
    """Uniform random channel subset without replacement."""
    k = expected_selected(c, rate)
    idx = rng.choice(c, size=k, replace=False)
    mask = np.zeros(c, dtype=bool)
    mask[idx] = True
    return ChannelMask(edge_id, mask, rate)


class MixedOp(Module):
    """All eight candidates on one edge, mixed by a shared alpha row."""

    def __init__(self, c: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.c = c
        self.stride = stride
        self.candidates = ModuleList([make_candidate(k, c, stride, rng) for k in OP_KINDS])

    def forward(self, x, alpha_row: Tensor):
        return mixed_apply(x, alpha_row, self.candidates)


class PartialMixedOp(Module):
    """Mixed edge evaluating candidates on a sampled channel subset.

    Unselected channels bypass unchanged on stride-1 edges and through a
    2x2/stride-2 average pooling on stride-2 edges; outputs are recombined
    into the original channel positions.
    """

    def __init__(self, c: int, stride: int, rate: float, rng: np.random.Generator):
        super().__init__()
        if not 0.0 < rate <= 1.0:
            raise ConfigError(f"channel rate must be in (0, 1], got {rate}")
        self.c = c
        self.stride = stride
        self.rate = rate
        self.c_sel = expected_selected(c, rate) if rate < 1.0 else c
        self.mixed = MixedOp(self.c_sel, stride, rng)

    def forward(self, x, alpha_row: Tensor, mask: ChannelMask | None = None):
        if x.shape[1] != self.c:
            raise ShapeError(f"edge built for {self.c} channels, got {x.shape[1]}")
        if mask is None:
            if self.rate < 1.0:
                raise ConfigError("partial edge with rate < 1 needs a channel mask")
            return self.mixed(x, alpha_row)
        if mask.mask.size != self.c:
            raise ShapeError(f"mask length {mask.mask.size} != channel count {self.c}")
        if int(mask.mask.sum()) != self.c_sel:
            raise ConfigError(f"mask selects {int(mask.mask.sum())} channels, edge expects {self.c_sel}")
        if mask.mask.all():
            return self.mixed(x, alpha_row)

        sel, rest = mask.selected, mask.rest
        processed = self.mixed(index_select(x, 1, sel), alpha_row)
        bypass = index_select(x, 1, rest)
        if self.stride == 2:
            bypass = pool2d(bypass, "avg", 2, 2, 0)
        elif self.stride != 1:
            raise ConfigError(f"no bypass reducer defined for stride {self.stride}")
        merged = concat([processed, bypass], axis=1)
        order = np.concatenate([sel, rest])
        inverse = np.argsort(order)
        return index_select(merged, 1, inverse)


@dataclass
class AlphaMatrix:
    """Architecture parameters for one cell type: rows = edges, cols = 8."""

    cell_type: str
    values: Tensor = field(repr=False)

    def __post_init__(self):
        if self.cell_type not in ("normal", "reduction"):
            raise ConfigError(f"cell_type must be normal|reduction, got {self.cell_type!r}")
        if self.values.ndim != 2 or self.values.shape[1] != len(OP_KINDS):
            raise ConfigError(f"alpha matrix must be E x {len(OP_KINDS)}, got {self.values.shape}")

    @property
    def num_edges(self) -> int:
        return self.values.shape[0]

    def row(self, edge_id: int) -> Tensor:
        return self.values[edge_id]
