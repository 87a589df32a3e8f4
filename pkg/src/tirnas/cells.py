"""Cell DAG templates, stacked-network assembly, and both network forms
(the continuous supernet searched over and the discrete retraining net).

Node numbering inside a cell uses *state indices*: input states come
first (single-bottom: 0 = S; dual-bottom: 0 = S0, 1 = S1), then the four
intermediate nodes.  The cell output is the depth-wise concatenation of
the four intermediates, so every cell emits 4 * node_channels channels.
Reduction cells halve the spatial extent and double the channel width;
edges leaving an input state use stride 2 there, all others stride 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat, global_avg_pool, reshape, sigmoid
from .autodiff.nn import BatchNorm2d, Conv2d, Linear, Module, ModuleList
from .errors import ConfigError, ShapeError
from .search_space import (
    OP_KINDS,
    AlphaMatrix,
    FactorizedReduce,
    PartialMixedOp,
    make_candidate,
    sample_mask,
)

N_INTERMEDIATE = 4


@dataclass(frozen=True)
class CellTemplate:
    bottom: str            # "single" | "dual"
    cell_type: str         # "normal" | "reduction"
    n_inputs: int
    edges: tuple           # (edge_id, from_state, to_state), ordered by (to, from)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_nodes(self) -> int:
        # inputs + intermediates + output node
        return self.n_inputs + N_INTERMEDIATE + 1

    def incoming(self, to_state: int):
        return [e for e in self.edges if e[2] == to_state]

    def intermediate_states(self):
        return range(self.n_inputs, self.n_inputs + N_INTERMEDIATE)


def make_template(bottom: str, cell_type: str = "normal") -> CellTemplate:
    """Enumerate the cell DAG: every earlier state feeds every intermediate."""
    if bottom not in ("single", "dual"):
        raise ConfigError(f"bottom must be single|dual, got {bottom!r}")
    if cell_type not in ("normal", "reduction"):
        raise ConfigError(f"cell_type must be normal|reduction, got {cell_type!r}")
    n_inputs = 1 if bottom == "single" else 2
    edges = []
    for to in range(n_inputs, n_inputs + N_INTERMEDIATE):
        for frm in range(to):
            edges.append((len(edges), frm, to))
    return CellTemplate(bottom, cell_type, n_inputs, tuple(edges))


def edge_stride(template: CellTemplate, from_state: int) -> int:
    return 2 if template.cell_type == "reduction" and from_state < template.n_inputs else 1


@dataclass
class NetworkPlan:
    """Macro layout: stem width, cell stacking, reduction depths, head size."""

    bottom: str = "dual"
    cells_total: int = 16
    stem_channels: int = 32
    embed_dim: int = 512
    reduction_positions: tuple = ()
    in_channels: int = 3

    def __post_init__(self):
        if self.bottom not in ("single", "dual"):
            raise ConfigError(f"bottom must be single|dual, got {self.bottom!r}")
        if self.cells_total < 1:
            raise ConfigError("cells_total must be >= 1")
        if self.stem_channels % 4:
            raise ConfigError(f"stem_channels must be divisible by 4, got {self.stem_channels}")
        if not self.reduction_positions:
            self.reduction_positions = default_reduction_positions(self.cells_total)
        self.reduction_positions = tuple(sorted(self.reduction_positions))
        if len(set(self.reduction_positions)) != len(self.reduction_positions):
            raise ConfigError(f"duplicate reduction positions {self.reduction_positions}")
        for p in self.reduction_positions:
            if not 1 <= p <= self.cells_total:
                raise ConfigError(f"reduction position {p} outside 1..{self.cells_total}")

    def is_reduction(self, depth: int) -> bool:
        return depth in self.reduction_positions

    def channel_schedule(self):
        """Yield (depth, is_reduction, c_prev_prev, c_prev, c_node) per cell."""
        c_pp = c_p = self.stem_channels
        for depth in range(1, self.cells_total + 1):
            red = self.is_reduction(depth)
            c_out = 2 * c_p if red else c_p
            yield depth, red, c_pp, c_p, c_out // 4
            c_pp, c_p = c_p, c_out

    @property
    def final_channels(self) -> int:
        return self.stem_channels * (2 ** len(self.reduction_positions))


def default_reduction_positions(cells_total: int) -> tuple:
    """Evenly spaced depths; 4 reductions for nets of 8+ cells."""
    n_red = 4 if cells_total >= 8 else max(1, cells_total // 2)
    return tuple(math.ceil(cells_total * i / n_red) for i in range(1, n_red + 1))


def init_alphas(bottom: str, dtype=np.float32) -> dict[str, AlphaMatrix]:
    """Zero-initialized (uniform-softmax) alpha matrices for both cell types."""
    n_edges = make_template(bottom, "normal").num_edges
    return {
        ct: AlphaMatrix(ct, Tensor(np.zeros((n_edges, len(OP_KINDS)), dtype=dtype),
                                   requires_grad=True))
        for ct in ("normal", "reduction")
    }


class InputAdapter(Module):
    """1x1 conv (or factorized reduce on spatial mismatch) onto node width."""

    def __init__(self, c_in: int, c_out: int, reduce_spatial: bool, rng):
        super().__init__()
        self.reduce_spatial = reduce_spatial
        if reduce_spatial:
            self.op = FactorizedReduce(c_in, c_out, rng)
        else:
            self.conv = Conv2d(c_in, c_out, 1, rng=rng)
            self.bn = BatchNorm2d(c_out)

    def forward(self, x):
        if self.reduce_spatial:
            return self.op(x)
        return self.bn(self.conv(x))


class SuperCell(Module):
    """One searched cell: every template edge is a partial mixed op."""

    def __init__(self, template: CellTemplate, c_inputs: list[int], c_node: int,
                 rate: float, rng, prev_was_reduction: bool = False):
        super().__init__()
        if len(c_inputs) != template.n_inputs:
            raise ConfigError(f"{template.bottom} cell expects {template.n_inputs} inputs")
        self.template = template
        self.c_node = c_node
        adapters = []
        for i, c_in in enumerate(c_inputs):
            # S0 of a dual cell two layers back needs spatial alignment when
            # the previous cell reduced.
            reduce_spatial = prev_was_reduction and template.n_inputs == 2 and i == 0
            adapters.append(InputAdapter(c_in, c_node, reduce_spatial, rng))
        self.adapters = ModuleList(adapters)
        self.edge_ops = ModuleList([
            PartialMixedOp(c_node, edge_stride(template, frm), rate, rng)
            for _, frm, _ in template.edges
        ])
        self.rate = rate

    def forward(self, inputs: list, alpha: AlphaMatrix, rng: np.random.Generator | None):
        if alpha.num_edges != self.template.num_edges:
            raise ConfigError(f"alpha has {alpha.num_edges} rows, template needs {self.template.num_edges}")
        states = [ad(x) for ad, x in zip(self.adapters, inputs)]
        for to in self.template.intermediate_states():
            acc = None
            for edge_id, frm, _ in self.template.incoming(to):
                op = self.edge_ops[edge_id]
                mask = None
                if self.rate < 1.0:
                    if rng is None:
                        raise ConfigError("partial-channel cell forward needs an rng for masks")
                    mask = sample_mask(self.c_node, self.rate, rng, edge_id)
                out = op(states[frm], alpha.row(edge_id), mask)
                acc = out if acc is None else acc + out
            states.append(acc)
        return concat(states[self.template.n_inputs:], axis=1)


class DiscreteCell(Module):
    """A pruned cell: only the retained edges, as plain candidate ops."""

    def __init__(self, template: CellTemplate, retained: list, c_inputs: list[int],
                 c_node: int, rng, prev_was_reduction: bool = False):
        super().__init__()
        self.template = template
        adapters = []
        for i, c_in in enumerate(c_inputs):
            reduce_spatial = prev_was_reduction and template.n_inputs == 2 and i == 0
            adapters.append(InputAdapter(c_in, c_node, reduce_spatial, rng))
        self.adapters = ModuleList(adapters)
        self.retained = tuple(retained)  # (to_state, from_state, op_kind)
        self.ops = ModuleList([
            make_candidate(kind, c_node, edge_stride(template, frm), rng)
            for _, frm, kind in self.retained
        ])

    def forward(self, inputs: list):
        states = [ad(x) for ad, x in zip(self.adapters, inputs)]
        by_node: dict[int, list] = {}
        for op, (to, frm, _) in zip(self.ops, self.retained):
            by_node.setdefault(to, []).append((op, frm))
        for to in self.template.intermediate_states():
            acc = None
            for op, frm in by_node[to]:
                out = op(states[frm])
                acc = out if acc is None else acc + out
            states.append(acc)
        return concat(states[self.template.n_inputs:], axis=1)


class _NetBase(Module):
    def __init__(self, plan: NetworkPlan, rng):
        super().__init__()
        self.plan = plan
        self.stem_conv = Conv2d(plan.in_channels, plan.stem_channels, 3, padding=1, rng=rng)
        self.stem_bn = BatchNorm2d(plan.stem_channels)
        self.embed = Linear(plan.final_channels, plan.embed_dim, rng=rng)
        self.classifier = Linear(plan.embed_dim, 1, rng=rng)

    def _stem(self, x):
        return self.stem_bn(self.stem_conv(x))

    def _head(self, features):
        emb = self.embed(global_avg_pool(features))
        prob = sigmoid(reshape(self.classifier(emb), (emb.shape[0],)))
        return emb, prob


class SuperNet(_NetBase):
    """Continuous search network; alpha matrices are shared across cells."""

    def __init__(self, plan: NetworkPlan, alphas: dict[str, AlphaMatrix],
                 rate: float, rng: np.random.Generator):
        super().__init__(plan, rng)
        expected = make_template(plan.bottom, "normal").num_edges
        for ct in ("normal", "reduction"):
            if ct not in alphas:
                raise ConfigError(f"missing alpha matrix for {ct} cells")
            if alphas[ct].num_edges != expected:
                raise ConfigError(f"{plan.bottom}-bottom template has {expected} edges, "
                                  f"alpha[{ct}] has {alphas[ct].num_edges}")
        self.alphas = alphas
        self.rate = rate
        cells = []
        prev_red = False
        for depth, red, c_pp, c_p, c_node in plan.channel_schedule():
            template = make_template(plan.bottom, "reduction" if red else "normal")
            c_inputs = [c_pp, c_p] if plan.bottom == "dual" else [c_p]
            cells.append(SuperCell(template, c_inputs, c_node, rate, rng, prev_red))
            prev_red = red
        self.cells = ModuleList(cells)

    def alpha_parameters(self) -> list[Tensor]:
        return [self.alphas["normal"].values, self.alphas["reduction"].values]

    def weight_parameters(self) -> list[Tensor]:
        return self.parameters()

    def forward(self, x, rng: np.random.Generator | None = None, run=None):
        run = run or (lambda name, fn: fn())
        s = run("stem", lambda: self._stem(x))
        s_pp, s_p = s, s
        for i, cell in enumerate(self.cells):
            alpha = self.alphas[cell.template.cell_type]
            inputs = [s_pp, s_p] if self.plan.bottom == "dual" else [s_p]
            out = run(f"cell_{i + 1}", lambda c=cell, inp=inputs, a=alpha: c(inp, a, rng))
            s_pp, s_p = s_p, out
        return run("head", lambda: self._head(s_p))


class DiscreteNet(_NetBase):
    """Network containing only the retained edges of a genotype."""

    def __init__(self, genotype, plan: NetworkPlan, rng: np.random.Generator):
        super().__init__(plan, rng)
        if genotype.bottom != plan.bottom:
            raise ConfigError(f"genotype bottom {genotype.bottom!r} != plan bottom {plan.bottom!r}")
        self.genotype = genotype
        cells = []
        prev_red = False
        for depth, red, c_pp, c_p, c_node in plan.channel_schedule():
            template = make_template(plan.bottom, "reduction" if red else "normal")
            retained = genotype.reduction_edges if red else genotype.normal_edges
            c_inputs = [c_pp, c_p] if plan.bottom == "dual" else [c_p]
            cells.append(DiscreteCell(template, retained, c_inputs, c_node, rng, prev_red))
            prev_red = red
        self.cells = ModuleList(cells)

    def forward(self, x, run=None):
        run = run or (lambda name, fn: fn())
        s = run("stem", lambda: self._stem(x))
        s_pp, s_p = s, s
        for i, cell in enumerate(self.cells):
            inputs = [s_pp, s_p] if self.plan.bottom == "dual" else [s_p]
            out = run(f"cell_{i + 1}", lambda c=cell, inp=inputs: c(inp))
            s_pp, s_p = s_p, out
        return run("head", lambda: self._head(s_p))


def build_supernet(plan: NetworkPlan, alphas: dict[str, AlphaMatrix],
                   rate: float = 0.25, seed: int = 0) -> SuperNet:
    return SuperNet(plan, alphas, rate, np.random.default_rng(seed))


def build_discrete_net(genotype, plan: NetworkPlan, seed: int = 0) -> DiscreteNet:
    from .genotype import validate_genotype

    validate_genotype(genotype)
    return DiscreteNet(genotype, plan, np.random.default_rng(seed))
