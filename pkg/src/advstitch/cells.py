"""Searchable cells: a small complete DAG of softmax-mixed candidate operators."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch


class OpKind(str, Enum):
    SKIP = "skip"
    AVG_POOL = "avg_pool_3x3"
    MAX_POOL = "max_pool_3x3"
    SEP_CONV_3 = "sep_conv_3x3"
    SEP_CONV_5 = "sep_conv_5x5"
    DIL_CONV_3 = "dil_conv_3x3"
    DIL_CONV_5 = "dil_conv_5x5"


OP_KINDS: tuple[OpKind, ...] = tuple(OpKind)


class Identity(nn.Module):
    def forward(self, x):
        return x


class SepConv(nn.Module):
    """Depthwise conv -> ReLU -> pointwise conv -> instance norm -> ReLU."""

    def __init__(self, channels: int, kernel: int, dilation: int = 1):
        super().__init__()
        pad = dilation * (kernel - 1) // 2
        self.depthwise = nn.Conv2d(channels, channels, kernel, padding=pad,
                                   dilation=dilation, groups=channels, bias=False)
        self.pointwise = nn.Conv2d(channels, channels, 1, bias=False)
        self.norm = nn.InstanceNorm2d(channels, affine=False)

    def forward(self, x):
        x = F.relu(self.depthwise(x))
        return F.relu(self.norm(self.pointwise(x)))


def make_op(kind: OpKind, channels: int) -> nn.Module:
    kind = OpKind(kind)
    if kind is OpKind.SKIP:
        return Identity()
    if kind is OpKind.AVG_POOL:
        return nn.AvgPool2d(3, stride=1, padding=1, count_include_pad=False)
    if kind is OpKind.MAX_POOL:
        return nn.MaxPool2d(3, stride=1, padding=1)
    if kind is OpKind.SEP_CONV_3:
        return SepConv(channels, 3)
    if kind is OpKind.SEP_CONV_5:
        return SepConv(channels, 5)
    if kind is OpKind.DIL_CONV_3:
        return SepConv(channels, 3, dilation=2)
    return SepConv(channels, 5, dilation=2)


def cell_edges(nodes: int) -> list[tuple[int, int]]:
    """Every (predecessor, node) pair of the complete DAG, grouped by node."""
    return [(i, j) for j in range(1, nodes) for i in range(j)]


@dataclass(frozen=True)
class Genotype:
    """Discrete cell: retained edges ``(from_node, to_node, op)``."""

    nodes: int
    k: int
    edges: tuple[tuple[int, int, OpKind], ...]

    def __post_init__(self):
        for i, j, op in self.edges:
            if not 0 <= i < j < self.nodes:
                raise ValueError(f"edge {i}->{j} is not forward in a {self.nodes}-node cell")
            OpKind(op)

    def incoming(self, node: int) -> list[tuple[int, OpKind]]:
        return [(i, OpKind(op)) for i, j, op in self.edges if j == node]

    def to_text(self) -> str:
        lines = [f"# nodes={self.nodes} k={self.k}"]
        lines += [f"{i},{j},{OpKind(op).value}" for i, j, op in self.edges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Genotype":
        header, *rows = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
        if not header.startswith("#"):
            raise ValueError("genotype text must start with a '# nodes=.. k=..' header")
        fields = dict(tok.split("=") for tok in header[1:].split())
        edges = []
        for row in rows:
            i, j, op = row.split(",")
            edges.append((int(i), int(j), OpKind(op)))
        return cls(nodes=int(fields["nodes"]), k=int(fields["k"]), edges=tuple(edges))


def uniform_genotype(op: OpKind, nodes: int = 5, k: int = 2) -> Genotype:
    """Each node fed by its ``k`` nearest predecessors, all using ``op``."""
    edges = []
    for j in range(1, nodes):
        for i in sorted(range(max(0, j - k), j)):
            edges.append((i, j, OpKind(op)))
    return Genotype(nodes=nodes, k=k, edges=tuple(edges))


class MixedCell(nn.Module):
    """Complete DAG cell; every edge mixes all candidate ops with softmax(alpha).

    Node 0 is the input, node ``j`` sums the mixed edges from all ``i < j`` and
    the last node is the cell output.
    """

    def __init__(self, channels: int, nodes: int = 5):
        super().__init__()
        if nodes < 2:
            raise ValueError("a cell needs at least two nodes")
        self.channels = channels
        self.nodes = nodes
        self.edges = cell_edges(nodes)
        self.ops = nn.ModuleList(
            nn.ModuleList(make_op(kind, channels) for kind in OP_KINDS) for _ in self.edges
        )
        self.alpha = nn.Parameter(torch.zeros(len(self.edges), len(OP_KINDS)))

    def edge_weights(self) -> torch.Tensor:
        return F.softmax(self.alpha, dim=-1)

    def set_one_hot(self, choice) -> None:
        """Make softmax(alpha) exactly one-hot; ``choice`` is one op or one per edge."""
        if isinstance(choice, (OpKind, str)):
            choice = [choice] * len(self.edges)
        with torch.no_grad():
            self.alpha.fill_(-1e4)
            for e, kind in enumerate(choice):
                self.alpha[e, OP_KINDS.index(OpKind(kind))] = 0.0

    def forward(self, x):
        weights = self.edge_weights()
        states = [x]
        e = 0
        for j in range(1, self.nodes):
            acc = 0
            for i in range(j):
                outs = [op(states[i]) for op in self.ops[e]]
                shapes = {tuple(o.shape) for o in outs}
                if len(shapes) != 1:
                    raise ShapeMismatch(f"edge {i}->{j} ops disagree: {sorted(shapes)}")
                w = weights[e].to(x.dtype)
                acc = acc + sum(w[o] * out for o, out in enumerate(outs))
                e += 1
            states.append(acc)
        return states[-1]


def mixed_forward(cell: MixedCell, x: torch.Tensor) -> torch.Tensor:
    return cell(x)


def discretize(cell: MixedCell, k: int = 2) -> Genotype:
    """Keep the ``k`` strongest incoming edges per node and their argmax op.

    Edge strength is the largest softmax weight on the edge. Ties go to the
    lower source node, then the lower op index.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    weights = F.softmax(cell.alpha.detach().double(), dim=-1)
    retained = []
    for j in range(1, cell.nodes):
        cands = []
        for e, (i, jj) in enumerate(cell.edges):
            if jj != j:
                continue
            w = weights[e]
            best = float(w.max())
            op = int(torch.nonzero(w == w.max())[0])
            cands.append((-best, i, op))
        cands.sort()
        for _, i, op in sorted(cands[:k], key=lambda c: c[1]):
            retained.append((i, j, OP_KINDS[op]))
    return Genotype(nodes=cell.nodes, k=k, edges=tuple(retained))


class FixedCell(nn.Module):
    """Cell evaluating only the retained edges of a genotype."""

    def __init__(self, genotype: Genotype, channels: int, source: MixedCell | None = None):
        super().__init__()
        self.genotype = genotype
        self.channels = channels
        self.nodes = genotype.nodes
        self.edges = [(i, j) for i, j, _ in genotype.edges]
        self.kinds = [OpKind(op) for _, _, op in genotype.edges]
        if source is not None:
            index = {edge: e for e, edge in enumerate(source.edges)}
            ops = [copy.deepcopy(source.ops[index[(i, j)]][OP_KINDS.index(kind)])
                   for (i, j), kind in zip(self.edges, self.kinds)]
        else:
            ops = [make_op(kind, channels) for kind in self.kinds]
        self.ops = nn.ModuleList(ops)

    def forward(self, x):
        states = [x]
        for j in range(1, self.nodes):
            acc = 0
            for e, (i, jj) in enumerate(self.edges):
                if jj == j:
                    acc = acc + self.ops[e](states[i])
            if isinstance(acc, int):
                acc = torch.zeros_like(x)
            states.append(acc)
        return states[-1]


def genotype_forward(cell: FixedCell, x: torch.Tensor) -> torch.Tensor:
    return cell(x)


def arch_parameters(module: nn.Module) -> list[nn.Parameter]:
    return [p for name, p in module.named_parameters() if name.endswith("alpha")]


def weight_parameters(module: nn.Module) -> list[nn.Parameter]:
    return [p for name, p in module.named_parameters() if not name.endswith("alpha")]
