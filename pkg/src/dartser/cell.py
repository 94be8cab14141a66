"""Cell DAGs, network stacking, and discretisation of alpha into a genotype."""

from __future__ import annotations

import dataclasses
import json
from typing import Sequence

import numpy as np

from .nn import BatchNorm2d, Conv2d, Module, Sequential
from .search_space import (
    NUM_OPS,
    OP_NAMES,
    OPS,
    FactorizedReduce,
    MixedOp,
    OpKind,
    ReLUConvBN,
    alpha_init,
    build_candidate,
    mixed_forward,
)
from .tensor import Tensor, concat, softmax

NUM_INPUT_NODES = 2


@dataclasses.dataclass(frozen=True)
class CellTopology:
    num_intermediate_nodes: int = 4

    def __post_init__(self):
        if self.num_intermediate_nodes < 1:
            raise ValueError(f"a cell needs at least one intermediate node, got {self.num_intermediate_nodes}")

    @property
    def edges(self) -> list[tuple[int, int]]:
        """(from, to) pairs in alpha-row order; intermediate node j is numbered j + 2."""
        return [(i, j + NUM_INPUT_NODES)
                for j in range(self.num_intermediate_nodes)
                for i in range(NUM_INPUT_NODES + j)]

    @property
    def num_edges(self) -> int:
        n = self.num_intermediate_nodes
        return NUM_INPUT_NODES * n + n * (n - 1) // 2

    @property
    def intermediate_nodes(self) -> list[int]:
        return list(range(NUM_INPUT_NODES, NUM_INPUT_NODES + self.num_intermediate_nodes))


@dataclasses.dataclass(frozen=True)
class NetworkConfig:
    cells: int = 4
    init_channels: int = 16
    nodes: int = 4
    in_channels: int = 1
    stem_multiplier: int = 3

    def __post_init__(self):
        if self.cells < 1:
            raise ValueError(f"cell count must be >= 1, got {self.cells}")
        if self.init_channels < 1 or self.nodes < 1:
            raise ValueError("init_channels and nodes must be >= 1")

    @property
    def reduction_indices(self) -> tuple[int, ...]:
        return tuple(sorted({self.cells // 3, 2 * self.cells // 3}))

    @property
    def topology(self) -> CellTopology:
        return CellTopology(self.nodes)

    def output_shape(self, height: int = 128, width: int = 128) -> tuple[int, int, int]:
        """(channels, height, width) of the last cell's output."""
        c = self.init_channels
        for t in range(self.cells):
            if t in self.reduction_indices:
                c *= 2
                height, width = -(-height // 2), -(-width // 2)
        return self.nodes * c, height, width


# -- genotype ----------------------------------------------------------------
Edge = tuple[str, int, int]


@dataclasses.dataclass(frozen=True)
class Genotype:
    nodes: int
    normal: tuple[Edge, ...]
    reduce: tuple[Edge, ...]
    concat: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "normal", tuple(tuple(e) for e in self.normal))
        object.__setattr__(self, "reduce", tuple(tuple(e) for e in self.reduce))
        object.__setattr__(self, "concat", tuple(self.concat))

    def edges(self, kind: str) -> tuple[Edge, ...]:
        if kind not in ("normal", "reduce"):
            raise ValueError(f"unknown cell kind {kind!r}")
        return self.normal if kind == "normal" else self.reduce

    def validate(self) -> "Genotype":
        if not isinstance(self.nodes, int) or self.nodes < 1:
            raise ValueError(f"genotype node count must be a positive integer, got {self.nodes!r}")
        last = NUM_INPUT_NODES + self.nodes
        for kind in ("normal", "reduce"):
            incoming = {j: 0 for j in range(NUM_INPUT_NODES, last)}
            for edge in self.edges(kind):
                if len(edge) != 3:
                    raise ValueError(f"{kind} edge {edge!r} is not [op, from, to]")
                op, src, dst = edge
                if op not in OP_NAMES:
                    raise ValueError(f"unknown operation {op!r} in {kind} cell; expected one of {list(OP_NAMES)}")
                if op == OpKind.NONE.value:
                    raise ValueError(f"{kind} cell retains a 'none' edge {edge!r}")
                if not (isinstance(src, int) and isinstance(dst, int)):
                    raise ValueError(f"{kind} edge {edge!r} has non-integer endpoints")
                if not 0 <= src < dst:
                    raise ValueError(f"{kind} edge {edge!r} violates from_node < to_node")
                if dst not in incoming:
                    raise ValueError(f"{kind} edge {edge!r} targets a node outside 2..{last - 1}")
                incoming[dst] += 1
            bad = {j: n for j, n in incoming.items() if n != 2}
            if bad:
                raise ValueError(f"{kind} cell nodes need exactly 2 incoming edges, got {bad}")
        if not self.concat or any(not NUM_INPUT_NODES <= j < last for j in self.concat):
            raise ValueError(f"concat {list(self.concat)} must list intermediate nodes 2..{last - 1}")
        return self


def _edge_strengths(alpha: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Best non-``none`` op per row and its softmax weight, invariant to per-row shifts."""
    a = np.asarray(alpha, dtype=np.float64)
    masked = a.copy()
    masked[:, OpKind.NONE.index] = -np.inf
    best = np.argmax(masked, axis=1)  # first maximum wins ties
    strength = np.empty(a.shape[0])
    for r in range(a.shape[0]):
        # sorted summation makes rows holding the same values score identically
        strength[r] = 1.0 / np.sort(np.exp(a[r] - a[r, best[r]])).sum()
    return best, strength


def _derive_cell(alpha: np.ndarray, topology: CellTopology, keep: int = 2) -> tuple[Edge, ...]:
    if alpha.shape != (topology.num_edges, NUM_OPS):
        raise ValueError(f"alpha table shape {alpha.shape} does not match ({topology.num_edges}, {NUM_OPS})")
    best, strength = _edge_strengths(alpha)
    chosen: list[Edge] = []
    rows = topology.edges
    for j in topology.intermediate_nodes:
        incoming = [r for r, (_, dst) in enumerate(rows) if dst == j]
        ranked = sorted(incoming, key=lambda r: (-strength[r], rows[r][0]))[:keep]
        for r in sorted(ranked, key=lambda r: rows[r][0]):
            chosen.append((OPS[best[r]].value, rows[r][0], j))
    return tuple(chosen)


def derive_genotype(alpha_normal, alpha_reduce, nodes: int | None = None) -> Genotype:
    """Discretise: best non-``none`` op per edge, then the two strongest incoming edges per node."""
    alpha_normal = alpha_normal.data if isinstance(alpha_normal, Tensor) else np.asarray(alpha_normal)
    alpha_reduce = alpha_reduce.data if isinstance(alpha_reduce, Tensor) else np.asarray(alpha_reduce)
    if nodes is None:
        nodes = _nodes_for_edges(alpha_normal.shape[0])
    topology = CellTopology(nodes)
    return Genotype(
        nodes=nodes,
        normal=_derive_cell(alpha_normal, topology),
        reduce=_derive_cell(alpha_reduce, topology),
        concat=tuple(topology.intermediate_nodes),
    )


def _nodes_for_edges(num_edges: int) -> int:
    n = 1
    while CellTopology(n).num_edges < num_edges:
        n += 1
    if CellTopology(n).num_edges != num_edges:
        raise ValueError(f"{num_edges} edges does not correspond to any node count")
    return n


def export_genotype(g: Genotype) -> bytes:
    g.validate()
    doc = {
        "concat": list(g.concat),
        "nodes": g.nodes,
        "normal": [list(e) for e in g.normal],
        "reduce": [list(e) for e in g.reduce],
    }
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def import_genotype(raw: bytes | str) -> Genotype:
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ValueError(f"malformed genotype JSON: {exc}") from exc
    if not isinstance(doc, dict) or set(doc) != {"nodes", "normal", "reduce", "concat"}:
        raise ValueError("genotype JSON must be an object with keys nodes, normal, reduce, concat")
    for key in ("normal", "reduce", "concat"):
        if not isinstance(doc[key], list):
            raise ValueError(f"genotype field {key!r} must be a list")
    for key in ("normal", "reduce"):
        for e in doc[key]:
            if not isinstance(e, list) or len(e) != 3:
                raise ValueError(f"{key} edge {e!r} is not [op, from, to]")
    g = Genotype(nodes=doc["nodes"], normal=doc["normal"], reduce=doc["reduce"], concat=doc["concat"])
    return g.validate()


def genotype_to_dot(g: Genotype) -> str:
    """Graphviz rendering: one digraph per cell kind."""
    lines: list[str] = []
    for kind in ("normal", "reduce"):
        lines.append(f"digraph {kind} {{")
        lines.append("  rankdir=LR;")
        lines.append('  "0" [shape=box];')
        lines.append('  "1" [shape=box];')
        for j in range(NUM_INPUT_NODES, NUM_INPUT_NODES + g.nodes):
            lines.append(f'  "n{j}";')
        for op, src, dst in g.edges(kind):
            name = str(src) if src < NUM_INPUT_NODES else f"n{src}"
            lines.append(f'  "{name}" -> "n{dst}" [label="{op}"];')
        lines.append("}")
    return "\n".join(lines) + "\n"


# -- cells and networks ------------------------------------------------------
class Cell(Module):
    """A normal or reduction cell; searched (mixed edges) or discrete (one op per retained edge)."""

    def __init__(self, kind: str, c_prev_prev: int, c_prev: int, channels: int, reduction_prev: bool,
                 topology: CellTopology, rng, alpha_ref=None, edges: Sequence[Edge] | None = None,
                 concat_nodes: Sequence[int] | None = None):
        if kind not in ("normal", "reduce"):
            raise ValueError(f"unknown cell kind {kind!r}")
        self.kind = kind
        self.reduction = kind == "reduce"
        self.topology = topology
        self.channels = channels
        self.pre0 = (FactorizedReduce(c_prev_prev, channels, rng) if reduction_prev
                     else ReLUConvBN(c_prev_prev, channels, 1, 1, 0, rng))
        self.pre1 = ReLUConvBN(c_prev, channels, 1, 1, 0, rng)
        self.searching = edges is None
        if self.searching:
            if alpha_ref is None:
                raise ValueError("a searching cell needs an alpha table")
            self.alpha_ref = alpha_ref
            self.edge_list = list(topology.edges)
            self.ops = [MixedOp(e, row, alpha_ref, channels, self._stride(e[0]), rng)
                        for row, e in enumerate(self.edge_list)]
        else:
            self.edge_list = [(src, dst) for _, src, dst in edges]
            self.op_names = [op for op, _, _ in edges]
            self.ops = [build_candidate(op, channels, self._stride(src), rng) for op, src, _ in edges]
        self.concat_nodes = list(concat_nodes) if concat_nodes is not None else topology.intermediate_nodes

    def _stride(self, src: int) -> int:
        return 2 if self.reduction and src < NUM_INPUT_NODES else 1

    @property
    def out_channels(self) -> int:
        return len(self.concat_nodes) * self.channels

    def forward(self, prev_prev, prev):
        return cell_forward(self, prev_prev, prev)


def node_output(cell: Cell, j: int, states: Sequence[Tensor], weights: Tensor | None = None) -> Tensor:
    """Sum of every incoming edge function applied to its predecessor's output."""
    total = None
    for row, ((src, dst), op) in enumerate(zip(cell.edge_list, cell.ops)):
        if dst != j:
            continue
        if cell.searching:
            y = mixed_forward(op, states[src], None if weights is None else weights[row])
        else:
            y = op(states[src])
        if total is not None and y.shape != total.shape:
            raise ValueError(f"edge ({src},{dst}) output {y.shape} does not match {total.shape}")
        total = y if total is None else total + y
    if total is None:
        raise ValueError(f"node {j} has no incoming edges")
    return total


def cell_forward(cell: Cell, prev_prev: Tensor, prev: Tensor) -> Tensor:
    s0 = cell.pre0(prev_prev)
    s1 = cell.pre1(prev)
    if s0.shape != s1.shape:
        raise ValueError(f"cell inputs preprocess to different shapes {s0.shape} and {s1.shape}")
    weights = softmax(cell.alpha_ref(), axis=1) if cell.searching else None
    states = [s0, s1]
    for j in cell.topology.intermediate_nodes:
        states.append(node_output(cell, j, states, weights))
    return concat([states[j] for j in cell.concat_nodes], axis=1)


class Network(Module):
    """Stem followed by ``cfg.cells`` stacked cells, each fed by the two previous outputs.

    With ``genotype=None`` the cells are searchable and own one alpha table per cell kind
    (stored in ``self.arch`` so that :meth:`parameters` returns network weights only).
    """

    def __init__(self, cfg: NetworkConfig, rng, genotype: Genotype | None = None):
        self.cfg = cfg
        topology = cfg.topology
        self.genotype = genotype
        if genotype is None:
            self.arch = {"normal": alpha_init(rng, topology.num_edges), "reduce": alpha_init(rng, topology.num_edges)}
        else:
            genotype.validate()
            if genotype.nodes != cfg.nodes:
                raise ValueError(f"genotype has {genotype.nodes} nodes but config expects {cfg.nodes}")
            self.arch = {}
        c_stem = cfg.stem_multiplier * cfg.init_channels
        self.stem = Sequential(Conv2d(cfg.in_channels, c_stem, 3, 1, 1, bias=False, rng=rng), BatchNorm2d(c_stem))
        c_pp, c_p, c = c_stem, c_stem, cfg.init_channels
        reduction_prev = False
        self.cells = []
        for t in range(cfg.cells):
            reduction = t in cfg.reduction_indices
            if reduction:
                c *= 2
            kind = "reduce" if reduction else "normal"
            if genotype is None:
                cell = Cell(kind, c_pp, c_p, c, reduction_prev, topology, rng, alpha_ref=self._alpha_getter(kind))
            else:
                cell = Cell(kind, c_pp, c_p, c, reduction_prev, topology, rng,
                            edges=genotype.edges(kind), concat_nodes=genotype.concat)
            self.cells.append(cell)
            reduction_prev = reduction
            c_pp, c_p = c_p, cell.out_channels
        self.out_channels = c_p

    def _alpha_getter(self, kind: str):
        return lambda: self.arch[kind]

    def alphas(self) -> list[Tensor]:
        return [self.arch[k] for k in ("normal", "reduce")] if self.arch else []

    def forward(self, x):
        return network_forward(self, x)


def network_forward(net: Network, x: Tensor, return_states: bool = False):
    """Stem output seeds y_{-1} = y_0; cell t computes y_t = f(y_{t-1}, y_{t-2})."""
    if x.ndim != 4 or x.shape[1] != net.cfg.in_channels:
        raise ValueError(f"network expects [B, {net.cfg.in_channels}, H, W], got {x.shape}")
    s = net.stem(x)
    states = [s, s]
    for cell in net.cells:
        states.append(cell(states[-2], states[-1]))
    return (states[-1], states) if return_states else states[-1]


def genotype_to_network(g: Genotype, cfg: NetworkConfig, rng) -> Network:
    g.validate()
    if g.nodes != cfg.nodes:
        cfg = dataclasses.replace(cfg, nodes=g.nodes)
    return Network(cfg, rng, genotype=g)


def alpha_entropy(alpha) -> float:
    """Mean Shannon entropy (nats) of the per-edge softmax distributions."""
    a = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha, dtype=np.float64)
    z = a - a.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return float(-(p * np.log(np.maximum(p, 1e-300))).sum(axis=1).mean())
