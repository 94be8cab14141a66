"""Candidate operations for a cell edge and the softmax-weighted mixture over them."""

from __future__ import annotations

import enum

import numpy as np

from .nn import BatchNorm2d, Conv2d, Identity, Module, Pool2d, Sequential, ReLU
from .tensor import Tensor, concat, relu, softmax


class OpKind(str, enum.Enum):
    MAX_POOL_3X3 = "max_pool_3x3"
    AVG_POOL_3X3 = "avg_pool_3x3"
    SEP_CONV_3X3 = "sep_conv_3x3"
    SEP_CONV_5X5 = "sep_conv_5x5"
    DIL_CONV_3X3 = "dil_conv_3x3"
    DIL_CONV_5X5 = "dil_conv_5x5"
    SKIP_CONNECT = "skip_connect"
    NONE = "none"

    @property
    def index(self) -> int:
        return OPS.index(self)


OPS: tuple[OpKind, ...] = tuple(OpKind)
OP_NAMES: tuple[str, ...] = tuple(op.value for op in OPS)
NUM_OPS = len(OPS)


class Zero(Module):
    """The ``none`` edge: zeros of the edge's output shape."""

    def __init__(self, stride: int):
        self.stride = stride

    def forward(self, x):
        b, c, h, w = x.shape
        if self.stride > 1:
            h, w = -(-h // self.stride), -(-w // self.stride)
        return Tensor(np.zeros((b, c, h, w), dtype=x.data.dtype), dtype=x.data.dtype)


class FactorizedReduce(Module):
    """ReLU, two offset 1x1 stride-2 convolutions concatenated on channels, then batch norm."""

    def __init__(self, c_in: int, c_out: int, rng):
        if c_out % 2:
            raise ValueError(f"factorized reduction needs an even channel count, got {c_out}")
        self.conv_a = Conv2d(c_in, c_out // 2, 1, stride=2, bias=False, rng=rng)
        self.conv_b = Conv2d(c_in, c_out // 2, 1, stride=2, bias=False, rng=rng)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x):
        x = relu(x)
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"factorized reduction needs even spatial extents, got {x.shape[2:]}")
        return self.bn(concat([self.conv_a(x), self.conv_b(x[:, :, 1:, 1:])], axis=1))


class ReLUConvBN(Sequential):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, padding: int, rng):
        super().__init__(ReLU(), Conv2d(c_in, c_out, kernel, stride, padding, bias=False, rng=rng), BatchNorm2d(c_out))


class SepConv(Sequential):
    """ReLU -> depthwise conv -> BN -> pointwise conv -> BN."""

    def __init__(self, channels: int, kernel: int, stride: int, rng):
        super().__init__(
            ReLU(),
            Conv2d(channels, channels, kernel, stride, kernel // 2, groups=channels, bias=False, rng=rng),
            BatchNorm2d(channels),
            Conv2d(channels, channels, 1, bias=False, rng=rng),
            BatchNorm2d(channels),
        )


class DilConv(Sequential):
    """ReLU -> dilated depthwise conv -> pointwise conv -> BN, padded to keep stride-1 extent."""

    def __init__(self, channels: int, kernel: int, stride: int, rng, dilation: int = 2):
        super().__init__(
            ReLU(),
            Conv2d(channels, channels, kernel, stride, dilation * (kernel - 1) // 2, dilation=dilation,
                   groups=channels, bias=False, rng=rng),
            Conv2d(channels, channels, 1, bias=False, rng=rng),
            BatchNorm2d(channels),
        )


def build_candidate(kind: OpKind | str, channels: int, stride: int, rng) -> Module:
    kind = OpKind(kind)
    if stride not in (1, 2):
        raise ValueError(f"candidate stride must be 1 or 2, got {stride}")
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    if kind is OpKind.NONE:
        return Zero(stride)
    if kind is OpKind.SKIP_CONNECT:
        return Identity() if stride == 1 else FactorizedReduce(channels, channels, rng)
    if kind is OpKind.MAX_POOL_3X3:
        return Pool2d("max", 3, stride, 1)
    if kind is OpKind.AVG_POOL_3X3:
        return Pool2d("avg", 3, stride, 1)
    if kind is OpKind.SEP_CONV_3X3:
        return SepConv(channels, 3, stride, rng)
    if kind is OpKind.SEP_CONV_5X5:
        return SepConv(channels, 5, stride, rng)
    if kind is OpKind.DIL_CONV_3X3:
        return DilConv(channels, 3, stride, rng)
    return DilConv(channels, 5, stride, rng)


def alpha_init(rng: np.random.Generator, num_edges: int, scale: float = 1e-3) -> Tensor:
    """A tracked [num_edges, 8] table of architecture weights drawn from N(0, scale^2)."""
    if num_edges < 1:
        raise ValueError(f"num_edges must be >= 1, got {num_edges}")
    return Tensor(scale * rng.standard_normal((num_edges, NUM_OPS)), requires_grad=True)


class MixedOp(Module):
    """All eight candidates on one edge, mixed by the softmax of that edge's alpha row."""

    def __init__(self, edge: tuple[int, int], row: int, alpha_ref, channels: int, stride: int, rng):
        self.edge = edge
        self.row = row
        # a zero-arg callable returning the shared alpha table; keeps alpha out of parameters()
        self.alpha_ref = alpha_ref
        self.candidates = [build_candidate(op, channels, stride, rng) for op in OPS]

    def forward(self, x, weights: Tensor | None = None):
        return mixed_forward(self, x, weights)


def mixed_forward(m: MixedOp, x: Tensor, weights: Tensor | None = None) -> Tensor:
    """Sum over candidates of w_k * o_k(x) with w = softmax(alpha_row) unless ``weights`` is given."""
    if weights is None:
        weights = softmax(m.alpha_ref()[m.row], axis=0)
    out = None
    shape = None
    for k, (op, candidate) in enumerate(zip(OPS, m.candidates)):
        y = candidate(x)
        if shape is None:
            shape = y.shape
        elif y.shape != shape:
            raise ValueError(f"candidate {op.value} produced {y.shape}, expected {shape} on edge {m.edge}")
        if op is OpKind.NONE:
            # contributes exactly zero to value and input gradient
            continue
        term = y * weights[k]
        out = term if out is None else out + term
    return out
