"""Layer primitives (convolution, pooling, batch norm, LSTM, attention) and a small module system."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import (
    Tensor,
    concat,
    default_dtype,
    matmul,
    mul,
    note_branch,
    relu,
    reshape,
    sigmoid,
    softmax,
    stack,
    tanh,
    transpose,
)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def conv_output_size(n: int, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (n + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _window(start: int, count: int, stride: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


# -- functional primitives -------------------------------------------------
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0, dilation=1, groups: int = 1) -> Tensor:
    """2-D cross-correlation over ``x`` of shape [B, C, H, W]."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects a 4-D input, got shape {x.shape}")
    b, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    dh, dw = _pair(dilation)
    if c % groups or o % groups or cg * groups != c:
        raise ValueError(f"input has {c} channels but weight {weight.shape} with groups={groups} expects {cg * groups}")
    ho = conv_output_size(h, kh, sh, ph, dh)
    wo = conv_output_size(w, kw, sw, pw, dw)
    if ho < 1 or wo < 1:
        raise ValueError(f"non-positive conv output extent {ho}x{wo} for input {h}x{w}")
    xd, wd = x.data, weight.data
    offsets = [(i, j, _window(i * dh, ho, sh), _window(j * dw, wo, sw)) for i in range(kh) for j in range(kw)]
    depthwise = groups == c and cg == 1 and o == c
    og = o // groups

    def padded():
        return np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))

    def channel_major(xp):
        return np.ascontiguousarray(xp.transpose(1, 0, 2, 3))

    if depthwise:
        xp = padded()
        out = np.zeros((b, o, ho, wo), dtype=xd.dtype)
        for i, j, hs, ws in offsets:
            out += xp[:, :, hs, ws] * wd[:, 0, i, j][None, :, None, None]
    else:
        xpt = channel_major(padded())
        out_t = np.zeros((o, b * ho * wo), dtype=xd.dtype)
        for gi in range(groups):
            xs = xpt[gi * cg:(gi + 1) * cg]
            rows = slice(gi * og, (gi + 1) * og)
            for i, j, hs, ws in offsets:
                out_t[rows] += wd[rows, :, i, j] @ xs[:, :, hs, ws].reshape(cg, -1)
        out = np.ascontiguousarray(out_t.reshape(o, b, ho, wo).transpose(1, 0, 2, 3))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def rule(g):
        # padded input is rebuilt here rather than kept alive between passes
        dwt = np.zeros_like(wd)
        if depthwise:
            xp = padded()
            dxp = np.zeros_like(xp)
            for i, j, hs, ws in offsets:
                dwt[:, 0, i, j] = np.einsum("bchw,bchw->c", g, xp[:, :, hs, ws])
                dxp[:, :, hs, ws] += g * wd[:, 0, i, j][None, :, None, None]
        else:
            xpt = channel_major(padded())
            gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
            dxpt = np.zeros_like(xpt)
            for gi in range(groups):
                xs = xpt[gi * cg:(gi + 1) * cg]
                rows = slice(gi * og, (gi + 1) * og)
                gg = gt[rows]
                for i, j, hs, ws in offsets:
                    dwt[rows, :, i, j] = gg @ xs[:, :, hs, ws].reshape(cg, -1).T
                    dxpt[gi * cg:(gi + 1) * cg, :, hs, ws] += (wd[rows, :, i, j].T @ gg).reshape(cg, b, ho, wo)
            dxp = dxpt.transpose(1, 0, 2, 3)
        dx = dxp[:, :, ph:ph + h, pw:pw + w]
        db = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return np.ascontiguousarray(dx), dwt, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, rule)


def pool2d(kind: str, x: Tensor, kernel, stride=None, padding=0) -> Tensor:
    """Max or average pooling. Average pooling excludes padded cells from the count."""
    if kind not in ("max", "avg"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    if x.ndim != 4:
        raise ValueError(f"pool2d expects a 4-D input, got shape {x.shape}")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    ph, pw = _pair(padding)
    b, c, h, w = x.shape
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise ValueError(f"pool kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(w, kw, sw, pw)
    offsets = [(_window(i, ho, sh), _window(j, wo, sw)) for i in range(kh) for j in range(kw)]
    dtype = x.data.dtype

    if kind == "max":
        xd = x.data

        def padded():
            return np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)

        xp = padded()
        hs, ws = offsets[0]
        best = xp[:, :, hs, ws].copy()
        for hs, ws in offsets[1:]:
            np.maximum(best, xp[:, :, hs, ws], out=best)
        note_branch(lambda: _first_max_offset(xp, best, offsets))
        del xp

        def rule(g):
            xp = padded()
            dxp = np.zeros_like(xp)
            claimed = np.zeros(best.shape, dtype=bool)
            routed = np.empty_like(g)
            # offsets are visited in order, so the first maximum in each window gets the gradient
            for hs, ws in offsets:
                hit = xp[:, :, hs, ws] == best
                hit &= ~claimed
                claimed |= hit
                np.multiply(g, hit, out=routed)
                dxp[:, :, hs, ws] += routed
            return (np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + w]),)

        return Tensor._result(best, (x,), rule)

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ones = np.pad(np.ones((h, w), dtype=dtype), ((ph, ph), (pw, pw)))
    total = np.zeros((b, c, ho, wo), dtype=dtype)
    counts = np.zeros((ho, wo), dtype=dtype)
    for hs, ws in offsets:
        total += xp[:, :, hs, ws]
        counts += ones[hs, ws]
    out = total / counts
    padded_shape = xp.shape
    del xp

    def rule(g):
        dxp = np.zeros(padded_shape, dtype=dtype)
        share = g / counts
        for hs, ws in offsets:
            dxp[:, :, hs, ws] += share
        return (np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + w]),)

    return Tensor._result(out, (x,), rule)


def _first_max_offset(xp: np.ndarray, best: np.ndarray, offsets) -> np.ndarray:
    winner = np.full(best.shape, -1, dtype=np.int64)
    for k, (hs, ws) in enumerate(offsets):
        winner[(winner < 0) & (xp[:, :, hs, ws] == best)] = k
    return winner


def batchnorm2d(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation; training mode updates the running stats in place."""
    if x.ndim != 4 or x.shape[1] != scale.shape[0]:
        raise ValueError(f"batchnorm channel mismatch: input {x.shape}, {scale.shape[0]} parameters")
    n = x.shape[0] * x.shape[2] * x.shape[3]
    if n == 0:
        raise ValueError("batchnorm on a batch of size 0")
    xd = x.data
    gamma = scale.data[None, :, None, None]
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)[None, :, None, None]
    centre = mu.astype(xd.dtype)[None, :, None, None]
    out = gamma * ((xd - centre) * inv) + shift.data[None, :, None, None]

    def rule(g):
        xhat = (xd - centre) * inv
        dscale = (g * xhat).sum(axis=(0, 2, 3))
        dshift = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma
        if training:
            dx = inv / n * (
                n * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            dx = dxhat * inv
        return dx, dscale, dshift

    return Tensor._result(out, (x, scale, shift), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear expects {weight.shape[1]} input features, got shape {x.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def rule(g):
        g2 = g.reshape(-1, g.shape[-1])
        dx = g @ wd
        dw = g2.T @ xd.reshape(-1, xd.shape[-1])
        db = g2.sum(axis=0) if bias is not None else None
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._result(out, parents, rule)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability ``p``, rescale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, Tensor(keep, dtype=x.data.dtype))


def _lstm_direction(x: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor, reverse: bool) -> Tensor:
    b, t, _ = x.shape
    hidden = w_hh.shape[1]
    proj = linear(x, w_ih, bias)
    w_hh_t = transpose(w_hh)
    h = Tensor(np.zeros((b, hidden), dtype=x.data.dtype), dtype=x.data.dtype)
    c = h
    outputs: list[Tensor | None] = [None] * t
    for step in (reversed(range(t)) if reverse else range(t)):
        gates = proj[:, step] + matmul(h, w_hh_t)
        i = sigmoid(gates[:, :hidden])
        f = sigmoid(gates[:, hidden:2 * hidden])
        g = tanh(gates[:, 2 * hidden:3 * hidden])
        o = sigmoid(gates[:, 3 * hidden:])
        c = f * c + i * g
        h = o * tanh(c)
        outputs[step] = h
    return stack(outputs, axis=1)


def attention_pool(seq: Tensor, weight: Tensor, vector: Tensor, return_weights: bool = False):
    """Additive attention over time: softmax_t(v . tanh(W h_t)) weighted sum of h_t."""
    if seq.ndim != 3 or seq.shape[1] < 1:
        raise ValueError(f"attention_pool expects [B, T>=1, H], got {seq.shape}")
    b, t, hdim = seq.shape
    scores = matmul(tanh(linear(seq, weight)), reshape(vector, (-1, 1)))
    weights = softmax(reshape(scores, (b, t)), axis=1)
    pooled = reshape(matmul(reshape(weights, (b, 1, t)), seq), (b, hdim))
    return (pooled, weights) if return_weights else pooled


# -- module system ---------------------------------------------------------
def _uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Base class: parameters are tracked Tensor attributes, buffers are ndarray attributes."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{name}.{i}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._children():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Identity(Module):
    def forward(self, x):
        return x


class ReLU(Module):
    def forward(self, x):
        return relu(x)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, dilation=1, groups=1,
                 bias=True, rng=None):
        if in_channels % groups or out_channels % groups:
            raise ValueError(f"channels {in_channels}->{out_channels} not divisible by groups={groups}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride = _pair(kernel), _pair(stride)
        self.padding, self.dilation, self.groups = _pair(padding), _pair(dilation), groups
        fan_in = in_channels // groups * self.kernel[0] * self.kernel[1]
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = _uniform(rng, (out_channels, in_channels // groups, *self.kernel), bound)
        self.bias = _uniform(rng, (out_channels,), bound) if bias else None

    def output_shape(self, h: int, w: int) -> tuple[int, int]:
        return (conv_output_size(h, self.kernel[0], self.stride[0], self.padding[0], self.dilation[0]),
                conv_output_size(w, self.kernel[1], self.stride[1], self.padding[1], self.dilation[1]))

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"conv expects {self.in_channels} input channels, got {x.shape[1]}")
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation, self.groups)


class Pool2d(Module):
    def __init__(self, kind: str, kernel, stride=None, padding=0):
        self.kind, self.kernel, self.stride, self.padding = kind, kernel, stride, padding

    def forward(self, x):
        return pool2d(self.kind, x, self.kernel, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        dtype = default_dtype()
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        return batchnorm2d(x, self.scale, self.shift, self.running_mean, self.running_var,
                           self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng=None):
        bound = 1.0 / np.sqrt(in_features)
        self.weight = _uniform(rng, (out_features, in_features), bound)
        self.bias = _uniform(rng, (out_features,), bound) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p, self.rng = p, rng

    def forward(self, x):
        return dropout(x, self.p, self.training, self.rng)


class LSTM(Module):
    """Single-layer LSTM over [B, T, F]; gate order input, forget, cell, output."""

    def __init__(self, input_size: int, hidden_units: int, bidirectional: bool = False, rng=None):
        self.input_size, self.hidden_units, self.bidirectional = input_size, hidden_units, bidirectional
        bound = 1.0 / np.sqrt(hidden_units)
        self.w_ih = _uniform(rng, (4 * hidden_units, input_size), bound)
        self.w_hh = _uniform(rng, (4 * hidden_units, hidden_units), bound)
        self.bias = _uniform(rng, (4 * hidden_units,), bound)
        if bidirectional:
            self.w_ih_rev = _uniform(rng, (4 * hidden_units, input_size), bound)
            self.w_hh_rev = _uniform(rng, (4 * hidden_units, hidden_units), bound)
            self.bias_rev = _uniform(rng, (4 * hidden_units,), bound)

    @property
    def output_size(self) -> int:
        return self.hidden_units * (2 if self.bidirectional else 1)

    def forward(self, seq):
        return lstm_forward(self, seq)


def lstm_forward(spec: LSTM, seq: Tensor) -> Tensor:
    if seq.ndim != 3 or seq.shape[2] != spec.input_size:
        raise ValueError(f"LSTM expects [B, T, {spec.input_size}], got {seq.shape}")
    if seq.shape[1] == 0:
        raise ValueError("LSTM over an empty sequence (T == 0)")
    forward = _lstm_direction(seq, spec.w_ih, spec.w_hh, spec.bias, reverse=False)
    if not spec.bidirectional:
        return forward
    backward = _lstm_direction(seq, spec.w_ih_rev, spec.w_hh_rev, spec.bias_rev, reverse=True)
    return concat([forward, backward], axis=2)


class Attention(Module):
    def __init__(self, hidden: int, units: int | None = None, rng=None):
        units = units or hidden
        self.weight = _uniform(rng, (units, hidden), 1.0 / np.sqrt(hidden))
        self.vector = _uniform(rng, (units,), 1.0 / np.sqrt(units))

    def forward(self, seq):
        return attention_pool(seq, self.weight, self.vector)
