"""Optimizers, the cosine learning-rate schedule, and the alternating architecture-search loop."""

from __future__ import annotations

import contextlib
import dataclasses
import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .tensor import Tensor, cross_entropy, no_grad

NUM_CLASSES = 4


@dataclasses.dataclass(frozen=True)
class SgdConfig:
    lr_max: float = 0.025
    lr_min: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 3e-4
    total_epochs: int = 300

    def __post_init__(self):
        if not 0 <= self.lr_min <= self.lr_max:
            raise ValueError(f"need 0 <= lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")


@dataclasses.dataclass(frozen=True)
class AlphaOptConfig:
    lr: float = 3e-4
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = 1e-3
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"alpha lr must be non-negative, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")


@dataclasses.dataclass(frozen=True)
class SearchLoopConfig:
    epochs: int = 300
    batch_size: int = 16
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def cosine_lr(cfg: SgdConfig, epoch: float) -> float:
    if not 0 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * epoch / cfg.total_epochs))


def _check_finite(params: Sequence[Tensor], what: str) -> None:
    for i, p in enumerate(params):
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in {what} parameter #{i} (shape {p.shape}); step aborted")


class SGD:
    """SGD with momentum and coupled L2 weight decay; ``lr`` is set by the caller each epoch."""

    def __init__(self, params: Iterable[Tensor], cfg: SgdConfig):
        self.params = list(params)
        self.cfg = cfg
        self.lr = cfg.lr_max
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        sgd_step(self.params, self.cfg, self.velocity, self.lr)


def sgd_step(params: Sequence[Tensor], cfg: SgdConfig, velocity: list[np.ndarray], lr: float) -> None:
    _check_finite(params, "weight")
    for p, v in zip(params, velocity):
        v *= cfg.momentum
        v += p.grad + cfg.weight_decay * p.data
        p.data -= (lr * v).astype(p.data.dtype)


class Adam:
    """Adaptive-moment optimizer with bias correction, used for the alpha tables."""

    def __init__(self, params: Iterable[Tensor], cfg: AlphaOptConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = {"t": 0, "m": [np.zeros_like(p.data) for p in self.params],
                      "v": [np.zeros_like(p.data) for p in self.params]}

    def step(self) -> None:
        alpha_step(self.params, self.cfg, self.state)


def alpha_step(params: Sequence[Tensor], cfg: AlphaOptConfig, state: dict) -> None:
    _check_finite(params, "alpha")
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for p, m, v in zip(params, state["m"], state["v"]):
        g = p.grad + cfg.weight_decay * p.data
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data -= (cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.data.dtype)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            p.grad = p.grad * scale
    return total


# -- metrics -----------------------------------------------------------------
def weighted_accuracy(labels, preds) -> float:
    labels, preds = np.asarray(labels), np.asarray(preds)
    return float(np.mean(labels == preds)) if labels.size else float("nan")


def unweighted_accuracy(labels, preds, num_classes: int = NUM_CLASSES) -> float:
    """Mean per-class recall over the classes present in ``labels``."""
    labels, preds = np.asarray(labels), np.asarray(preds)
    recalls = [np.mean(preds[labels == k] == k) for k in range(num_classes) if np.any(labels == k)]
    return float(np.mean(recalls)) if recalls else float("nan")


def _argmax_rows(logits: np.ndarray) -> np.ndarray:
    return np.argmax(logits, axis=1)


# -- loops -------------------------------------------------------------------
def batches(n: int, batch_size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@contextlib.contextmanager
def _frozen(params: Sequence[Tensor]) -> Iterator[None]:
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def _assert_zeroed(params: Sequence[Tensor], group: str) -> None:
    for p in params:
        if p._grad is not None and np.any(p._grad):
            raise AssertionError(f"{group} gradient buffers were not zeroed before the step")


def _zero(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def _loss_step(model, x: np.ndarray, y: np.ndarray) -> tuple[Tensor, np.ndarray]:
    if len(y) == 0:
        raise ValueError("empty batch")
    logits = model(Tensor(x))
    loss = cross_entropy(logits, y)
    if not np.isfinite(loss.item()):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    return loss, _argmax_rows(logits.data)


def _summary(losses: list[float], counts: list[int], labels: list[np.ndarray], preds: list[np.ndarray]) -> dict:
    labels_all, preds_all = np.concatenate(labels), np.concatenate(preds)
    return {
        "loss": float(np.average(losses, weights=counts)),
        "wa": weighted_accuracy(labels_all, preds_all),
        "ua": unweighted_accuracy(labels_all, preds_all),
    }


def search_epoch(model, search_split, train_split, weight_opt: SGD, alpha_opt: Adam,
                 rng: np.random.Generator, batch_size: int = 16, grad_clip: float = 5.0) -> dict:
    """One epoch of first-order alternating search.

    For each search-split batch: backprop on it and update alpha only; then backprop on the next
    train-split batch (cycled) and update network weights only, with gradient-norm clipping.
    Returns {"search": metrics, "train": metrics}.
    """
    xs, ys = search_split
    xt, yt = train_split
    if len(ys) == 0 or len(yt) == 0:
        raise ValueError("search_epoch needs non-empty search and train splits")
    weights, alphas = weight_opt.params, alpha_opt.params
    model.train()
    s_batches = batches(len(ys), batch_size, rng)
    t_batches = batches(len(yt), batch_size, rng)
    record = {"search": ([], [], [], []), "train": ([], [], [], [])}
    for step, s_idx in enumerate(s_batches):
        t_idx = t_batches[step % len(t_batches)]
        for phase, idx, x, y, own, other, opt in (
            ("search", s_idx, xs, ys, alphas, weights, alpha_opt),
            ("train", t_idx, xt, yt, weights, alphas, weight_opt),
        ):
            _assert_zeroed(own + other, "alpha/weight")
            with _frozen(other):
                loss, pred = _loss_step(model, x[idx], y[idx])
                loss.backward()
            _assert_zeroed(other, "alpha" if other is alphas else "weight")
            if opt is weight_opt:
                clip_grad_norm(own, grad_clip)
            opt.step()
            _zero(own)
            losses, counts, labels, preds = record[phase]
            losses.append(loss.item())
            counts.append(len(idx))
            labels.append(y[idx])
            preds.append(pred)
    return {phase: _summary(*vals) for phase, vals in record.items()}


def train_epoch(model, train_split, opt: SGD, rng: np.random.Generator, batch_size: int = 16,
                grad_clip: float | None = 5.0) -> dict:
    x, y = train_split
    if len(y) == 0:
        raise ValueError("train_epoch on an empty dataset")
    model.train()
    losses, counts, labels, preds = [], [], [], []
    for idx in batches(len(y), batch_size, rng):
        _zero(opt.params)
        loss, pred = _loss_step(model, x[idx], y[idx])
        loss.backward()
        if grad_clip is not None:
            clip_grad_norm(opt.params, grad_clip)
        opt.step()
        _zero(opt.params)
        losses.append(loss.item())
        counts.append(len(idx))
        labels.append(y[idx])
        preds.append(pred)
    return _summary(losses, counts, labels, preds)


def evaluate(model, data, batch_size: int = 16) -> dict:
    """Eval-mode loss, WA and UA; the model's train/eval mode is restored afterwards."""
    x, y = data
    if len(y) == 0:
        raise ValueError("evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    losses, counts, labels, preds = [], [], [], []
    try:
        with no_grad():
            for idx in batches(len(y), batch_size, None):
                logits = model(Tensor(x[idx]))
                losses.append(cross_entropy(logits, y[idx]).item())
                counts.append(len(idx))
                labels.append(y[idx])
                preds.append(_argmax_rows(logits.data))
    finally:
        model.train(was_training)
    return _summary(losses, counts, labels, preds)


def run_search(model, search_split, train_split, sgd_cfg: SgdConfig, alpha_cfg: AlphaOptConfig,
               loop: SearchLoopConfig, rng: np.random.Generator,
               on_epoch: Callable[[int, dict, float], None] | None = None) -> list[dict]:
    """Run ``loop.epochs`` search epochs with a cosine-annealed weight learning rate."""
    weight_opt = SGD(model.parameters(), sgd_cfg)
    alpha_opt = Adam(model.alphas(), alpha_cfg)
    history = []
    for epoch in range(loop.epochs):
        weight_opt.lr = cosine_lr(sgd_cfg, min(epoch, sgd_cfg.total_epochs))
        metrics = search_epoch(model, search_split, train_split, weight_opt, alpha_opt, rng,
                               loop.batch_size, loop.grad_clip)
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(epoch, metrics, weight_opt.lr)
    return history


def run_training(model, train_split, sgd_cfg: SgdConfig, epochs: int, rng: np.random.Generator,
                 batch_size: int = 16, grad_clip: float | None = 5.0,
                 on_epoch: Callable[[int, dict, float], None] | None = None) -> list[dict]:
    opt = SGD(model.parameters(), sgd_cfg)
    history = []
    for epoch in range(epochs):
        opt.lr = cosine_lr(sgd_cfg, min(epoch, sgd_cfg.total_epochs))
        metrics = train_epoch(model, train_split, opt, rng, batch_size, grad_clip)
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(epoch, metrics, opt.lr)
    return history
