"""The searched CNN + LSTM classifier, the three hand-built baselines, prediction and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .cell import Genotype, Network, NetworkConfig, export_genotype, genotype_to_network, import_genotype
from .nn import LSTM, Attention, Conv2d, Dropout, Linear, Module, Pool2d, ReLU, Sequential
from .tensor import Tensor, concat, no_grad, relu, reshape, softmax, transpose

NUM_CLASSES = 4
CHECKPOINT_MAGIC = b"SERCKPT1\n"
BASELINES = ("cnn", "cnn_lstm", "cnn_lstm_attention")


@dataclasses.dataclass(frozen=True)
class HeadSpec:
    lstm_units: int = 256
    bidirectional: bool = False
    use_attention: bool = False
    dense_widths: tuple[int, ...] = (256,)
    dropout: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "dense_widths", tuple(int(w) for w in self.dense_widths))


def to_sequence(fmap: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, W, C*H]: one step per time column."""
    b, c, h, w = fmap.shape
    return reshape(transpose(fmap, (0, 3, 1, 2)), (b, w, c * h))


class DenseStack(Module):
    """Dropout, then ReLU-separated linear layers ending in the class logits."""

    def __init__(self, in_features: int, widths, dropout: float, rng):
        self.dropout = Dropout(dropout, rng)
        sizes = [in_features, *widths, NUM_CLASSES]
        self.layers = [Linear(a, b, rng=rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def forward(self, x):
        x = self.dropout(x)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


class SequenceHead(Module):
    """Feature map -> time sequence -> LSTM -> attention pooling or final states -> dense logits."""

    def __init__(self, channels: int, height: int, spec: HeadSpec, rng):
        self.lstm = LSTM(channels * height, spec.lstm_units, spec.bidirectional, rng=rng)
        self.attention = Attention(self.lstm.output_size, rng=rng) if spec.use_attention else None
        self.dense = DenseStack(self.lstm.output_size, spec.dense_widths, spec.dropout, rng)

    def forward(self, fmap):
        out = self.lstm(to_sequence(fmap))
        if self.attention is not None:
            pooled = self.attention(out)
        elif self.lstm.bidirectional:
            # each direction's final state: t = T-1 going forward, t = 0 going backward
            h = self.lstm.hidden_units
            pooled = concat([out[:, -1, :h], out[:, 0, h:]], axis=1)
        else:
            pooled = out[:, -1]
        return self.dense(pooled)


class FlattenHead(Module):
    def __init__(self, features: int, spec: HeadSpec, rng):
        self.dense = DenseStack(features, spec.dense_widths, spec.dropout, rng)

    def forward(self, fmap):
        return self.dense(reshape(fmap, (fmap.shape[0], -1)))


class ModelBundle(Module):
    """Feature extractor + classifier head mapping [B, 1, 128, 128] to [B, 4] logits."""

    def __init__(self, spec: dict, features: Module, head: Module):
        self.spec = spec
        self.features = features
        self.head = head

    def forward(self, x):
        return self.head(self.features(x))

    def alphas(self) -> list[Tensor]:
        return self.features.alphas() if isinstance(self.features, Network) else []

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.spec)

    @property
    def genotype(self) -> Genotype | None:
        g = self.spec.get("genotype")
        return import_genotype(json.dumps(g)) if g else None


def fingerprint(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def _network_spec(cfg: NetworkConfig) -> dict:
    return dataclasses.asdict(cfg)


def _head_spec(head: HeadSpec) -> dict:
    d = dataclasses.asdict(head)
    d["dense_widths"] = list(head.dense_widths)
    return d


def build_darts_model(g: Genotype, cfg: NetworkConfig, head: HeadSpec, rng, input_size: int = 128) -> ModelBundle:
    """Discrete searched CNN followed by the LSTM head."""
    net = genotype_to_network(g, cfg, rng)
    channels, height, _ = net.cfg.output_shape(input_size, input_size)
    spec = {"kind": "darts", "network": _network_spec(net.cfg), "head": _head_spec(head),
            "genotype": json.loads(export_genotype(g)), "input_size": input_size}
    return ModelBundle(spec, net, SequenceHead(channels, height, head, rng))


def build_search_model(cfg: NetworkConfig, head: HeadSpec, rng, input_size: int = 128) -> ModelBundle:
    """Continuous (alpha-mixed) network with the same LSTM head, used during search."""
    net = Network(cfg, rng)
    channels, height, _ = cfg.output_shape(input_size, input_size)
    spec = {"kind": "search", "network": _network_spec(cfg), "head": _head_spec(head), "input_size": input_size}
    return ModelBundle(spec, net, SequenceHead(channels, height, head, rng))


def _baseline_trunk(channels: int, rng) -> Sequential:
    return Sequential(Conv2d(1, channels, 2, stride=2, padding=2, rng=rng), ReLU(), Pool2d("max", 2, 2))


def build_cnn_baseline(rng, channels: int = 16, dense_widths=(256,), dropout: float = 0.3,
                       input_size: int = 128) -> ModelBundle:
    """Conv(k=2, s=2, p=2) -> max-pool(2, 2) -> dropout -> two dense layers -> 4 logits."""
    trunk = _baseline_trunk(channels, rng)
    side = _baseline_side(input_size)
    head = HeadSpec(dense_widths=tuple(dense_widths), dropout=dropout)
    spec = {"kind": "cnn", "channels": channels, "head": _head_spec(head), "input_size": input_size}
    return ModelBundle(spec, trunk, FlattenHead(channels * side * side, head, rng))


def build_cnn_lstm_baseline(rng, attention: bool = False, channels: int = 16, lstm_units: int = 128,
                            dense_widths=(256,), dropout: float = 0.3, input_size: int = 128) -> ModelBundle:
    """Baseline trunk -> bidirectional LSTM(128) -> attention or last step -> dense -> 4 logits."""
    trunk = _baseline_trunk(channels, rng)
    side = _baseline_side(input_size)
    head = HeadSpec(lstm_units=lstm_units, bidirectional=True, use_attention=attention,
                    dense_widths=tuple(dense_widths), dropout=dropout)
    kind = "cnn_lstm_attention" if attention else "cnn_lstm"
    spec = {"kind": kind, "channels": channels, "head": _head_spec(head), "input_size": input_size}
    return ModelBundle(spec, trunk, SequenceHead(channels, side, head, rng))


def _baseline_side(input_size: int) -> int:
    conv = (input_size + 2 * 2 - 1 - 1) // 2 + 1
    return (conv - 2) // 2 + 1


def build_from_spec(spec: dict, rng) -> ModelBundle:
    """Rebuild any bundle from its ``spec`` dictionary (as stored in checkpoints)."""
    kind = spec["kind"]
    head = spec.get("head", {})
    size = spec.get("input_size", 128)
    if kind == "cnn":
        return build_cnn_baseline(rng, spec["channels"], head["dense_widths"], head["dropout"], size)
    if kind in ("cnn_lstm", "cnn_lstm_attention"):
        return build_cnn_lstm_baseline(rng, kind == "cnn_lstm_attention", spec["channels"], head["lstm_units"],
                                       head["dense_widths"], head["dropout"], size)
    cfg = NetworkConfig(**spec["network"])
    head_spec = HeadSpec(**head)
    if kind == "darts":
        return build_darts_model(import_genotype(json.dumps(spec["genotype"])), cfg, head_spec, rng, size)
    if kind == "search":
        return build_search_model(cfg, head_spec, rng, size)
    raise ValueError(f"unknown model kind {kind!r}")


def predict(m: ModelBundle, batch) -> tuple[np.ndarray, np.ndarray]:
    """Class indices (ties -> lowest index) and softmax probabilities, computed in eval mode."""
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch))
    size = m.spec.get("input_size", 128)
    if x.ndim != 4 or x.shape[1:] != (1, size, size):
        raise ValueError(f"predict expects [B, 1, {size}, {size}], got {x.shape}")
    was_training = m.training
    m.eval()
    try:
        with no_grad():
            probs = softmax(m(x), axis=1).data
    finally:
        m.train(was_training)
    return np.argmax(probs, axis=1), probs


def predict_logits(logits) -> tuple[np.ndarray, np.ndarray]:
    probs = softmax(logits if isinstance(logits, Tensor) else Tensor(logits), axis=1).data
    return np.argmax(probs, axis=1), probs


# -- checkpoints -------------------------------------------------------------
def save_checkpoint(m: ModelBundle, path: str | os.PathLike, extra: dict | None = None) -> None:
    """Header JSON line (spec, fingerprint, tensor table, ``extra``) then float32 LE blobs."""
    tensors = [(f"param:{n}", p.data) for n, p in m.named_parameters()]
    tensors += [(f"buffer:{n}", b) for n, b in m.named_buffers()]
    header = {
        "spec": m.spec,
        "fingerprint": m.fingerprint,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
        "extra": extra or {},
    }
    blobs = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in tensors)
    line = (json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode()
    Path(path).write_bytes(CHECKPOINT_MAGIC + line + blobs)


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelBundle, dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    end = blob.index(b"\n", len(CHECKPOINT_MAGIC))
    header = json.loads(blob[len(CHECKPOINT_MAGIC):end])
    model = build_from_spec(header["spec"], np.random.default_rng(0))
    if model.fingerprint != header["fingerprint"]:
        raise ValueError(f"{path}: fingerprint mismatch between header and rebuilt model")
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    offset = end + 1
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        kind, name = entry["name"].split(":", 1)
        target = params[name].data if kind == "param" else buffers[name]
        if target.shape != shape:
            raise ValueError(f"{path}: tensor {name} has shape {shape}, model expects {target.shape}")
        target[...] = arr
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes after tensor payload")
    return model, header
