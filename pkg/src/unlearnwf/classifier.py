"""Direction-sequence classifier with exact hand-written forward and backward.

The model is a small 1-D convnet over the raw direction symbols, ending in a
softmax over website labels. Everything is explicit numpy so per-sample
gradients (needed by influence scoring and Fisher importance) are cheap and
exactly verifiable against finite differences.

Parameters live in one flat float64 vector ``theta`` with a named segment
table, which is what the importance and dampening stages operate on.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np


class TrainingDiverged(RuntimeError):
    """Training loss became non-finite."""


# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv1d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


Layer = Union[Conv1d, Relu, GlobalAvgPool, Dense]

_LAYER_TAGS = {Conv1d: "conv1d", Relu: "relu", GlobalAvgPool: "global_avg_pool", Dense: "dense"}


@dataclass(frozen=True)
class Architecture:
    """Ordered layer chain plus the input length it expects."""

    layers: tuple[Layer, ...]
    input_len: int

    def __post_init__(self) -> None:
        self.output_dim()  # raises on an incompatible chain

    def output_dim(self) -> int:
        """Propagate shapes through the chain; raises ValueError on mismatch."""
        shape: tuple = ("map", 1, self.input_len)  # (kind, channels, length) or (kind, dim)
        for k, layer in enumerate(self.layers):
            if isinstance(layer, Conv1d):
                if shape[0] != "map":
                    raise ValueError(f"layer {k}: conv1d needs a (channels, length) input")
                _, c, length = shape
                if c != layer.in_channels:
                    raise ValueError(f"layer {k}: conv1d expects {layer.in_channels} channels, got {c}")
                if length < layer.kernel:
                    raise ValueError(f"layer {k}: input length {length} shorter than kernel {layer.kernel}")
                out_len = (length - layer.kernel) // layer.stride + 1
                shape = ("map", layer.out_channels, out_len)
            elif isinstance(layer, Relu):
                pass
            elif isinstance(layer, GlobalAvgPool):
                if shape[0] != "map":
                    raise ValueError(f"layer {k}: pooling needs a (channels, length) input")
                shape = ("vec", shape[1])
            elif isinstance(layer, Dense):
                dim = shape[1] if shape[0] == "vec" else shape[1] * shape[2]
                if dim != layer.in_features:
                    raise ValueError(f"layer {k}: dense expects {layer.in_features} features, got {dim}")
                shape = ("vec", layer.out_features)
            else:
                raise ValueError(f"layer {k}: unknown layer {layer!r}")
        if shape[0] != "vec":
            raise ValueError("final layer must produce a vector of class logits")
        return shape[1]

    def to_dict(self) -> dict:
        out = {"input_len": self.input_len, "layers": []}
        for layer in self.layers:
            entry = {"type": _LAYER_TAGS[type(layer)]}
            entry.update(vars(layer))
            out["layers"].append(entry)
        return out

    @staticmethod
    def from_dict(d: dict) -> "Architecture":
        ctors = {"conv1d": Conv1d, "relu": Relu, "global_avg_pool": GlobalAvgPool, "dense": Dense}
        layers = []
        for entry in d["layers"]:
            kwargs = {k: v for k, v in entry.items() if k != "type"}
            layers.append(ctors[entry["type"]](**kwargs))
        return Architecture(layers=tuple(layers), input_len=d["input_len"])


def default_architecture(input_len: int, num_labels: int) -> Architecture:
    """Small convnet: two strided conv blocks, global pooling, one dense head."""
    return Architecture(
        layers=(
            Conv1d(1, 16, kernel=8, stride=4),
            Relu(),
            Conv1d(16, 32, kernel=8, stride=4),
            Relu(),
            GlobalAvgPool(),
            Dense(32, num_labels),
        ),
        input_len=input_len,
    )


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    stop: int
    shape: tuple[int, ...]


def _segments_for(arch: Architecture) -> tuple[Segment, ...]:
    segs: list[Segment] = []
    pos = 0

    def add(name: str, shape: tuple[int, ...]) -> None:
        nonlocal pos
        size = int(np.prod(shape))
        segs.append(Segment(name, pos, pos + size, shape))
        pos += size

    for k, layer in enumerate(arch.layers):
        if isinstance(layer, Conv1d):
            add(f"layer{k}.weight", (layer.out_channels, layer.in_channels, layer.kernel))
            add(f"layer{k}.bias", (layer.out_channels,))
        elif isinstance(layer, Dense):
            add(f"layer{k}.weight", (layer.out_features, layer.in_features))
            add(f"layer{k}.bias", (layer.out_features,))
    return tuple(segs)


class ModelState:
    """Architecture plus one flat parameter vector with named segments."""

    def __init__(self, arch: Architecture, theta: np.ndarray):
        self.arch = arch
        self.segments = _segments_for(arch)
        self.param_count = self.segments[-1].stop if self.segments else 0
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.param_count,):
            raise ValueError(f"theta must have shape ({self.param_count},), got {theta.shape}")
        self.theta = theta

    def segment(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(name)

    def view(self, name: str) -> np.ndarray:
        seg = self.segment(name)
        return self.theta[seg.start : seg.stop].reshape(seg.shape)

    def with_theta(self, theta: np.ndarray) -> "ModelState":
        return ModelState(self.arch, np.asarray(theta, dtype=np.float64).copy())

    @property
    def num_labels(self) -> int:
        return self.arch.output_dim()

    def final_dense_slice(self) -> slice:
        """Flat index range of the last dense layer (weights and bias)."""
        dense_idx = [k for k, l in enumerate(self.arch.layers) if isinstance(l, Dense)]
        if not dense_idx:
            raise ValueError("architecture has no dense layer")
        k = dense_idx[-1]
        w = self.segment(f"layer{k}.weight")
        b = self.segment(f"layer{k}.bias")
        return slice(w.start, b.stop)


def init_model(arch: Architecture, seed: int) -> ModelState:
    """Scaled-uniform weights, U(-1/sqrt(fan_in), 1/sqrt(fan_in)); zero biases."""
    rng = np.random.default_rng(seed)
    segs = _segments_for(arch)
    total = segs[-1].stop if segs else 0
    theta = np.zeros(total, dtype=np.float64)
    for seg in segs:
        if seg.name.endswith(".bias"):
            continue
        fan_in = int(np.prod(seg.shape[1:]))
        scale = 1.0 / np.sqrt(fan_in)
        theta[seg.start : seg.stop] = rng.uniform(-scale, scale, seg.stop - seg.start)
    return ModelState(arch, theta)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _conv_windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    # x: (B, C, L) -> (B, C, L_out, kernel), stride-spaced views (no copy)
    win = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=2)
    return win[:, :, ::stride, :]


def _forward(model: ModelState, X: np.ndarray) -> tuple[np.ndarray, list]:
    """Run the chain on a (B, n) batch; returns logits and per-layer caches."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.arch.input_len:
        raise ValueError(f"input must have shape (B, {model.arch.input_len})")
    a: np.ndarray = X[:, None, :]  # (B, 1, n) activation map
    caches: list = []
    for k, layer in enumerate(model.arch.layers):
        if isinstance(layer, Conv1d):
            w = model.view(f"layer{k}.weight")
            b = model.view(f"layer{k}.bias")
            in_len = a.shape[2]
            win = _conv_windows(a, layer.kernel, layer.stride)
            a = np.einsum("bilk,oik->bol", win, w, optimize=True) + b[None, :, None]
            caches.append(("conv", k, win, in_len))
        elif isinstance(layer, Relu):
            mask = a > 0
            a = a * mask
            caches.append(("relu", k, mask))
        elif isinstance(layer, GlobalAvgPool):
            caches.append(("gap", k, a.shape[2]))
            a = a.mean(axis=2)
        elif isinstance(layer, Dense):
            flat = a.reshape(a.shape[0], -1)
            caches.append(("dense", k, flat, a.shape))
            w = model.view(f"layer{k}.weight")
            b = model.view(f"layer{k}.bias")
            a = flat @ w.T + b[None, :]
    return a, caches


def _backward(model: ModelState, caches: list, dlogits: np.ndarray,
              per_sample: bool) -> np.ndarray:
    """Backpropagate dlogits; returns flat grads, (K,) or (B, K) per sample."""
    B = dlogits.shape[0]
    if per_sample:
        grads = np.zeros((B, model.param_count), dtype=np.float64)
    else:
        grads = np.zeros(model.param_count, dtype=np.float64)

    def store(name: str, value: np.ndarray) -> None:
        seg = model.segment(name)
        if per_sample:
            grads[:, seg.start : seg.stop] = value.reshape(B, -1)
        else:
            grads[seg.start : seg.stop] = value.ravel()

    da = dlogits
    for cache in reversed(caches):
        kind, k = cache[0], cache[1]
        layer = model.arch.layers[k]
        if kind == "dense":
            flat, in_shape = cache[2], cache[3]
            w = model.view(f"layer{k}.weight")
            if per_sample:
                store(f"layer{k}.weight", np.einsum("bo,bi->boi", da, flat))
                store(f"layer{k}.bias", da)
            else:
                store(f"layer{k}.weight", da.T @ flat)
                store(f"layer{k}.bias", da.sum(axis=0))
            da = (da @ w).reshape(in_shape)
        elif kind == "gap":
            length = cache[2]
            da = np.repeat(da[:, :, None], length, axis=2) / length
        elif kind == "relu":
            da = da * cache[2]
        elif kind == "conv":
            win, l_in = cache[2], cache[3]
            w = model.view(f"layer{k}.weight")
            if per_sample:
                store(f"layer{k}.weight", np.einsum("bol,bilk->boik", da, win, optimize=True))
                store(f"layer{k}.bias", da.sum(axis=2))
            else:
                store(f"layer{k}.weight", np.einsum("bol,bilk->oik", da, win, optimize=True))
                store(f"layer{k}.bias", da.sum(axis=(0, 2)))
            B_, _, l_out, _ = win.shape
            dx = np.zeros((B_, layer.in_channels, l_in), dtype=np.float64)
            for j in range(layer.kernel):
                dx[:, :, j : j + layer.stride * (l_out - 1) + 1 : layer.stride] += np.einsum(
                    "bol,oi->bil", da, w[:, :, j], optimize=True
                )
            da = dx
    return grads


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward_batch(model: ModelState, X: np.ndarray) -> np.ndarray:
    """Softmax probabilities for a (B, n) batch of direction sequences."""
    logits, _ = _forward(model, X)
    return _softmax(logits)


def forward(model: ModelState, dirs: Sequence[float] | np.ndarray) -> np.ndarray:
    """Probability vector over labels for one trace."""
    X = np.asarray(dirs, dtype=np.float64)[None, :]
    return forward_batch(model, X)[0]


def predict_batch(model: ModelState, X: np.ndarray) -> np.ndarray:
    # argmax breaks ties toward the lowest label index
    return np.argmax(forward_batch(model, X), axis=1)


def predict(model: ModelState, dirs: Sequence[float] | np.ndarray) -> int:
    return int(np.argmax(forward(model, dirs)))


def loss(model: ModelState, X: np.ndarray, y: np.ndarray) -> float:
    """Mean categorical cross-entropy over the batch."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("loss of an empty batch is undefined")
    logits, _ = _forward(model, X)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


def _dlogits(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    probs = _softmax(logits)
    probs[np.arange(len(y)), y] -= 1.0
    return probs  # per-sample d(CE)/d(logits)


def grad(model: ModelState, dirs: Sequence[float] | np.ndarray, label: int) -> np.ndarray:
    """Exact gradient of one sample's cross-entropy with respect to theta."""
    X = np.asarray(dirs, dtype=np.float64)[None, :]
    y = np.asarray([label], dtype=np.int64)
    logits, caches = _forward(model, X)
    return _backward(model, caches, _dlogits(logits, y), per_sample=True)[0]


def mean_grad(model: ModelState, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy over the batch, shape (K,)."""
    y = np.asarray(y, dtype=np.int64)
    logits, caches = _forward(model, X)
    return _backward(model, caches, _dlogits(logits, y) / len(y), per_sample=False)


def sum_grads(model: ModelState, X: np.ndarray, y: np.ndarray,
              chunk: int = 512) -> np.ndarray:
    """Sum of per-sample gradients over the batch, shape (K,)."""
    y = np.asarray(y, dtype=np.int64)
    total = np.zeros(model.param_count, dtype=np.float64)
    for lo in range(0, len(y), chunk):
        Xc, yc = X[lo : lo + chunk], y[lo : lo + chunk]
        logits, caches = _forward(model, Xc)
        total += _backward(model, caches, _dlogits(logits, yc), per_sample=False)
    return total


def per_sample_grads(model: ModelState, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy gradients, shape (B, K). Caller bounds B."""
    y = np.asarray(y, dtype=np.int64)
    logits, caches = _forward(model, X)
    return _backward(model, caches, _dlogits(logits, y), per_sample=True)


def iter_per_sample_grads(model: ModelState, X: np.ndarray, y: np.ndarray,
                          chunk: int = 256) -> Iterator[tuple[int, np.ndarray]]:
    """Yield (offset, grads) chunks to keep the (B, K) matrices bounded."""
    for lo in range(0, len(y), chunk):
        yield lo, per_sample_grads(model, X[lo : lo + chunk], y[lo : lo + chunk])


def pooled_features(model: ModelState, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(features entering the final dense layer, softmax probs) for a batch."""
    logits, caches = _forward(model, X)
    for cache in reversed(caches):
        if cache[0] == "dense":
            return cache[2], _softmax(logits)
    raise ValueError("architecture has no dense layer")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


def train(model: ModelState, X: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> ModelState:
    """Minibatch SGD with momentum and seeded per-epoch shuffling.

    Deterministic for fixed inputs and config; the input model is not
    mutated. Raises TrainingDiverged if the loss becomes non-finite.
    """
    cfg.validate()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("training split is empty")
    if int(y.max()) >= model.num_labels:
        raise ValueError(f"label {int(y.max())} outside model output dim {model.num_labels}")
    rng = np.random.default_rng(cfg.seed)
    theta = model.theta.copy()
    velocity = np.zeros_like(theta)
    state = ModelState(model.arch, theta)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(y))
        for lo in range(0, len(y), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            logits, caches = _forward(state, X[idx])
            batch_loss = _ce_from_logits(logits, y[idx])
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(f"loss became {batch_loss}")
            g = _backward(state, caches, _dlogits(logits, y[idx]) / len(idx), per_sample=False)
            velocity = cfg.momentum * velocity - cfg.learning_rate * g
            theta += velocity
    return state


def _ce_from_logits(logits: np.ndarray, y: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean())


# ---------------------------------------------------------------------------
# Checkpoints: one JSON header line, then little-endian float64 parameters
# ---------------------------------------------------------------------------

def save_model(model: ModelState, path: str | Path) -> None:
    header = {"format": "unlearnwf-model", "version": 1,
              "arch": model.arch.to_dict(), "param_count": model.param_count}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(model.theta.astype("<f8").tobytes())


def load_model(path: str | Path) -> ModelState:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != "unlearnwf-model":
        raise ValueError(f"{path}: not a model checkpoint")
    arch = Architecture.from_dict(header["arch"])
    theta = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if theta.shape != (header["param_count"],):
        raise ValueError(f"{path}: parameter payload truncated")
    return ModelState(arch, theta)
