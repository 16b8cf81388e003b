"""Feed-forward feature extractor with hand-written backprop, and a growable head.

Shapes follow the row-vector convention: a batch is ``(B, d)``, a layer
weight is ``(d_in, d_out)`` and the head ``W`` is ``(n, m)`` so that
``logits = features @ W``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import read_matrix, write_matrix


class ShapeError(ValueError):
    pass


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class FeatureExtractor:
    """MLP ``x -> f(x)``: ReLU on hidden layers, configurable on the last one."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    feature_activation: str = "linear"

    @classmethod
    def init(cls, input_dim: int, hidden: tuple[int, ...] = (128, 64),
             feature_dim: int = 64, rng: np.random.Generator | None = None,
             feature_activation: str = "linear") -> "FeatureExtractor":
        rng = rng if rng is not None else np.random.default_rng(0)
        dims = [input_dim, *hidden, feature_dim]
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            # He initialisation for the ReLU stack
            weights.append(rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in))
            biases.append(np.zeros(d_out))
        return cls(weights, biases, feature_activation)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [w.shape[1] for w in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.weights)):
            names += [f"layer{i}.weight", f"layer{i}.bias"]
        return names

    def copy(self) -> "FeatureExtractor":
        return FeatureExtractor([w.copy() for w in self.weights],
                                [b.copy() for b in self.biases],
                                self.feature_activation)

    def _act(self, i: int) -> bool:
        last = i == len(self.weights) - 1
        return not last or self.feature_activation == "relu"

    def features(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ShapeError(f"expected input (B, {self.input_dim}), got {h.shape}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if self._act(i):
                h = relu(h)
        return h


class ModelSnapshot:
    """Read-only copy of extractor parameters (the previous-task backbone)."""

    def __init__(self, extractor: FeatureExtractor):
        self._extractor = extractor.copy()
        for p in self._extractor.params():
            p.setflags(write=False)

    @property
    def extractor(self) -> FeatureExtractor:
        return self._extractor

    def features(self, x: np.ndarray) -> np.ndarray:
        return self._extractor.features(x)

    def params(self) -> list[np.ndarray]:
        return self._extractor.params()


@dataclass
class ClassifierHead:
    """Linear head ``W`` of shape (n, m) with one column range per task."""

    weights: np.ndarray
    ranges: list[tuple[int, int]] = field(default_factory=list)

    @classmethod
    def empty(cls, feature_dim: int) -> "ClassifierHead":
        return cls(np.zeros((feature_dim, 0)), [])

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.weights.copy(), list(self.ranges))

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights


def expand_head(head: ClassifierHead, new_class_count: int,
                rng: np.random.Generator) -> ClassifierHead:
    """Append ``new_class_count`` columns initialised U(-1/sqrt(n), 1/sqrt(n))."""
    if new_class_count < 1:
        raise ValueError("new_class_count must be >= 1")
    n, m = head.weights.shape
    bound = 1.0 / np.sqrt(n)
    new_cols = rng.uniform(-bound, bound, size=(n, new_class_count))
    weights = np.concatenate([head.weights, new_cols], axis=1)
    return ClassifierHead(weights, [*head.ranges, (m, m + new_class_count)])


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each affine layer
    preacts: list[np.ndarray]
    features: np.ndarray
    logits: np.ndarray | None


def forward(extractor: FeatureExtractor, head: ClassifierHead | None,
            batch: np.ndarray) -> ForwardCache:
    h = np.asarray(batch, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != extractor.input_dim:
        raise ShapeError(f"expected input (B, {extractor.input_dim}), got {h.shape}")
    inputs, preacts = [], []
    for i, (w, b) in enumerate(zip(extractor.weights, extractor.biases)):
        inputs.append(h)
        z = h @ w + b
        preacts.append(z)
        h = relu(z) if extractor._act(i) else z
    logits = None
    if head is not None:
        if head.feature_dim != h.shape[1]:
            raise ShapeError(f"head expects {head.feature_dim} features, got {h.shape[1]}")
        logits = h @ head.weights
    return ForwardCache(inputs, preacts, h, logits)


def backward(extractor: FeatureExtractor, cache: ForwardCache,
             dfeatures: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients given dL/dfeatures; same order as ``params()``."""
    if len(cache.inputs) != len(extractor.weights):
        raise ShapeError("cache was produced by a different extractor")
    if dfeatures.shape != cache.features.shape:
        raise ShapeError(f"dfeatures {dfeatures.shape} != features {cache.features.shape}")
    grads: list[np.ndarray] = [None] * (2 * len(extractor.weights))  # type: ignore[list-item]
    g = dfeatures
    for i in reversed(range(len(extractor.weights))):
        if extractor._act(i):
            g = g * (cache.preacts[i] > 0.0)
        grads[2 * i] = cache.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i:
            g = g @ extractor.weights[i].T
    return grads


def layer_deltas(extractor: FeatureExtractor, cache: ForwardCache,
                 dfeatures: np.ndarray) -> list[np.ndarray]:
    """Per-sample dL/dpreact for each layer (used for per-sample gradient squares)."""
    deltas: list[np.ndarray] = [None] * len(extractor.weights)  # type: ignore[list-item]
    g = dfeatures
    for i in reversed(range(len(extractor.weights))):
        if extractor._act(i):
            g = g * (cache.preacts[i] > 0.0)
        deltas[i] = g
        if i:
            g = g @ extractor.weights[i].T
    return deltas


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                          active: tuple[int, int] | None = None
                          ) -> tuple[float, np.ndarray]:
    """Mean CE over the batch restricted to columns ``[start, stop)``.

    Labels are global column indices. Gradient columns outside the active
    range are zero.
    """
    labels = np.asarray(labels, dtype=np.intp)
    b, m = logits.shape
    start, stop = active if active is not None else (0, m)
    if not (0 <= start < stop <= m):
        raise ValueError(f"bad active range {(start, stop)} for {m} columns")
    if labels.shape != (b,):
        raise ShapeError(f"labels {labels.shape} do not match batch {b}")
    if np.any((labels < start) | (labels >= stop)):
        raise ValueError("label outside active columns")
    sub = logits[:, start:stop]
    logp = log_softmax(sub)
    local = labels - start
    loss = -float(np.mean(logp[np.arange(b), local]))
    d = np.exp(logp)
    d[np.arange(b), local] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[:, start:stop] = d / b
    return loss, dlogits


class Adam:
    """Adam over a fixed list of arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, params: list[np.ndarray], lr: float = 1e-3,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr, self.weight_decay = lr, weight_decay

    def step(self, grads: list[np.ndarray]) -> None:
        for p, g in zip(self.params, grads):
            if self.weight_decay:
                g = g + self.weight_decay * p
            p -= self.lr * g


def make_optimizer(kind: str, params: list[np.ndarray], lr: float,
                   weight_decay: float = 0.0):
    if kind == "adam":
        return Adam(params, lr=lr, weight_decay=weight_decay)
    if kind == "sgd":
        return SGD(params, lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


def save_checkpoint(directory, extractor: FeatureExtractor, head: ClassifierHead) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, p in zip(extractor.param_names(), extractor.params()):
        fname = f"{name}.efmm"
        write_matrix(directory / fname, p if p.ndim == 2 else p[None, :])
        tensors[name] = fname
    write_matrix(directory / "head.efmm", head.weights)
    header = {
        "dims": extractor.dims,
        "feature_activation": extractor.feature_activation,
        "num_classes": head.num_classes,
        "task_ranges": [list(r) for r in head.ranges],
        "tensors": tensors,
        "head": "head.efmm",
    }
    (directory / "checkpoint.json").write_text(json.dumps(header, indent=2))


def load_checkpoint(directory) -> tuple[FeatureExtractor, ClassifierHead]:
    directory = Path(directory)
    header = json.loads((directory / "checkpoint.json").read_text())
    weights, biases = [], []
    for i in range(len(header["dims"]) - 1):
        weights.append(read_matrix(directory / header["tensors"][f"layer{i}.weight"]))
        biases.append(read_matrix(directory / header["tensors"][f"layer{i}.bias"])[0])
    extractor = FeatureExtractor(weights, biases, header["feature_activation"])
    head = ClassifierHead(read_matrix(directory / header["head"]),
                          [tuple(r) for r in header["task_ranges"]])
    return extractor, head
