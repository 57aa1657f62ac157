"""Small layered classifier with manual backprop and per-example gradients.

Layers are indexed from 1, matching the layer-subset notation used for
selection. A layer is the unit of freezing: dense weight and bias form one
layer, activations carry no parameters, and an attached low-rank adapter
replaces its host dense layer as the trainable unit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

DENSE = "dense"
ACTIVATION = "activation"
ADAPTER = "low-rank-adapter"

CHECKPOINT_VERSION = 1

LayerGradMap = dict[int, np.ndarray]


class ShapeError(ValueError):
    """Raised on inconsistent layer widths or parameter lengths."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    rank: Optional[int] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind not in (DENSE, ACTIVATION, ADAPTER):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ShapeError("layer widths must be positive")
        if self.kind == ACTIVATION and self.in_dim != self.out_dim:
            raise ShapeError("activation layers keep their width")
        if self.kind == ADAPTER:
            if self.rank is None or not 1 <= self.rank <= min(self.in_dim, self.out_dim):
                raise ShapeError(f"adapter rank must be in [1, {min(self.in_dim, self.out_dim)}]")


def dense(in_dim: int, out_dim: int, seed: Optional[int] = None) -> LayerSpec:
    return LayerSpec(DENSE, in_dim, out_dim, seed=seed)


def tanh(width: int) -> LayerSpec:
    return LayerSpec(ACTIVATION, width, width)


@dataclass
class Dataset:
    """Features ``X`` (n, p) and integer labels ``y`` (n,)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ShapeError("dataset needs X of shape (n, p) and y of shape (n,)")

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx])


class LayeredModel:
    """Ordered layers, each owning a flat trainable parameter vector.

    ``params[i]`` holds the trainable vector of layer ``i + 1``; for a dense
    layer it is ``[W.ravel(), b]`` with ``W`` of shape (out, in), for an
    adapter it is ``[A.ravel(), B.ravel()]`` and the frozen host ``[W, b]``
    lives in ``base[i]``.
    """

    def __init__(self, specs: list[LayerSpec], params: list[np.ndarray], base: list[Optional[np.ndarray]]):
        self.specs = list(specs)
        self.params = params
        self.base = base

    @property
    def n_layers(self) -> int:
        return len(self.specs)

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim

    def spec(self, layer: int) -> LayerSpec:
        return self.specs[layer - 1]

    def layer_size(self, layer: int) -> int:
        return self.params[layer - 1].size

    def layer_sizes(self) -> list[int]:
        return [p.size for p in self.params]

    @property
    def n_params(self) -> int:
        return sum(self.layer_sizes())

    def parameterized_layers(self) -> list[int]:
        return [i + 1 for i, p in enumerate(self.params) if p.size > 0]

    def dim(self, layers: Iterable[int]) -> int:
        return sum(self.layer_size(l) for l in layers)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.params) if self.params else np.zeros(0)

    def copy(self) -> "LayeredModel":
        return LayeredModel(
            self.specs,
            [p.copy() for p in self.params],
            [None if b is None else b.copy() for b in self.base],
        )

    def state_bytes(self) -> bytes:
        """Exact byte image of all parameters, for bitwise comparisons."""
        chunks = [p.tobytes() for p in self.params]
        chunks += [b.tobytes() for b in self.base if b is not None]
        return b"".join(chunks)

    def check_layers(self, layers: Iterable[int]) -> list[int]:
        out = sorted(set(int(l) for l in layers))
        for l in out:
            if not 1 <= l <= self.n_layers:
                raise ValueError(f"layer index {l} outside 1..{self.n_layers}")
        return out

    def _dense_weights(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        s = self.specs[i]
        flat = self.base[i] if s.kind == ADAPTER else self.params[i]
        nw = s.out_dim * s.in_dim
        return flat[:nw].reshape(s.out_dim, s.in_dim), flat[nw:]

    def _adapter_weights(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        s = self.specs[i]
        na = s.rank * s.in_dim
        theta = self.params[i]
        return theta[:na].reshape(s.rank, s.in_dim), theta[na:].reshape(s.out_dim, s.rank)


def _uniform(rng: np.random.Generator, fan_in: int, size: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=size)


def _init_layer(spec: LayerSpec, rng: np.random.Generator) -> tuple[np.ndarray, Optional[np.ndarray]]:
    if spec.kind == ACTIVATION:
        return np.zeros(0), None
    host = _uniform(rng, spec.in_dim, spec.out_dim * spec.in_dim + spec.out_dim)
    if spec.kind == DENSE:
        return host, None
    a = _uniform(rng, spec.in_dim, spec.rank * spec.in_dim)
    b = np.zeros(spec.out_dim * spec.rank)
    return np.concatenate([a, b]), host


def build_model(specs: list[LayerSpec], seed: int) -> LayeredModel:
    """Build a model with deterministic initialization.

    Each layer draws from its own stream: ``spec.seed`` when set, otherwise
    one derived from ``(seed, layer index)``.
    """
    specs = list(specs)
    if not specs:
        raise ShapeError("model needs at least one layer")
    for i in range(1, len(specs)):
        if specs[i - 1].out_dim != specs[i].in_dim:
            raise ShapeError(
                f"layer {i} outputs {specs[i - 1].out_dim} but layer {i + 1} expects {specs[i].in_dim}"
            )
    params, base = [], []
    for i, spec in enumerate(specs, start=1):
        rng = np.random.default_rng(spec.seed if spec.seed is not None else [seed, i])
        theta, host = _init_layer(spec, rng)
        params.append(theta)
        base.append(host)
    return LayeredModel(specs, params, base)


def attach_adapter(model: LayeredModel, layer: int, rank: int, seed: int = 0) -> LayeredModel:
    """Return a copy whose ``layer`` computes ``W x + B A x + b`` with ``B = 0``."""
    spec = model.spec(layer)
    if spec.kind != DENSE:
        raise ValueError(f"layer {layer} is {spec.kind}, adapters attach to dense layers only")
    new_spec = LayerSpec(ADAPTER, spec.in_dim, spec.out_dim, rank=rank, seed=spec.seed)
    out = model.copy()
    rng = np.random.default_rng([seed, layer, rank])
    a = _uniform(rng, spec.in_dim, rank * spec.in_dim)
    out.specs = list(out.specs)
    out.specs[layer - 1] = new_spec
    out.base[layer - 1] = out.params[layer - 1]
    out.params[layer - 1] = np.concatenate([a, np.zeros(spec.out_dim * rank)])
    return out


def _forward_trace(model: LayeredModel, X: np.ndarray) -> list[np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.in_dim:
        raise ShapeError(f"expected {model.in_dim} features, got {X.shape[1]}")
    acts = [X]
    h = X
    for i, spec in enumerate(model.specs):
        if spec.kind == ACTIVATION:
            h = np.tanh(h)
        else:
            W, b = model._dense_weights(i)
            z = h @ W.T
            if spec.kind == ADAPTER:
                A, B = model._adapter_weights(i)
                z = z + (h @ A.T) @ B.T
            h = z + b
        acts.append(h)
    return acts


def forward(model: LayeredModel, features: np.ndarray) -> np.ndarray:
    """Logits for one example (1-D input) or a batch (2-D input)."""
    features = np.asarray(features, dtype=np.float64)
    out = _forward_trace(model, features)[-1]
    return out[0] if features.ndim == 1 else out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shift = logits - logits.max(axis=-1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=-1, keepdims=True))


def loss(logits: np.ndarray, label: int) -> float:
    """Cross-entropy ``-log softmax(logits)[label]``."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} outside 0..{logits.shape[-1] - 1}")
    return float(-log_softmax(logits)[label])


def batch_loss(model: LayeredModel, data: Dataset) -> float:
    """Mean cross-entropy over a dataset."""
    lp = log_softmax(forward(model, data.X))
    return float(-lp[np.arange(len(data)), data.y].mean())


def predict(model: LayeredModel, X: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the smaller class
    return np.argmax(forward(model, np.atleast_2d(X)), axis=1)


def accuracy(model: LayeredModel, data: Dataset) -> float:
    if len(data) == 0:
        raise ValueError("cannot score an empty split")
    return float(np.mean(predict(model, data.X) == data.y))


def per_example_grads(model: LayeredModel, X: np.ndarray, y: np.ndarray, trainable: Iterable[int]) -> LayerGradMap:
    """Per-example gradients, shape (n, d_layer) per trainable layer.

    Backprop is vectorized over the batch; every row is the gradient of one
    example's loss and never mixes examples.
    """
    layers = model.check_layers(trainable)
    if not layers:
        raise ValueError("trainable layer set is empty")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    acts = _forward_trace(model, X)
    n = X.shape[0]
    logits = acts[-1]
    if np.any(y < 0) or np.any(y >= logits.shape[1]):
        raise ValueError("label outside model output range")
    delta = np.exp(log_softmax(logits))
    delta[np.arange(n), y] -= 1.0

    wanted = set(layers)
    lowest = min(layers)
    grads: LayerGradMap = {}
    for idx in range(model.n_layers, lowest - 1, -1):
        i = idx - 1
        spec = model.specs[i]
        a_in = acts[i]
        if spec.kind == ACTIVATION:
            if idx in wanted:
                grads[idx] = np.zeros((n, 0))
            delta = delta * (1.0 - acts[idx] ** 2)
            continue
        W, _ = model._dense_weights(i)
        if spec.kind == DENSE:
            if idx in wanted:
                gw = (delta[:, :, None] * a_in[:, None, :]).reshape(n, -1)
                grads[idx] = np.concatenate([gw, delta], axis=1)
            if idx > lowest:
                delta = delta @ W
        else:
            A, B = model._adapter_weights(i)
            h = a_in @ A.T
            dh = delta @ B
            if idx in wanted:
                ga = (dh[:, :, None] * a_in[:, None, :]).reshape(n, -1)
                gb = (delta[:, :, None] * h[:, None, :]).reshape(n, -1)
                grads[idx] = np.concatenate([ga, gb], axis=1)
            if idx > lowest:
                delta = delta @ W + dh @ A
    return {l: grads[l] for l in layers}


def per_example_grad(model: LayeredModel, example: tuple[np.ndarray, int], trainable: Iterable[int]) -> LayerGradMap:
    """Gradient of one example's loss, restricted to ``trainable`` layers."""
    x, label = example
    g = per_example_grads(model, np.asarray(x)[None, :], np.array([label]), trainable)
    return {l: v[0] for l, v in g.items()}


def mean_grad(model: LayeredModel, data: Dataset, trainable: Iterable[int]) -> LayerGradMap:
    """Gradient of the mean loss over ``data``."""
    g = per_example_grads(model, data.X, data.y, trainable)
    return {l: v.mean(axis=0) for l, v in g.items()}


def apply_update(model: LayeredModel, delta: LayerGradMap, scale: float) -> None:
    """In place: ``theta_l += scale * delta_l`` for each key of ``delta``."""
    for l, d in delta.items():
        if not 1 <= l <= model.n_layers:
            raise ValueError(f"layer index {l} outside 1..{model.n_layers}")
        if d.shape != model.params[l - 1].shape:
            raise ShapeError(f"layer {l}: update length {d.size} != {model.params[l - 1].size}")
    if scale == 0:
        return
    for l, d in delta.items():
        model.params[l - 1] += scale * d


def grad_norm(grad: LayerGradMap) -> float:
    return float(np.sqrt(sum(float(np.dot(v, v)) for v in grad.values())))


def save_checkpoint(model: LayeredModel, path) -> None:
    """Write an ``.npz`` container: JSON header plus little-endian float64 arrays."""
    header = {
        "version": CHECKPOINT_VERSION,
        "specs": [asdict(s) for s in model.specs],
    }
    arrays = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for i, (p, b) in enumerate(zip(model.params, model.base), start=1):
        arrays[f"params_{i}"] = p.astype("<f8")
        if b is not None:
            arrays[f"base_{i}"] = b.astype("<f8")
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> LayeredModel:
    with np.load(Path(path)) as npz:
        header = json.loads(npz["header"].tobytes().decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        specs = [LayerSpec(**s) for s in header["specs"]]
        params = [npz[f"params_{i}"].astype(np.float64) for i in range(1, len(specs) + 1)]
        base = [
            npz[f"base_{i}"].astype(np.float64) if f"base_{i}" in npz.files else None
            for i in range(1, len(specs) + 1)
        ]
    return LayeredModel(specs, params, base)
