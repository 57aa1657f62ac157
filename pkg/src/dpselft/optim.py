"""Per-example clipping, noisy aggregation, and DP-SGD / DP-AdamW steps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .nn import Dataset, LayerGradMap, LayeredModel, apply_update, grad_norm, per_example_grads

NO_CLIP = math.inf


@dataclass
class DpTrainConfig:
    clip: float = 1.0
    noise_multiplier: float = 1.0
    lr: float = 1e-2
    batch_size: int = 64
    steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.clip > 0:
            raise ValueError("clip norm must be positive (use math.inf to disable)")
        if self.noise_multiplier < 0:
            raise ValueError("noise multiplier must be nonnegative")
        if math.isinf(self.clip) and self.noise_multiplier > 0:
            raise ValueError("noise needs a finite clip norm")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


@dataclass
class AdamState:
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_layers(cls, model: LayeredModel, layers: Iterable[int]) -> "AdamState":
        layers = model.check_layers(layers)
        return cls(
            {l: np.zeros(model.layer_size(l)) for l in layers},
            {l: np.zeros(model.layer_size(l)) for l in layers},
        )


def clip(grad: LayerGradMap, C: float) -> LayerGradMap:
    """Scale ``grad`` so its joint L2 norm is at most ``C``."""
    if not C > 0:
        raise ValueError("clip norm must be positive")
    factor = max(1.0, grad_norm(grad) / C)
    return {l: v / factor for l, v in grad.items()}


def clipped_sum(per_example: Sequence[LayerGradMap], C: float) -> LayerGradMap:
    """Sum of clipped gradients, accumulated in batch order."""
    if not per_example:
        raise ValueError("empty batch")
    keys = sorted(per_example[0])
    total = {l: np.zeros_like(per_example[0][l]) for l in keys}
    for g in per_example:
        if sorted(g) != keys:
            raise ValueError("per-example maps disagree on layers")
        c = clip(g, C)
        for l in keys:
            if c[l].shape != total[l].shape:
                raise ValueError(f"layer {l}: inconsistent gradient shapes")
            total[l] += c[l]
    return total


def add_noise(total: LayerGradMap, C: float, sigma: float, rng: np.random.Generator, denom: float) -> LayerGradMap:
    out = {}
    for l in sorted(total):
        v = total[l]
        if sigma > 0:
            v = v + rng.standard_normal(v.shape) * (sigma * C)
        out[l] = v / denom
    return out


def noisy_aggregate(
    per_example: Sequence[LayerGradMap],
    C: float,
    sigma: float,
    rng: np.random.Generator,
    denom: Optional[float] = None,
) -> LayerGradMap:
    """``(sum_i clip(g_i, C) + N(0, sigma^2 C^2 I)) / denom``.

    ``denom`` defaults to the batch length; Poisson-sampled training passes
    the expected batch size instead.
    """
    if sigma > 0 and math.isinf(C):
        raise ValueError("noise needs a finite clip norm")
    total = clipped_sum(per_example, C)
    return add_noise(total, C, sigma, rng, float(len(per_example) if denom is None else denom))


def _split_rows(grads: LayerGradMap, n: int) -> list[LayerGradMap]:
    return [{l: v[i] for l, v in grads.items()} for i in range(n)]


def private_gradient(
    model: LayeredModel,
    batch: Dataset,
    layers: Sequence[int],
    cfg: DpTrainConfig,
    rng: np.random.Generator,
) -> LayerGradMap:
    """Noisy clipped mean gradient for one batch, normalized by ``cfg.batch_size``."""
    layers = model.check_layers(layers)
    if not layers:
        raise ValueError("trainable layer set is empty")
    if len(batch) == 0:
        total = {l: np.zeros(model.layer_size(l)) for l in layers}
    else:
        pe = per_example_grads(model, batch.X, batch.y, layers)
        total = clipped_sum(_split_rows(pe, len(batch)), cfg.clip)
    return add_noise(total, cfg.clip, cfg.noise_multiplier, rng, float(cfg.batch_size))


def dp_sgd_step(
    model: LayeredModel,
    batch: Dataset,
    layers: Sequence[int],
    cfg: DpTrainConfig,
    rng: np.random.Generator,
) -> LayerGradMap:
    g = private_gradient(model, batch, layers, cfg, rng)
    apply_update(model, g, -cfg.lr)
    return g


def adamw_update(model: LayeredModel, g: LayerGradMap, cfg: DpTrainConfig, state: AdamState) -> None:
    """One AdamW step with bias correction and decoupled weight decay."""
    if sorted(state.m) != sorted(g):
        raise ValueError(f"optimizer state covers layers {sorted(state.m)}, gradient covers {sorted(g)}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for l in sorted(g):
        if state.m[l].shape != g[l].shape:
            raise ValueError(f"layer {l}: optimizer state shape mismatch")
        state.m[l] = b1 * state.m[l] + (1.0 - b1) * g[l]
        state.v[l] = b2 * state.v[l] + (1.0 - b2) * g[l] ** 2
        m_hat = state.m[l] / c1
        v_hat = state.v[l] / c2
        theta = model.params[l - 1]
        theta -= cfg.lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * theta)


def dp_adamw_step(
    model: LayeredModel,
    batch: Dataset,
    layers: Sequence[int],
    cfg: DpTrainConfig,
    state: AdamState,
    rng: np.random.Generator,
) -> LayerGradMap:
    layers = model.check_layers(layers)
    if sorted(state.m) != layers:
        raise ValueError(f"optimizer state covers layers {sorted(state.m)}, step trains {layers}")
    g = private_gradient(model, batch, layers, cfg, rng)
    adamw_update(model, g, cfg, state)
    return g


def poisson_batch(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Indices of a Poisson sample: each record kept independently with prob ``q``."""
    return np.flatnonzero(rng.random(n) < q)


def train(
    model: LayeredModel,
    data: Dataset,
    layers: Sequence[int],
    cfg: DpTrainConfig,
    rng: np.random.Generator,
    optimizer: str = "adamw",
) -> LayeredModel:
    """Run ``cfg.steps`` DP steps in place on Poisson batches of rate ``batch_size / n``."""
    layers = model.check_layers(layers)
    q = min(1.0, cfg.batch_size / len(data))
    state = AdamState.for_layers(model, layers) if optimizer == "adamw" else None
    for _ in range(cfg.steps):
        batch = data.subset(poisson_batch(len(data), q, rng))
        if state is not None:
            dp_adamw_step(model, batch, layers, cfg, state, rng)
        elif optimizer == "sgd":
            dp_sgd_step(model, batch, layers, cfg, rng)
        else:
            raise ValueError(f"unknown optimizer {optimizer!r}")
    return model
