"""Layer selection by perturbation-aware temporary training on synthetic data."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .nn import Dataset, LayerGradMap, LayeredModel, accuracy, apply_update, batch_loss, mean_grad
from .optim import clip

PERTURBATIONS = ("worst-case", "worst-case-pga", "random", "none")


@dataclass(frozen=True)
class LayerSubset:
    layers: tuple[int, ...]
    dim: int

    @classmethod
    def of(cls, model: LayeredModel, layers) -> "LayerSubset":
        layers = tuple(model.check_layers(layers))
        if not layers:
            raise ValueError("layer subset is empty")
        return cls(layers, model.dim(layers))

    @property
    def name(self) -> str:
        return "+".join(str(l) for l in self.layers)


@dataclass
class SelectionConfig:
    steps: int = 20
    lr: float = 0.5
    clip: float = 1.0
    perturbation: str = "worst-case"
    pga_steps: int = 5
    radius: str = "matched"  # or "explicit"
    rho: float = 0.0
    rho_scale: float = 1.0  # multiplies the matched radius
    noise_multiplier: float = 1.0  # downstream sigma, used by the matched radius
    batch_size: int = 64  # downstream batch size, used by the matched radius
    top_k: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.perturbation not in PERTURBATIONS:
            raise ValueError(f"perturbation must be one of {PERTURBATIONS}")
        if self.radius not in ("matched", "explicit"):
            raise ValueError("radius must be 'matched' or 'explicit'")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.rho_scale < 0 or self.rho < 0:
            raise ValueError("radius must be nonnegative")

    def rho_for(self, dim: int) -> float:
        if self.radius == "explicit":
            return self.rho
        return self.rho_scale * effective_rho(self.noise_multiplier, self.clip, dim, self.batch_size)


@dataclass
class SelectionReport:
    candidates: list[LayerSubset]
    perf: list[float]
    rho: list[float]
    ranking: list[int]  # positions into candidates, best first
    chosen: tuple[int, ...]
    config: dict
    seeds: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [
            {"layers": c.name, "d": c.dim, "rho": r, "perf": p, "rank": self.ranking.index(i) + 1}
            for i, (c, p, r) in enumerate(zip(self.candidates, self.perf, self.rho))
        ]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["layers", "d", "rho", "perf", "rank"])
            w.writeheader()
            w.writerows(self.rows())

    def summary(self) -> dict:
        return {"chosen": list(self.chosen), "config": self.config, "seeds": self.seeds, "candidates": self.rows()}

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def candidate_family(model: LayeredModel, mode: str = "per_layer", explicit: Optional[Sequence[Sequence[int]]] = None) -> list[LayerSubset]:
    """Singletons over parameterized layers, or a validated explicit family."""
    if mode == "per_layer":
        fam = [LayerSubset.of(model, [l]) for l in model.parameterized_layers()]
    elif mode == "explicit":
        fam = [LayerSubset.of(model, s) for s in (explicit or [])]
    else:
        raise ValueError(f"unknown family mode {mode!r}")
    if not fam:
        raise ValueError("candidate family is empty")
    return fam


def effective_rho(sigma: float, C: float, dim: int, batch_size: int) -> float:
    """Expected norm scale of the per-update DP noise: ``sigma C sqrt(d) / |B|``."""
    return sigma * C * math.sqrt(dim) / batch_size


def _unit(v: np.ndarray) -> Optional[np.ndarray]:
    n = float(np.linalg.norm(v))
    return None if n == 0 else v / n


def first_order_xi(grad_at: Callable[[np.ndarray], np.ndarray], theta: np.ndarray, g: np.ndarray, eta: float, rho: float) -> np.ndarray:
    """Linearized maximizer of ``L(theta - eta (g + xi))`` over ``||xi|| <= rho``.

    ``grad_at(point)`` returns the loss gradient at a flat parameter point.
    """
    if rho == 0:
        return np.zeros_like(theta)
    u = _unit(grad_at(theta - eta * g))
    return np.zeros_like(theta) if u is None else -rho * u


def pga_xi(
    loss_at: Callable[[np.ndarray], float],
    grad_at: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    g: np.ndarray,
    eta: float,
    rho: float,
    steps: int = 5,
) -> np.ndarray:
    """First-order start refined by normalized projected ascent; best iterate kept."""
    xi = first_order_xi(grad_at, theta, g, eta, rho)
    if rho == 0 or not np.any(xi):
        return xi
    best, best_val = xi, loss_at(theta - eta * (g + xi))
    step = 0.5 * rho
    for _ in range(steps):
        d = _unit(-eta * grad_at(theta - eta * (g + xi)))
        if d is None:
            break
        xi = xi + step * d
        xi = xi * (rho / max(rho, float(np.linalg.norm(xi))))
        val = loss_at(theta - eta * (g + xi))
        if val > best_val:
            best, best_val = xi, val
        step *= 0.5
    return best


def _flat(grad: LayerGradMap, layers: Sequence[int]) -> np.ndarray:
    return np.concatenate([grad[l] for l in layers])


def _unflat(vec: np.ndarray, model: LayeredModel, layers: Sequence[int]) -> LayerGradMap:
    out, pos = {}, 0
    for l in layers:
        n = model.layer_size(l)
        out[l] = vec[pos : pos + n]
        pos += n
    return out


class _SubsetObjective:
    """Synthetic training loss viewed as a function of the flat trainable vector."""

    def __init__(self, model: LayeredModel, layers: Sequence[int], data: Dataset):
        self.model = model.copy()
        self.layers = list(layers)
        self.data = data
        self.theta0 = _flat({l: model.params[l - 1] for l in self.layers}, self.layers)

    def _load(self, point: np.ndarray) -> None:
        for l, v in _unflat(point, self.model, self.layers).items():
            self.model.params[l - 1][...] = v

    def grad(self, point: np.ndarray) -> np.ndarray:
        self._load(point)
        return _flat(mean_grad(self.model, self.data, self.layers), self.layers)

    def loss(self, point: np.ndarray) -> float:
        self._load(point)
        return batch_loss(self.model, self.data)


def worst_case_perturbation(
    model: LayeredModel,
    layers: Sequence[int],
    g: LayerGradMap,
    rho: float,
    eta: float,
    train: Dataset,
    mode: str = "worst-case",
    pga_steps: int = 5,
) -> LayerGradMap:
    """Norm-``rho`` perturbation of the update that most increases the training loss."""
    layers = model.check_layers(layers)
    if rho < 0:
        raise ValueError("rho must be nonnegative")
    obj = _SubsetObjective(model, layers, train)
    gv = _flat(g, layers)
    if mode == "worst-case":
        xi = first_order_xi(obj.grad, obj.theta0, gv, eta, rho)
    elif mode == "worst-case-pga":
        xi = pga_xi(obj.loss, obj.grad, obj.theta0, gv, eta, rho, pga_steps)
    else:
        raise ValueError(f"not a worst-case mode: {mode!r}")
    return _unflat(xi, model, layers)


def random_perturbation(model: LayeredModel, layers: Sequence[int], rho: float, rng: np.random.Generator) -> LayerGradMap:
    """Uniform direction on the radius-``rho`` sphere."""
    d = model.dim(layers)
    u = rng.standard_normal(d)
    u *= rho / max(float(np.linalg.norm(u)), 1e-300)
    return _unflat(u, model, layers)


def perturbation_for(
    model: LayeredModel,
    layers: Sequence[int],
    g: LayerGradMap,
    rho: float,
    cfg: SelectionConfig,
    train: Dataset,
    rng: np.random.Generator,
) -> Optional[LayerGradMap]:
    if cfg.perturbation == "none" or rho == 0:
        return None
    if cfg.perturbation == "random":
        return random_perturbation(model, layers, rho, rng)
    return worst_case_perturbation(model, layers, g, rho, cfg.lr, train, cfg.perturbation, cfg.pga_steps)


def temp_train(
    base: LayeredModel,
    subset: LayerSubset,
    train: Dataset,
    cfg: SelectionConfig,
    rng: np.random.Generator,
) -> LayeredModel:
    """Perturbation-aware full-batch descent on a copy, touching only ``subset``.

    Every step uses the clipped mean gradient ``g`` over the whole split and
    a perturbation ``xi`` recomputed at the current point:
    ``theta <- theta - lr (g + xi)``.
    """
    if len(train) == 0:
        raise ValueError("synthetic training split is empty")
    model = base.copy()
    layers = list(subset.layers)
    rho = cfg.rho_for(subset.dim)
    for _ in range(cfg.steps):
        g = clip(mean_grad(model, train, layers), cfg.clip)
        xi = perturbation_for(model, layers, g, rho, cfg, train, rng)
        step = g if xi is None else {l: g[l] + xi[l] for l in layers}
        apply_update(model, step, -cfg.lr)
    return model


def score(model: LayeredModel, val: Dataset) -> float:
    """Validation accuracy; argmax ties go to the smaller class."""
    return accuracy(model, val)


def select(
    model: LayeredModel,
    family: Sequence[LayerSubset],
    train: Dataset,
    val: Dataset,
    cfg: SelectionConfig,
    per_layer: bool = True,
) -> SelectionReport:
    """Score every candidate on its own copy and pick the winner(s).

    In per-layer mode the chosen set is the union of the ``top_k`` best
    singletons; otherwise the single best subset. Ties favour the candidate
    with smaller layer indices. Candidate ``c`` draws randomness from a
    stream keyed by ``(cfg.seed, *c.layers)``.
    """
    if not family:
        raise ValueError("candidate family is empty")
    if per_layer and cfg.top_k > len(family):
        raise ValueError(f"top_k={cfg.top_k} exceeds family size {len(family)}")
    perf, rhos = [], []
    for cand in family:
        rng = np.random.default_rng([cfg.seed, *cand.layers])
        trained = temp_train(model, cand, train, cfg, rng)
        perf.append(score(trained, val))
        rhos.append(cfg.rho_for(cand.dim))
    ranking = sorted(range(len(family)), key=lambda i: (-perf[i], family[i].layers))
    if per_layer:
        chosen = tuple(sorted(set(l for i in ranking[: cfg.top_k] for l in family[i].layers)))
    else:
        chosen = family[ranking[0]].layers
    return SelectionReport(
        candidates=list(family),
        perf=perf,
        rho=rhos,
        ranking=ranking,
        chosen=chosen,
        config=asdict(cfg),
        seeds={"base_seed": cfg.seed},
    )
