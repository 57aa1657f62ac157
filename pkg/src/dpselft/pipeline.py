"""End-to-end runs: synthetic data, layer selection, DP fine-tuning, and baseline arms."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn
from .accountant import MechanismEvent, PrivacyLedger, calibrate_sigma, split_budget
from .nn import Dataset, LayerSpec, LayeredModel, accuracy, attach_adapter, build_model
from .optim import DpTrainConfig, NO_CLIP, train
from .select import SelectionConfig, SelectionReport, candidate_family, select
from .synth import Encoder, GeneratorConfig, SyntheticDataset, build_synthetic_dataset, generate_candidates

FT_STAGE = "finetune"

ARMS = (
    "dp-selft",
    "dp-selft+adapter",
    "full-parameter",
    "heuristic",
    "random-selection",
    "clean-selection",
    "random-noise-selection",
)
# arms that build synthetic data and therefore spend eps_syn
SYNTHETIC_ARMS = {"dp-selft", "dp-selft+adapter", "clean-selection", "random-noise-selection"}
ARM_PERTURBATION = {
    "dp-selft": None,  # from the selection config (worst-case by default)
    "dp-selft+adapter": None,
    "clean-selection": "none",
    "random-noise-selection": "random",
}


class BudgetViolation(RuntimeError):
    """Accounted epsilon exceeded the configured total."""


@dataclass
class TaskSpec:
    """Gaussian-mixture classification task.

    Class means are random directions scaled so every pair sits at least
    ``separation`` apart (in units of the per-coordinate noise ``noise``).
    """

    n_classes: int = 3
    dim: int = 16
    n_private: int = 1024
    n_test: int = 1024
    separation: float = 3.0
    noise: float = 1.0


@dataclass
class GeneratorSpec:
    """Public candidate generator: mixture around perturbed class means.

    ``mean_error`` is the generator's displacement of each class mean (in
    units of ``separation``), modelling imperfect public task knowledge.
    """

    n_seed: int = 8
    mu: int = 3
    perturb_scale: float = 0.3
    spread: float = 0.3
    mean_error: float = 0.25


@dataclass
class ExperimentConfig:
    arm: str = "dp-selft"
    seed: int = 0
    task: TaskSpec = field(default_factory=TaskSpec)
    layers: list[LayerSpec] = field(default_factory=lambda: default_architecture(16, 3))
    eps_total: float = 5.0
    delta: float = 1e-5
    eps_syn: float = 0.3
    train: DpTrainConfig = field(default_factory=lambda: DpTrainConfig(lr=0.01, steps=200))
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    k_syn: Optional[int] = None
    metric: str = "euclidean"
    encoder: str = "identity"
    joint_release: bool = True
    heuristic_layers: list[int] = field(default_factory=lambda: [3, 5])
    adapter_rank: int = 4
    nonprivate: bool = False

    def __post_init__(self):
        if self.arm not in ARMS:
            raise ValueError(f"unknown arm {self.arm!r}; choose from {ARMS}")
        if self.task.n_classes < 2:
            raise ValueError("task needs at least two classes")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        sub = {
            "task": TaskSpec,
            "train": DpTrainConfig,
            "selection": SelectionConfig,
            "generator": GeneratorSpec,
        }
        for key, typ in sub.items():
            if key in d and isinstance(d[key], dict):
                d[key] = _build(typ, d[key])
        if "layers" in d:
            d["layers"] = [s if isinstance(s, LayerSpec) else LayerSpec(**s) for s in d["layers"]]
        return _build(cls, d)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _build(typ, d: dict):
    names = {f.name for f in dataclasses.fields(typ)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {typ.__name__} keys: {sorted(unknown)}")
    return typ(**d)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def default_architecture(dim: int, n_classes: int, width: int = 16, wide: int = 128) -> list[LayerSpec]:
    """Four dense layers around two tanh activations; layer 3 is the wide one."""
    return [
        nn.dense(dim, width),
        nn.tanh(width),
        nn.dense(width, wide),
        nn.tanh(wide),
        nn.dense(wide, width),
        nn.dense(width, n_classes),
    ]


def class_means(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Class means with every pairwise gap at least ``separation * noise``.

    With ``dim >= n_classes`` the means sit on orthonormal directions, so all
    gaps are equal; otherwise random directions are rescaled until the
    closest pair is exactly at the separation.
    """
    if spec.noise <= 0:
        raise ValueError("mixture noise must be positive")
    gap = spec.separation * spec.noise
    K, dim = spec.n_classes, spec.dim
    if dim >= K:
        q, _ = np.linalg.qr(rng.standard_normal((dim, K)))
        return q.T * (gap / math.sqrt(2.0))
    means = rng.standard_normal((K, dim))
    closest = min(np.linalg.norm(means[a] - means[b]) for a in range(K) for b in range(a))
    if closest == 0:
        raise RuntimeError("could not place distinct class means")
    return means * (gap / closest)


def make_task(spec: TaskSpec, seed: int) -> tuple[Dataset, Dataset, np.ndarray]:
    """Private and held-out test sets from one mixture; also returns the class means."""
    if spec.n_classes < 2:
        raise ValueError("task needs at least two classes")
    rng = np.random.default_rng([seed, 101])
    means = class_means(spec, rng)

    def draw(n: int) -> Dataset:
        y = rng.integers(0, spec.n_classes, size=n)
        X = means[y] + rng.standard_normal((n, spec.dim)) * spec.noise
        return Dataset(X, y)

    return draw(spec.n_private), draw(spec.n_test), means


def generator_config(cfg: ExperimentConfig, means: np.ndarray, rng: np.random.Generator) -> GeneratorConfig:
    g = cfg.generator
    scale = cfg.task.separation * cfg.task.noise
    offsets = rng.standard_normal(means.shape)
    offsets *= g.mean_error * scale / np.maximum(np.linalg.norm(offsets, axis=1, keepdims=True), 1e-12)
    return GeneratorConfig(
        means=(means + offsets).tolist(),
        scales=[g.spread * cfg.task.noise] * len(means),
        n_seed=g.n_seed,
        mu=g.mu,
        perturb_scale=g.perturb_scale * cfg.task.noise,
    )


@dataclass
class RunResult:
    arm: str
    seed: int
    accuracy: float
    eps_total: float
    eps_syn: float
    eps_ft: float
    delta_total: float
    sigma: float
    k: int
    selected_layers: list[int]
    wall_ms: float
    eps_budget: float = math.nan
    ledger: dict = field(default_factory=dict)
    selection: Optional[dict] = None
    error: Optional[str] = None

    def row(self) -> dict:
        return {
            "arm": self.arm,
            "seed": self.seed,
            "eps_total": self.eps_total,
            "eps_syn": self.eps_syn,
            "eps_ft": self.eps_ft,
            "sigma": self.sigma,
            "k": self.k,
            "accuracy": self.accuracy,
            "selected_layers": "+".join(str(l) for l in self.selected_layers),
            "wall_ms": round(self.wall_ms, 3),
        }


RESULT_COLUMNS = ["arm", "seed", "eps_total", "eps_syn", "eps_ft", "sigma", "k", "accuracy", "selected_layers", "wall_ms"]


def base_model(cfg: ExperimentConfig) -> LayeredModel:
    return build_model(cfg.layers, cfg.seed)


def finetune_sigma(cfg: ExperimentConfig, eps_ft: float, delta_ft: float, n: int) -> float:
    if cfg.nonprivate:
        return 0.0
    q = min(1.0, cfg.train.batch_size / n)
    return calibrate_sigma(eps_ft, delta_ft, q, cfg.train.steps)


def synthetic_stage(
    cfg: ExperimentConfig,
    private: Dataset,
    means: np.ndarray,
    eps_syn: float,
    delta_syn: float,
    ledger: PrivacyLedger,
) -> SyntheticDataset:
    rng = np.random.default_rng([cfg.seed, 202])
    pool = generate_candidates(generator_config(cfg, means, rng), rng)
    k_syn = cfg.k_syn if cfg.k_syn is not None else min(len(pool), len(private))
    encoder = Encoder(cfg.encoder, seed=cfg.seed, out_dim=None if cfg.encoder == "identity" else cfg.task.dim)
    return build_synthetic_dataset(
        private,
        pool,
        encoder,
        math.inf if cfg.nonprivate else eps_syn,
        delta_syn,
        k_syn,
        split_seed=cfg.seed,
        rng=rng,
        ledger=ledger,
        metric=cfg.metric,
        joint=cfg.joint_release,
        n_classes=cfg.task.n_classes,
    )


def selection_stage(cfg: ExperimentConfig, model: LayeredModel, syn: SyntheticDataset, sigma: float) -> SelectionReport:
    perturb = ARM_PERTURBATION.get(cfg.arm) or cfg.selection.perturbation
    scfg = dataclasses.replace(
        cfg.selection,
        perturbation=perturb,
        noise_multiplier=sigma,
        batch_size=cfg.train.batch_size,
        clip=cfg.train.clip if math.isfinite(cfg.train.clip) else cfg.selection.clip,
        seed=cfg.seed,
    )
    family = candidate_family(model)
    return select(model, family, syn.train, syn.val, scfg)


def choose_layers(cfg: ExperimentConfig, model: LayeredModel) -> list[int]:
    """Layer set of the arms that do not select from synthetic data."""
    if cfg.arm == "full-parameter":
        return model.parameterized_layers()
    if cfg.arm == "heuristic":
        return model.check_layers(cfg.heuristic_layers)
    if cfg.arm == "random-selection":
        rng = np.random.default_rng([cfg.seed, 303])
        cands = model.parameterized_layers()
        k = min(cfg.selection.top_k, len(cands))
        return sorted(int(l) for l in rng.choice(cands, size=k, replace=False))
    raise ValueError(f"arm {cfg.arm!r} selects on synthetic data")


def finetune_stage(
    cfg: ExperimentConfig,
    model: LayeredModel,
    private: Dataset,
    layers: Sequence[int],
    sigma: float,
    delta_ft: float,
    ledger: PrivacyLedger,
) -> LayeredModel:
    """DP-AdamW on ``layers`` (adapters first for the adapter arm); records the event."""
    if cfg.arm == "dp-selft+adapter":
        for l in layers:
            spec = model.spec(l)
            model = attach_adapter(model, l, min(cfg.adapter_rank, spec.in_dim, spec.out_dim), seed=cfg.seed)
    tcfg = dataclasses.replace(cfg.train, noise_multiplier=sigma)
    if cfg.nonprivate:
        tcfg = dataclasses.replace(tcfg, clip=NO_CLIP)
    rng = np.random.default_rng([cfg.seed, 404])
    train(model, private, layers, tcfg, rng, optimizer="adamw")
    if sigma > 0:
        q = min(1.0, cfg.train.batch_size / len(private))
        ledger.record(FT_STAGE, [MechanismEvent(sigma, 1.0, q, cfg.train.steps, label="dp-adamw")], delta_ft)
    return model


def stage_budgets(cfg: ExperimentConfig) -> tuple[float, float, float, float]:
    """``(eps_syn, eps_ft, delta_syn, delta_ft)`` for the configured arm.

    Arms without a synthetic stage give the whole budget to fine-tuning.
    """
    if cfg.nonprivate:
        return math.inf, math.inf, cfg.delta / 2, cfg.delta / 2
    if cfg.arm in SYNTHETIC_ARMS:
        ps = split_budget(cfg.eps_total, cfg.delta, cfg.eps_syn)
        return ps.eps_syn, ps.eps_ft, ps.delta_syn, ps.delta_ft
    return 0.0, cfg.eps_total, 0.0, cfg.delta


def run_pipeline(
    cfg: ExperimentConfig,
    private: Optional[Dataset] = None,
    test: Optional[Dataset] = None,
    model: Optional[LayeredModel] = None,
) -> RunResult:
    """Run one arm end to end and check the privacy budget.

    ``model`` replaces the freshly initialized ``cfg.layers`` network, e.g.
    with a pretrained checkpoint; it is copied, never modified.
    """
    t0 = time.perf_counter()
    gen_private, gen_test, means = make_task(cfg.task, cfg.seed)
    private = gen_private if private is None else private
    test = gen_test if test is None else test
    ledger = PrivacyLedger()
    uses_syn = cfg.arm in SYNTHETIC_ARMS
    eps_syn_b, eps_ft_b, d_syn, d_ft = stage_budgets(cfg)

    sigma = finetune_sigma(cfg, eps_ft_b, d_ft, len(private))
    model = base_model(cfg) if model is None else model.copy()
    report = None
    if uses_syn:
        syn = synthetic_stage(cfg, private, means, eps_syn_b, d_syn, ledger)
        report = selection_stage(cfg, model, syn, sigma if not cfg.nonprivate else 0.0)
        layers = list(report.chosen)
    else:
        layers = choose_layers(cfg, model)

    model = finetune_stage(cfg, model, private, layers, sigma, d_ft, ledger)
    acc = accuracy(model, test)
    result = RunResult(
        arm=cfg.arm,
        seed=cfg.seed,
        accuracy=acc,
        eps_total=ledger.total_epsilon,
        eps_syn=ledger.stage_epsilon("synthetic"),
        eps_ft=ledger.stage_epsilon(FT_STAGE),
        delta_total=ledger.total_delta,
        sigma=sigma,
        k=len(layers),
        selected_layers=list(layers),
        wall_ms=(time.perf_counter() - t0) * 1e3,
        eps_budget=cfg.eps_total,
        ledger=ledger.to_dict(),
        selection=None if report is None else report.summary(),
    )
    check_budget(cfg, ledger)
    result._report = report  # type: ignore[attr-defined]
    result._model = model  # type: ignore[attr-defined]
    return result


def check_budget(cfg: ExperimentConfig, ledger: PrivacyLedger) -> None:
    """Hard invariant: accounted epsilon within the configured total, stages in order."""
    if cfg.nonprivate:
        return
    stages = ledger.stages()
    if "synthetic" in stages and FT_STAGE in stages and stages.index("synthetic") > stages.index(FT_STAGE):
        raise BudgetViolation("synthetic-stage events must precede fine-tuning events")
    if ledger.total_epsilon > cfg.eps_total + 1e-9:
        raise BudgetViolation(f"accounted epsilon {ledger.total_epsilon:.6f} exceeds budget {cfg.eps_total}")
    if cfg.arm in SYNTHETIC_ARMS and ledger.stage_epsilon("synthetic") > cfg.eps_syn + 1e-9:
        raise BudgetViolation("synthetic stage exceeded its share")
    if ledger.total_delta > cfg.delta * (1 + 1e-12):
        raise BudgetViolation(f"accounted delta {ledger.total_delta} exceeds {cfg.delta}")


def _run_cell(cfg: ExperimentConfig) -> RunResult:
    try:
        r = run_pipeline(cfg)
    except Exception as exc:  # recorded per cell
        return RunResult(
            cfg.arm, cfg.seed, math.nan, math.nan, math.nan, math.nan, cfg.delta, math.nan, 0, [], 0.0,
            eps_budget=cfg.eps_total, error=f"{type(exc).__name__}: {exc}",
        )
    r.__dict__.pop("_model", None)  # keep results light across processes
    return r


def run_suite(configs: Sequence[ExperimentConfig], seeds: Sequence[int], workers: int = 1) -> tuple[list[RunResult], list[dict]]:
    """Cross product of configs and seeds; failures are recorded, not raised.

    Cells are independent, so ``workers > 1`` runs them in separate
    processes; results come back in the same order either way.
    """
    if not configs or not seeds:
        raise ValueError("suite needs at least one config and one seed")
    cells = [cfg.with_(seed=int(s)) for cfg in configs for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    return results, summarize(results)


def summarize(results: Sequence[RunResult]) -> list[dict]:
    groups: dict[tuple, list[RunResult]] = {}
    for r in results:
        key = (r.arm, r.eps_budget)
        groups.setdefault(key, []).append(r)
    rows = []
    for (arm, eps), rs in groups.items():
        acc = np.array([r.accuracy for r in rs if r.error is None])
        rows.append(
            {
                "arm": arm,
                "eps_budget": eps,
                "runs": len(rs),
                "failed": sum(r.error is not None for r in rs),
                "mean_accuracy": float(acc.mean()) if acc.size else math.nan,
                "std_accuracy": float(acc.std(ddof=1)) if acc.size > 1 else 0.0,
            }
        )
    return rows


def write_results_csv(results: Sequence[RunResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS + ["error"])
        w.writeheader()
        for r in results:
            w.writerow({**r.row(), "error": r.error or ""})


def format_table(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[_fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
