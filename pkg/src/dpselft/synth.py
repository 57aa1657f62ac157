"""Private selection and labeling of a public candidate pool.

Private examples vote for their nearest candidate in an embedding space;
the vote histogram is privatized with Gaussian noise, the most-voted
candidates are kept and labeled by noisy majority.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .accountant import MechanismEvent, PrivacyLedger, calibrate_sigma, compose, to_epsilon_delta
from .nn import Dataset

SYN_STAGE = "synthetic"


@dataclass
class CandidatePool:
    X: np.ndarray
    provenance: str = "generated"

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        if self.X.shape[0] < 1:
            raise ValueError("candidate pool is empty")

    def __len__(self) -> int:
        return self.X.shape[0]


@dataclass
class GeneratorConfig:
    """Local stand-in for prompt-based generation: a Gaussian mixture plus jittered variations.

    ``scales`` are isotropic standard deviations per component.
    """

    means: list[list[float]]
    scales: list[float]
    n_seed: int = 600
    mu: int = 3
    perturb_scale: float = 0.3
    weights: Optional[list[float]] = None
    import_path: Optional[str] = None

    def __post_init__(self):
        if self.mu < 0 or self.n_seed < 0:
            raise ValueError("mu and n_seed must be nonnegative")
        if self.import_path is None and (not self.means or len(self.means) != len(self.scales)):
            raise ValueError("mixture needs one scale per mean and at least one component")

    @property
    def pool_size(self) -> int:
        return (self.mu + 1) * self.n_seed


def generate_candidates(cfg: GeneratorConfig, rng: np.random.Generator) -> CandidatePool:
    """Each seed sample is followed by its ``mu`` perturbed copies."""
    if cfg.import_path is not None:
        return load_pool_csv(cfg.import_path)
    means = np.asarray(cfg.means, dtype=np.float64)
    scales = np.asarray(cfg.scales, dtype=np.float64)
    k, dim = means.shape
    w = np.full(k, 1.0 / k) if cfg.weights is None else np.asarray(cfg.weights, dtype=np.float64) / np.sum(cfg.weights)
    comp = rng.choice(k, size=cfg.n_seed, p=w)
    seeds = means[comp] + rng.standard_normal((cfg.n_seed, dim)) * scales[comp, None]
    if cfg.mu == 0:
        return CandidatePool(seeds)
    jitter = rng.standard_normal((cfg.n_seed, cfg.mu, dim)) * cfg.perturb_scale
    variations = seeds[:, None, :] + jitter
    pool = np.concatenate([seeds[:, None, :], variations], axis=1).reshape(-1, dim)
    return CandidatePool(pool)


@dataclass
class Encoder:
    """Public embedding: identity, or a seeded Gaussian random projection."""

    kind: str = "identity"
    seed: int = 0
    out_dim: Optional[int] = None
    _proj: Optional[np.ndarray] = field(default=None, repr=False)

    def encode(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.kind == "identity":
            if self.out_dim is not None and X.shape[1] != self.out_dim:
                raise ValueError(f"identity encoder expects dimension {self.out_dim}, got {X.shape[1]}")
            return X
        if self.kind == "projection":
            if self.out_dim is None:
                raise ValueError("projection encoder needs out_dim")
            if self._proj is None or self._proj.shape[0] != X.shape[1]:
                rng = np.random.default_rng(self.seed)
                self._proj = rng.standard_normal((X.shape[1], self.out_dim)) / math.sqrt(self.out_dim)
            return X @ self._proj
        raise ValueError(f"unknown encoder kind {self.kind!r}")


@dataclass
class VoteHistogram:
    counts: np.ndarray  # (m, K) exact joint counts h_{j,c}
    noisy_counts: Optional[np.ndarray] = None
    noisy_marginal: Optional[np.ndarray] = None
    sigma_hist: Optional[float] = None
    sigma_lab: Optional[float] = None

    @property
    def marginal(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def n_candidates(self) -> int:
        return self.counts.shape[0]


def nearest(private_emb: np.ndarray, pool_emb: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """Index of the nearest candidate per private row; first index wins ties."""
    if private_emb.shape[1] != pool_emb.shape[1]:
        raise ValueError("private and candidate embeddings differ in dimension")
    if metric == "euclidean":
        out = np.empty(private_emb.shape[0], dtype=np.int64)
        chunk = max(1, 2_000_000 // max(1, pool_emb.size))
        for s in range(0, private_emb.shape[0], chunk):
            diff = private_emb[s : s + chunk, None, :] - pool_emb[None, :, :]
            out[s : s + chunk] = np.argmin(np.einsum("ijk,ijk->ij", diff, diff), axis=1)
        return out
    if metric == "cosine":
        a = private_emb / np.maximum(np.linalg.norm(private_emb, axis=1, keepdims=True), 1e-300)
        b = pool_emb / np.maximum(np.linalg.norm(pool_emb, axis=1, keepdims=True), 1e-300)
        return np.argmin(1.0 - a @ b.T, axis=1)
    raise ValueError(f"unknown metric {metric!r}")


def vote(
    private: Dataset,
    pool: CandidatePool,
    encoder: Encoder,
    metric: str = "euclidean",
    n_classes: Optional[int] = None,
) -> VoteHistogram:
    """Exact joint histogram: ``counts[j, c]`` private records of class c nearest to candidate j."""
    K = int(private.y.max()) + 1 if n_classes is None else n_classes
    owner = nearest(encoder.encode(private.X), encoder.encode(pool.X), metric)
    counts = np.zeros((len(pool), K), dtype=np.int64)
    np.add.at(counts, (owner, private.y), 1)
    return VoteHistogram(counts)


def privatize(
    hist: VoteHistogram,
    sigma_hist: float,
    sigma_lab: float,
    rng: np.random.Generator,
    joint: bool = True,
) -> VoteHistogram:
    """Add Gaussian noise to the vote counts.

    With ``joint`` the (candidate, class) table is released once with scale
    ``sigma_lab`` and the candidate totals are row sums of the noisy table.
    Otherwise totals and class counts are released separately.
    """
    if sigma_hist < 0 or sigma_lab < 0:
        raise ValueError("noise scales must be nonnegative")
    counts = hist.counts.astype(np.float64)
    noisy = counts + rng.standard_normal(counts.shape) * sigma_lab if sigma_lab > 0 else counts.copy()
    if joint:
        marginal = noisy.sum(axis=1)
    else:
        marginal = counts.sum(axis=1)
        if sigma_hist > 0:
            marginal = marginal + rng.standard_normal(marginal.shape) * sigma_hist
    return VoteHistogram(hist.counts, noisy, marginal, sigma_hist, sigma_lab)


def select_topk(hist: VoteHistogram, k: int) -> np.ndarray:
    """Indices of the ``k`` largest noisy totals, ascending; smaller index wins ties."""
    if hist.noisy_marginal is None:
        raise ValueError("histogram is not privatized")
    m = hist.n_candidates
    if not 0 <= k <= m:
        raise ValueError(f"k={k} outside 0..{m}")
    order = np.argsort(-hist.noisy_marginal, kind="stable")
    return np.sort(order[:k])


def label(hist: VoteHistogram, selected: Sequence[int]) -> dict[int, int]:
    """Noisy majority class per selected candidate; smaller class wins ties."""
    if hist.noisy_counts is None:
        raise ValueError("histogram is not privatized")
    return {int(j): int(np.argmax(hist.noisy_counts[j])) for j in selected}


@dataclass
class SyntheticDataset:
    X: np.ndarray
    y: np.ndarray
    selected: np.ndarray  # candidate indices S, aligned with rows of X
    train_idx: np.ndarray  # row positions into X
    val_idx: np.ndarray
    sigma_hist: float
    sigma_lab: float
    ledger_entry: Optional[dict] = None

    @property
    def train(self) -> Dataset:
        return Dataset(self.X[self.train_idx], self.y[self.train_idx])

    @property
    def val(self) -> Dataset:
        return Dataset(self.X[self.val_idx], self.y[self.val_idx])

    def __len__(self) -> int:
        return self.X.shape[0]


def split_indices(n: int, train_frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_train = int(round(train_frac * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def syn_sigma(eps_syn: float, delta_syn: float, joint: bool = True) -> float:
    """Noise scale for the vote release(s) spending exactly ``eps_syn``.

    The two-release variant splits the budget evenly in RDP: both releases
    use the same scale, calibrated for two compositions.
    """
    if math.isinf(eps_syn):
        return 0.0
    return calibrate_sigma(eps_syn, delta_syn, q=1.0, steps=1 if joint else 2)


def build_synthetic_dataset(
    private: Dataset,
    pool: CandidatePool,
    encoder: Encoder,
    eps_syn: float,
    delta_syn: float,
    k_syn: int,
    split_seed: int,
    rng: np.random.Generator,
    ledger: Optional[PrivacyLedger] = None,
    metric: str = "euclidean",
    joint: bool = True,
    n_classes: Optional[int] = None,
    train_frac: float = 0.7,
) -> SyntheticDataset:
    """Vote, privatize, keep top-``k_syn``, label, and split.

    ``eps_syn = inf`` disables noise (a non-private debug mode) and records
    nothing in the ledger.
    """
    hist = vote(private, pool, encoder, metric, n_classes)
    sigma = syn_sigma(eps_syn, delta_syn, joint)
    noisy = privatize(hist, sigma, sigma, rng, joint=joint)
    S = select_topk(noisy, min(k_syn, len(pool)))
    labels = label(noisy, S)
    entry = None
    if sigma > 0:
        n_rel = 1 if joint else 2
        events = [MechanismEvent(sigma, 1.0, 1.0, n_rel, label="vote-histogram")]
        if ledger is not None:
            e = ledger.record(SYN_STAGE, events, delta_syn)
            eps = e.epsilon
        else:
            eps = to_epsilon_delta(compose(events), delta_syn)
        entry = {"stage": SYN_STAGE, "sigma": sigma, "releases": n_rel, "epsilon": eps, "delta": delta_syn}
    train_idx, val_idx = split_indices(len(S), train_frac, np.random.default_rng(split_seed))
    return SyntheticDataset(
        X=pool.X[S],
        y=np.array([labels[int(j)] for j in S], dtype=np.int64),
        selected=S,
        train_idx=train_idx,
        val_idx=val_idx,
        sigma_hist=sigma,
        sigma_lab=sigma,
        ledger_entry=entry,
    )


def load_dataset_csv(path) -> Dataset:
    """Header-less CSV: features then an integer label per line."""
    arr = np.loadtxt(path, delimiter=",", ndmin=2)
    return Dataset(arr[:, :-1], arr[:, -1].astype(np.int64))


def save_dataset_csv(data: Dataset, path) -> None:
    with open(path, "w") as fh:
        for x, y in zip(data.X, data.y):
            fh.write(",".join(repr(float(v)) for v in x) + f",{int(y)}\n")


def load_pool_csv(path) -> CandidatePool:
    return CandidatePool(np.loadtxt(path, delimiter=",", ndmin=2), provenance="imported")


def save_pool_csv(pool: CandidatePool, path) -> None:
    with open(path, "w") as fh:
        for x in pool.X:
            fh.write(",".join(repr(float(v)) for v in x) + "\n")


def export_synthetic(syn: SyntheticDataset, path) -> Path:
    """Write the labeled records as CSV plus a ``.json`` sidecar with S, splits and noise scales."""
    path = Path(path)
    save_dataset_csv(Dataset(syn.X, syn.y), path)
    sidecar = path.with_suffix(".json")
    with open(sidecar, "w") as fh:
        json.dump(
            {
                "selected": syn.selected.tolist(),
                "train_idx": syn.train_idx.tolist(),
                "val_idx": syn.val_idx.tolist(),
                "sigma_hist": syn.sigma_hist,
                "sigma_lab": syn.sigma_lab,
                "ledger_entry": syn.ledger_entry,
            },
            fh,
            indent=2,
        )
    return sidecar


def import_synthetic(path) -> SyntheticDataset:
    path = Path(path)
    data = load_dataset_csv(path)
    with open(path.with_suffix(".json")) as fh:
        meta = json.load(fh)
    return SyntheticDataset(
        X=data.X,
        y=data.y,
        selected=np.asarray(meta["selected"], dtype=np.int64),
        train_idx=np.asarray(meta["train_idx"], dtype=np.int64),
        val_idx=np.asarray(meta["val_idx"], dtype=np.int64),
        sigma_hist=meta["sigma_hist"],
        sigma_lab=meta["sigma_lab"],
        ledger_entry=meta.get("ledger_entry"),
    )
