"""Executable checks of the one-step noise-damage bound and the worst-case selection bound.

Both are checked on problems where every quantity is exact: quadratics with a
known smoothness constant, and finite risk tables over an enumerable
perturbation grid.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special


def normal_quantile(confidence: float) -> float:
    """Half-width multiplier of a two-sided normal interval."""
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    return float(special.ndtri(0.5 + confidence / 2))


def familywise(confidence: float, n: int) -> float:
    """Per-check level giving ``confidence`` jointly over ``n`` checks (Bonferroni)."""
    return 1.0 - (1.0 - confidence) / n


@dataclass
class TheoremReport:
    name: str
    measured: float
    bound: float
    trials: int = 0
    half_width: float = 0.0
    details: dict = field(default_factory=dict)

    @property
    def margin(self) -> float:
        return self.bound - self.measured

    @property
    def violated(self) -> bool:
        return self.measured > self.bound + self.half_width

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(margin=self.margin, violated=self.violated)
        return d

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, default=_jsonable)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


@dataclass
class QuadraticProblem:
    """``F(theta) = 0.5 theta^T A theta`` with ``A`` symmetric PSD."""

    A: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if not np.allclose(self.A, self.A.T):
            raise ValueError("A must be symmetric")
        eig = np.linalg.eigvalsh(self.A)
        if eig.min() < -1e-12 * max(1.0, abs(eig).max()):
            raise ValueError("A must be positive semidefinite")
        self.beta = float(max(eig.max(), 0.0))

    def value(self, theta: np.ndarray) -> np.ndarray:
        """F at one point (1-D) or row-wise over a batch (2-D)."""
        theta = np.asarray(theta)
        return 0.5 * np.einsum("...i,ij,...j->...", theta, self.A, theta)

    def grad(self, theta: Optional[np.ndarray] = None) -> np.ndarray:
        return self.A @ (self.theta if theta is None else theta)


def _clip_vec(v: np.ndarray, C: float) -> np.ndarray:
    return v / max(1.0, float(np.linalg.norm(v)) / C)


def verify_theorem1(
    problem: QuadraticProblem,
    layers: Sequence[int],
    eta: float,
    sigma: float,
    C: float,
    trials: int = 20000,
    seed: int = 0,
    confidence: float = 0.99,
) -> TheoremReport:
    """Monte Carlo check of the one-step expected-risk bound.

    ``layers`` are 0-based coordinates of ``theta`` treated as trainable.
    The update is ``theta_L - eta (g_L + z)`` with ``g_L`` the clipped
    projected gradient and ``z ~ N(0, sigma^2 C^2 I)``. When the bound is
    tight the estimate straddles it, so sweeps over many problems should pass
    a family-wise ``confidence``.
    """
    if trials < 1000 and sigma > 0:
        raise ValueError("use at least 1000 trials")
    idx = np.asarray(sorted(layers), dtype=np.int64)
    d = idx.size
    full_grad = problem.grad()
    grad_L = full_grad[idx]
    g = _clip_vec(grad_L, C)
    F0 = float(problem.value(problem.theta))
    beta = problem.beta
    rhs = F0 - eta * float(grad_L @ g) + 0.5 * beta * eta**2 * float(g @ g) + 0.5 * beta * eta**2 * d * sigma**2 * C**2

    mean_point = problem.theta.copy()
    mean_point[idx] -= eta * g
    # exact: E F(m - eta z_L) = F(m) + 0.5 eta^2 sigma^2 C^2 tr(A_LL)
    analytic = float(problem.value(mean_point)) + 0.5 * eta**2 * sigma**2 * C**2 * float(np.trace(problem.A[np.ix_(idx, idx)]))

    if sigma == 0:
        measured, hw, n = float(problem.value(mean_point)), 0.0, 1
    else:
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((trials, d)) * (sigma * C)
        pts = np.repeat(mean_point[None, :], trials, axis=0)
        pts[:, idx] -= eta * z
        vals = problem.value(pts)
        measured = float(vals.mean())
        hw = normal_quantile(confidence) * float(vals.std(ddof=1)) / math.sqrt(trials)
        n = trials
    denom = float(grad_L @ grad_L)
    alignment = float(grad_L @ g) / denom if denom > 0 else math.nan
    return TheoremReport(
        name="theorem1",
        measured=measured,
        bound=rhs,
        trials=n,
        half_width=hw,
        details={
            "analytic_expectation": analytic,
            "beta": beta,
            "d": int(d),
            "eta": eta,
            "sigma": sigma,
            "C": C,
            "confidence": confidence,
            "alignment": alignment,
            "signal_retention": signal_retention(full_grad, idx) if np.any(full_grad) else math.nan,
            "A": problem.A,
            "theta": problem.theta,
            "layers": idx,
        },
    )


def signal_retention(gradient: np.ndarray, coords: Sequence[int]) -> float:
    """Share of the squared gradient norm on ``coords``."""
    gradient = np.asarray(gradient, dtype=np.float64)
    total = float(gradient @ gradient)
    if total == 0:
        raise ValueError("full gradient is zero")
    part = gradient[np.asarray(list(coords), dtype=np.int64)]
    return float(part @ part) / total


def noise_damage_slope(dims: Sequence[int], eta: float, sigma: float, C: float, trials: int = 20000, seed: int = 0) -> dict:
    """Measured ``E F(theta+) - F(theta)`` at a stationary point of ``0.5 ||theta||^2``.

    Returns per-dimension damage and the least-squares slope through the
    origin, to compare against ``eta^2 sigma^2 C^2 / 2``.
    """
    damage = []
    for d in dims:
        prob = QuadraticProblem(np.eye(d), np.zeros(d))
        rep = verify_theorem1(prob, range(d), eta, sigma, C, trials, seed=seed + d)
        damage.append(rep.measured - float(prob.value(prob.theta)))
    x = np.asarray(dims, dtype=np.float64)
    y = np.asarray(damage)
    slope = float(x @ y / (x @ x))
    return {"dims": list(dims), "damage": damage, "slope": slope, "expected_slope": 0.5 * eta**2 * sigma**2 * C**2}


def random_quadratic(rng: np.random.Generator, max_dim: int = 5) -> tuple[QuadraticProblem, list[int]]:
    """Random PSD quadratic with a random nonempty coordinate subset."""
    d = int(rng.integers(1, max_dim + 1))
    M = rng.standard_normal((d, d))
    prob = QuadraticProblem(M @ M.T, rng.standard_normal(d))
    layers = sorted(rng.choice(d, size=int(rng.integers(1, d + 1)), replace=False).tolist())
    return prob, layers


def theorem1_sweep(rng: np.random.Generator, n: int = 100, trials: int = 2000, seed: int = 0, confidence: float = 0.99) -> list[TheoremReport]:
    """Check the one-step bound on ``n`` random configurations at a joint ``confidence``."""
    level = familywise(confidence, n)
    out = []
    for i in range(n):
        prob, layers = random_quadratic(rng)
        eta, sigma, C = float(rng.uniform(0.01, 0.5)), float(rng.uniform(0, 2)), float(rng.uniform(0.1, 3))
        out.append(verify_theorem1(prob, layers, eta, sigma, C, trials, seed + i, level))
    return out


@dataclass
class Theorem2Instance:
    """Finite risk tables over candidates x perturbation grid.

    ``probs`` is the law of the downstream perturbation on the grid (inside
    the radius); ``tail_prob`` is the mass outside it, where the risk takes
    ``tail_value`` (at most ``B``).
    """

    R_syn: np.ndarray  # (|Q|, G)
    R_pri: np.ndarray  # (|Q|, G)
    probs: np.ndarray  # (G,), sums to 1 - tail_prob
    tau: float
    B: float = 1.0
    tail_prob: float = 0.0
    tail_value: float = 0.0
    names: Optional[list[str]] = None

    def __post_init__(self):
        self.R_syn = np.atleast_2d(np.asarray(self.R_syn, dtype=np.float64))
        self.R_pri = np.atleast_2d(np.asarray(self.R_pri, dtype=np.float64))
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.R_syn.shape != self.R_pri.shape or self.probs.shape != (self.R_pri.shape[1],):
            raise ValueError("risk tables and grid distribution disagree in shape")
        if not math.isclose(self.probs.sum() + self.tail_prob, 1.0, abs_tol=1e-9):
            raise ValueError("grid mass plus tail mass must equal 1")
        if np.any(self.R_pri < 0) or np.any(self.R_pri > self.B) or not 0 <= self.tail_value <= self.B:
            raise ValueError("private risks must lie in [0, B]")

    @property
    def measured_tau(self) -> float:
        return float(np.abs(self.R_syn - self.R_pri).max())


def verify_theorem2(inst: Theorem2Instance) -> TheoremReport:
    """Exact expectation of the private risk of the worst-case choice vs the bound."""
    if inst.measured_tau > inst.tau + 1e-12:
        raise ValueError(f"tables differ by {inst.measured_tau} > tau={inst.tau}")
    w_syn = inst.R_syn.max(axis=1)
    chosen = int(np.argmin(w_syn))  # first minimum: smaller index on ties
    expected = float(inst.probs @ inst.R_pri[chosen]) + inst.tail_prob * inst.tail_value
    min_sup = float(inst.R_pri.max(axis=1).min())
    bound = min_sup + 2 * inst.tau + inst.tail_prob * inst.B
    return TheoremReport(
        name="theorem2",
        measured=expected,
        bound=bound,
        details={
            "chosen": chosen,
            "chosen_name": None if inst.names is None else inst.names[chosen],
            "W_syn": w_syn,
            "W_pri": inst.R_pri.max(axis=1),
            "min_sup_pri": min_sup,
            "tau": inst.tau,
            "tail_prob": inst.tail_prob,
            "B": inst.B,
        },
    )


def random_theorem2_instance(rng: np.random.Generator, max_q: int = 5, max_grid: int = 9, B: float = 1.0) -> Theorem2Instance:
    nq = int(rng.integers(1, max_q + 1))
    ng = int(rng.integers(1, max_grid + 1))
    R_pri = rng.uniform(0, B, size=(nq, ng))
    tau = float(rng.uniform(0, 0.2))
    R_syn = R_pri + rng.uniform(-tau, tau, size=(nq, ng))
    tail = float(rng.choice([0.0, rng.uniform(0, 0.3)]))
    p = rng.dirichlet(np.ones(ng)) * (1 - tail)
    return Theorem2Instance(R_syn, R_pri, p, tau, B, tail, float(rng.uniform(0, B)))


def ball_grid(dim: int, rho: float, resolution: int) -> np.ndarray:
    """Points of the radius-``rho`` ball: boundary directions at several radii, plus the origin."""
    if dim > 3:
        raise ValueError("grid search is limited to 3 dimensions")
    if rho == 0:
        return np.zeros((1, dim))
    if dim == 1:
        dirs = np.array([[-1.0], [1.0]])
    elif dim == 2:
        ang = np.linspace(0, 2 * np.pi, resolution, endpoint=False)
        dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    else:
        # Fibonacci sphere
        k = np.arange(resolution) + 0.5
        phi = np.arccos(1 - 2 * k / resolution)
        th = np.pi * (1 + 5**0.5) * k
        dirs = np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], axis=1)
    radii = rho * np.linspace(0, 1, 9)[1:]
    pts = (radii[:, None, None] * dirs[None, :, :]).reshape(-1, dim)
    return np.concatenate([np.zeros((1, dim)), pts])


def brute_force_worst_case(
    loss_at: Callable[[np.ndarray], float],
    theta: np.ndarray,
    eta: float,
    g: np.ndarray,
    rho: float,
    resolution: int = 720,
) -> np.ndarray:
    """Exhaustive search of the ball grid for the loss-maximizing perturbation."""
    theta = np.asarray(theta, dtype=np.float64)
    grid = ball_grid(theta.size, rho, resolution)
    vals = [loss_at(theta - eta * (g + xi)) for xi in grid]
    return grid[int(np.argmax(vals))].copy()
