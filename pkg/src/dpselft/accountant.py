"""Renyi-DP accounting for (Poisson-subsampled) Gaussian mechanisms."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import special

DEFAULT_ORDERS: tuple[float, ...] = (
    (1.25, 1.5, 1.75) + tuple(float(a) for a in range(2, 65)) + (128.0, 256.0)
)


class BudgetError(ValueError):
    """Raised when a privacy target cannot be met."""


@dataclass(frozen=True)
class MechanismEvent:
    """``count`` repetitions of a Gaussian mechanism, optionally subsampled."""

    sigma: float
    sensitivity: float = 1.0
    q: float = 1.0
    count: int = 1
    label: str = ""

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not self.sensitivity > 0:
            raise ValueError("sensitivity must be positive")
        if not 0 < self.q <= 1:
            raise ValueError("sampling rate must lie in (0, 1]")
        if self.count < 1:
            raise ValueError("count must be >= 1")


@dataclass(frozen=True)
class RdpCurve:
    orders: tuple[float, ...]
    eps: tuple[float, ...]

    def __post_init__(self):
        if len(self.orders) != len(self.eps):
            raise ValueError("orders and eps differ in length")
        if any(a <= 1 for a in self.orders):
            raise ValueError("Renyi orders must exceed 1")

    def __add__(self, other: "RdpCurve") -> "RdpCurve":
        if self.orders != other.orders:
            raise ValueError("curves use different order grids")
        return RdpCurve(self.orders, tuple(a + b for a, b in zip(self.eps, other.eps)))

    @classmethod
    def zero(cls, orders: Sequence[float] = DEFAULT_ORDERS) -> "RdpCurve":
        return cls(tuple(orders), tuple(0.0 for _ in orders))


@dataclass(frozen=True)
class PrivacySpec:
    eps_total: float
    delta_total: float
    eps_syn: float
    eps_ft: float
    delta_syn: float
    delta_ft: float


def gaussian_rdp(sigma: float, sensitivity: float, alpha: float) -> float:
    """RDP of the Gaussian mechanism: ``alpha * Delta^2 / (2 sigma^2)``."""
    if alpha <= 1:
        raise ValueError("Renyi order must exceed 1")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return alpha * sensitivity**2 / (2.0 * sigma**2)


def subsampled_gaussian_rdp(q: float, sigma: float, alpha: int) -> float:
    """Binomial-expansion RDP bound for the Poisson-subsampled Gaussian.

    ``sigma`` is the noise multiplier relative to unit sensitivity. Only
    integer orders are supported.
    """
    if not 0 < q <= 1:
        raise ValueError("sampling rate must lie in (0, 1]")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if int(alpha) != alpha or alpha < 2:
        raise ValueError("subsampled bound needs an integer order >= 2")
    alpha = int(alpha)
    if q == 1.0:
        return gaussian_rdp(sigma, 1.0, alpha)
    j = np.arange(alpha + 1, dtype=np.float64)
    log_binom = special.gammaln(alpha + 1) - special.gammaln(j + 1) - special.gammaln(alpha - j + 1)
    terms = log_binom + j * math.log(q) + (alpha - j) * math.log1p(-q) + j * (j - 1) / (2.0 * sigma**2)
    log_a = float(special.logsumexp(terms))
    return max(log_a, 0.0) / (alpha - 1)


def event_rdp(event: MechanismEvent, alpha: float) -> float:
    """RDP of one repetition of ``event`` at order ``alpha``.

    Fractional orders of a subsampled event use the next integer order,
    valid because RDP is nondecreasing in the order.
    """
    sigma = event.sigma / event.sensitivity
    if event.q == 1.0:
        return gaussian_rdp(sigma, 1.0, alpha)
    return subsampled_gaussian_rdp(event.q, sigma, max(2, math.ceil(alpha)))


def compose(events: Sequence[MechanismEvent], orders: Sequence[float] = DEFAULT_ORDERS) -> RdpCurve:
    """Additive RDP composition over the order grid."""
    if not events:
        raise ValueError("nothing to compose")
    orders = tuple(float(a) for a in orders)
    total = np.zeros(len(orders))
    for ev in events:
        total += ev.count * np.array([event_rdp(ev, a) for a in orders])
    return RdpCurve(orders, tuple(float(e) for e in total))


def to_epsilon_delta(curve: RdpCurve, delta: float) -> float:
    """Convert an RDP curve to epsilon at ``delta`` (grid minimum)."""
    return epsilon_and_order(curve, delta)[0]


def epsilon_and_order(curve: RdpCurve, delta: float) -> tuple[float, float]:
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    best, best_order = math.inf, math.nan
    for a, e in zip(curve.orders, curve.eps):
        cand = e + math.log(1.0 / delta) / (a - 1.0)
        if cand < best:
            best, best_order = cand, a
    return best, best_order


def dpsgd_epsilon(sigma: float, q: float, steps: int, delta: float) -> float:
    return to_epsilon_delta(compose([MechanismEvent(sigma, 1.0, q, steps)]), delta)


SIGMA_BRACKET = (0.3, 1e3)


def calibrate_sigma(
    target_eps: float,
    delta: float,
    q: float,
    steps: int,
    sensitivity: float = 1.0,
    rel_tol: float = 1e-6,
) -> float:
    """Smallest noise multiplier in the bracket whose accounted epsilon is within target.

    Binary search; the returned value always satisfies the target.
    """
    if not target_eps > 0:
        raise ValueError("target epsilon must be positive")
    if steps < 1:
        raise ValueError("steps must be >= 1")

    def eps_at(s: float) -> float:
        return to_epsilon_delta(compose([MechanismEvent(s, sensitivity, q, steps)]), delta)

    lo, hi = SIGMA_BRACKET
    if eps_at(hi) > target_eps:
        raise BudgetError(f"epsilon {target_eps} unreachable with sigma <= {hi}")
    if eps_at(lo) <= target_eps:
        return lo
    while hi / lo - 1.0 > rel_tol:
        mid = math.sqrt(lo * hi)
        if eps_at(mid) <= target_eps:
            hi = mid
        else:
            lo = mid
    return hi


def split_budget(eps_total: float, delta_total: float, eps_syn: float) -> PrivacySpec:
    """Give ``eps_syn`` to synthetic-data construction, the rest to fine-tuning."""
    if eps_syn < 0:
        raise ValueError("eps_syn must be nonnegative")
    if eps_syn >= eps_total:
        raise BudgetError(f"eps_syn={eps_syn} leaves nothing of eps_total={eps_total}")
    half = delta_total / 2.0
    return PrivacySpec(eps_total, delta_total, eps_syn, eps_total - eps_syn, half, half)


@dataclass
class LedgerEntry:
    stage: str
    events: list[MechanismEvent]
    delta: float
    epsilon: float = field(init=False)
    order: float = field(init=False)
    curve: RdpCurve = field(init=False)

    def __post_init__(self):
        self.curve = compose(self.events)
        self.epsilon, self.order = epsilon_and_order(self.curve, self.delta)


class PrivacyLedger:
    """Records every noise-adding release, grouped by pipeline stage.

    Stages compose by summing their (epsilon, delta); the RDP curve of all
    events together is reported alongside as a tighter reference.
    """

    def __init__(self):
        self.entries: list[LedgerEntry] = []

    def record(self, stage: str, events: Sequence[MechanismEvent], delta: float) -> LedgerEntry:
        entry = LedgerEntry(stage, list(events), delta)
        self.entries.append(entry)
        return entry

    def stages(self) -> list[str]:
        return [e.stage for e in self.entries]

    def stage_epsilon(self, stage: str) -> float:
        return sum(e.epsilon for e in self.entries if e.stage == stage)

    def stage_delta(self, stage: str) -> float:
        return sum(e.delta for e in self.entries if e.stage == stage)

    @property
    def total_epsilon(self) -> float:
        return sum(e.epsilon for e in self.entries)

    @property
    def total_delta(self) -> float:
        return sum(e.delta for e in self.entries)

    def joint_epsilon(self) -> Optional[float]:
        """Epsilon of all events composed in RDP at the summed delta."""
        if not self.entries:
            return None
        events = [ev for e in self.entries for ev in e.events]
        return to_epsilon_delta(compose(events), self.total_delta)

    def to_dict(self) -> dict:
        return {
            "entries": [
                {
                    "stage": e.stage,
                    "events": [asdict(ev) for ev in e.events],
                    "delta": e.delta,
                    "epsilon": e.epsilon,
                    "best_order": e.order,
                    "rdp_curve": {"orders": list(e.curve.orders), "eps": list(e.curve.eps)},
                }
                for e in self.entries
            ],
            "stages": {s: {"epsilon": self.stage_epsilon(s), "delta": self.stage_delta(s)} for s in dict.fromkeys(self.stages())},
            "total": {"epsilon": self.total_epsilon, "delta": self.total_delta},
            "rdp_joint_epsilon": self.joint_epsilon(),
            # the configured delta is read as the end-to-end total; this is the
            # epsilon if each stage could spend the whole delta instead
            "epsilon_if_delta_per_stage": self.epsilon_at_stage_delta(self.total_delta) if self.entries else None,
        }

    def epsilon_at_stage_delta(self, delta: float) -> float:
        return sum(to_epsilon_delta(e.curve, delta) for e in self.entries)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
