"""Layer profiling and softmax budget allocation across layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import DEFAULT_FRAME_TOKENS, GhostError, ValidationError


class ZeroNormSampleError(GhostError, ValueError):
    code = "E_ZERO_NORM"

    def __init__(self, layer: int, sample: int):
        self.layer = layer
        self.sample = sample
        super().__init__(f"zero-norm activation vector at layer {layer}, sample {sample}")


class InfeasibleBudgetError(GhostError, ValueError):
    code = "E_INFEASIBLE_BUDGET"


@dataclass(frozen=True, eq=False)
class LayerProfile:
    rho_bar: np.ndarray
    sample_count: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho_bar, dtype=np.float64)
        counts = np.asarray(self.sample_count, dtype=np.int64)
        if rho.ndim != 1 or rho.shape != counts.shape or rho.size == 0:
            raise ValidationError("rho_bar", "need one value and one sample count per layer")
        if np.any(np.abs(rho) > 1):
            raise ValidationError("rho_bar", "cosine similarity outside [-1, 1]")
        if np.any(counts < 1):
            raise ValidationError("sample_count", "every layer needs at least one sample")
        object.__setattr__(self, "rho_bar", rho)
        object.__setattr__(self, "sample_count", counts)

    @classmethod
    def from_values(cls, rho_bar: Sequence[float]) -> "LayerProfile":
        rho = np.asarray(rho_bar, dtype=np.float64)
        return cls(rho, np.ones(rho.shape, dtype=np.int64))

    @property
    def num_layers(self) -> int:
        return int(self.rho_bar.shape[0])


@dataclass(frozen=True, eq=False)
class BudgetPlan:
    budgets: np.ndarray
    total: int
    temperature: Optional[float] = None
    floor: int = 0

    def __post_init__(self):
        b = np.asarray(self.budgets, dtype=np.int64)
        if b.ndim != 1 or b.size == 0:
            raise ValidationError("budgets", "need at least one layer")
        if int(b.sum()) != int(self.total):
            raise ValidationError("budgets", f"budgets sum to {int(b.sum())}, expected {self.total}")
        if np.any(b < self.floor) or np.any(b < 0):
            raise ValidationError("budgets", "budget below floor")
        b.flags.writeable = False
        object.__setattr__(self, "budgets", b)
        object.__setattr__(self, "total", int(self.total))
        object.__setattr__(self, "floor", int(self.floor))

    @property
    def num_layers(self) -> int:
        return int(self.budgets.shape[0])

    def __eq__(self, other):
        if not isinstance(other, BudgetPlan):
            return NotImplemented
        return (np.array_equal(self.budgets, other.budgets) and self.total == other.total
                and self.temperature == other.temperature and self.floor == other.floor)

    __hash__ = None

    def to_dict(self) -> dict:
        return {"total": self.total, "tau": self.temperature, "floor": self.floor,
                "budgets": [int(b) for b in self.budgets]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "BudgetPlan":
        tau = data.get("tau")
        return cls(np.asarray(data["budgets"], dtype=np.int64), int(data["total"]),
                   None if tau is None else float(tau), int(data.get("floor", 0)))


def cosine(x: np.ndarray, y: np.ndarray) -> float:
    x = np.ravel(np.asarray(x, dtype=np.float64))
    y = np.ravel(np.asarray(y, dtype=np.float64))
    c = float(np.dot(x, y) / (np.linalg.norm(x) * np.linalg.norm(y)))
    return min(1.0, max(-1.0, c))


def mean_cosine_profile(samples) -> LayerProfile:
    """Mean input/output cosine similarity per layer.

    ``samples`` is a sequence (indexed by layer) of sequences of
    ``(input, output)`` pairs; multi-dimensional activations are flattened
    row-major.
    """
    rho, counts = [], []
    for layer, pairs in enumerate(samples):
        pairs = list(pairs)
        if not pairs:
            raise ValidationError("samples", f"layer {layer} has no samples")
        acc = []
        for s, (x, y) in enumerate(pairs):
            x = np.ravel(np.asarray(x, dtype=np.float64))
            y = np.ravel(np.asarray(y, dtype=np.float64))
            if x.shape != y.shape:
                raise ValidationError("samples", f"layer {layer} sample {s}: shape mismatch")
            if not np.any(x) or not np.any(y):
                raise ZeroNormSampleError(layer, s)
            acc.append(cosine(x, y))
        rho.append(float(np.mean(acc)))
        counts.append(len(acc))
    if not rho:
        raise ValidationError("samples", "no layers")
    return LayerProfile(np.clip(rho, -1.0, 1.0), np.asarray(counts))


def softmax_shares(profile: LayerProfile, tau: float) -> np.ndarray:
    a = (1.0 - profile.rho_bar) / tau
    e = np.exp(a - a.max())
    return e / e.sum()


def _repair_floor(budgets: np.ndarray, floor: int) -> np.ndarray:
    """Raise layers to ``floor``, taking the deficit token by token from the largest layer.

    Equivalent to the one-at-a-time rule (largest first, lowest index on
    ties) but processes whole plateaus at once.
    """
    b = budgets.copy()
    low = b < floor
    deficit = int((floor - b[low]).sum())
    b[low] = floor
    while deficit > 0:
        top = b.max()
        at_top = np.flatnonzero(b == top)
        rest = b[b < top]
        nxt = max(int(rest.max()) if rest.size else floor, floor)
        room = (int(top) - nxt) * at_top.size
        if room >= deficit or nxt == int(top):
            q, r = divmod(deficit, at_top.size)
            b[at_top] -= q
            b[at_top[:r]] -= 1
            deficit = 0
        else:
            b[at_top] = nxt
            deficit -= room
    return b


def allocate_budgets(profile: LayerProfile, tau: float, b_total: int,
                     floor: int = DEFAULT_FRAME_TOKENS) -> BudgetPlan:
    """Distribute ``b_total`` tokens across layers by softmax over 1 - rho_bar.

    The default floor is one full frame at the default grid, so every layer
    can hold at least the newest frame.
    """
    if not tau > 0:
        raise ValidationError("tau", "temperature must be positive")
    b_total = int(b_total)
    floor = int(floor)
    L = profile.num_layers
    if floor < 0 or b_total < L * floor:
        raise InfeasibleBudgetError(f"total {b_total} cannot give {L} layers a floor of {floor}")
    pi = softmax_shares(profile, tau)
    budgets = np.floor(pi * b_total).astype(np.int64)
    # argmax of the logits is argmax of pi, without exp rounding in the comparison
    budgets[int(np.argmax((1.0 - profile.rho_bar) / tau))] += b_total - int(budgets.sum())
    if floor > 0:
        budgets = _repair_floor(budgets, floor)
    return BudgetPlan(budgets, b_total, float(tau), floor)


def sweep_temperature(profile: LayerProfile, taus: Sequence[float], b_total: int,
                      floor: int = DEFAULT_FRAME_TOKENS) -> list:
    return [allocate_budgets(profile, tau, b_total, floor) for tau in taus]
