"""Comparison eviction policies sharing the engine's step loop.

The pure ``*_evict`` functions take a :class:`LayerCache` and return the
retained refs in canonical order; the engine subclasses below call their
mask-producing cores each step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .budget import BudgetPlan
from .core import DEFAULT_REGISTERS, GhostError, LayerCache, ScoreWeights, ValidationError
from .engine import EvictionEngine, topk_mask

POLICY_KINDS = ("ghost", "key_similarity", "sink_recent", "recency_window", "uniform_budget_ghost")
DIRECTIONS = ("retain_least_similar", "retain_most_similar")

_DEFAULT_PARAMS = {
    "ghost": {},
    "uniform_budget_ghost": {},
    "recency_window": {},
    # default is the "least similar" reading; the other reading is one flag away
    "key_similarity": {"direction": "retain_least_similar"},
    "sink_recent": {"sink_size": 1, "window": 1},
}


class PolicyError(GhostError, ValueError):
    code = "E_POLICY"


@dataclass(frozen=True)
class PolicyConfig:
    kind: str = "ghost"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise PolicyError(f"unknown policy {self.kind!r}; valid: {', '.join(POLICY_KINDS)}")
        defaults = _DEFAULT_PARAMS[self.kind]
        unknown = set(self.params) - set(defaults)
        if unknown:
            raise PolicyError(f"policy {self.kind!r} has no parameter {sorted(unknown)[0]!r}")
        params = {**defaults, **self.params}
        if self.kind == "key_similarity" and params["direction"] not in DIRECTIONS:
            raise PolicyError(f"direction must be one of {DIRECTIONS}")
        if self.kind == "sink_recent":
            params = {k: int(v) for k, v in params.items()}
            if params["sink_size"] < 0 or params["window"] < 0:
                raise PolicyError("sink_size and window must be nonnegative")
        object.__setattr__(self, "params", params)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}


# -- masks over canonical-order arrays ---------------------------------------

def key_similarity_mask(keys: np.ndarray, query_key: np.ndarray, budget: int,
                        direction: str = "retain_least_similar") -> np.ndarray:
    if direction not in DIRECTIONS:
        raise PolicyError(f"direction must be one of {DIRECTIONS}")
    q = np.asarray(query_key, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    sims = (k @ q) / (np.linalg.norm(k, axis=1) * np.linalg.norm(q))
    return topk_mask(-sims if direction == "retain_least_similar" else sims, budget)


def _frame_bounds(frames: np.ndarray):
    uniq, starts = np.unique(frames, return_index=True)
    ends = np.append(starts[1:], frames.shape[0])
    return uniq, starts, ends


def sink_recent_mask(frames: np.ndarray, budget: int, sink_size: int, window: int,
                     tokens_per_frame: int) -> np.ndarray:
    n = frames.shape[0]
    if n <= budget:
        return np.ones(n, dtype=bool)
    sink_frames = -(-sink_size // tokens_per_frame) if sink_size > 0 else 0
    uniq, starts, ends = _frame_bounds(frames)
    mask = np.zeros(n, dtype=bool)
    protected = list(range(min(sink_frames, uniq.size)))
    protected += list(range(max(uniq.size - window, 0), uniq.size))
    for i in set(protected):
        mask[starts[i]:ends[i]] = True
    used = int(np.count_nonzero(mask))
    if used > budget or sink_frames * tokens_per_frame + window * tokens_per_frame > budget:
        raise PolicyError(f"sink of {sink_frames} frame(s) plus window of {window} frame(s) "
                          f"exceeds budget {budget}")
    # fill with the newest middle tokens; older ones are evicted first
    middle = np.flatnonzero(~mask)
    room = budget - used
    if room > 0:
        mask[middle[-room:]] = True
    return mask


def recency_mask(n: int, budget: int) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    if budget > 0:
        mask[-budget:] = True
    return mask


# -- LayerCache-level policies -----------------------------------------------

def key_similarity_evict(cache: LayerCache, budget: int, query_key: np.ndarray,
                         keys: Optional[np.ndarray] = None,
                         direction: str = "retain_least_similar") -> list:
    """Rank by cosine to the query key; special tokens get no privilege."""
    keys = cache.keys if keys is None else np.asarray(keys)
    if keys is None or keys.shape[0] != len(cache):
        raise PolicyError("key_similarity needs one key vector per cached token")
    mask = key_similarity_mask(keys, query_key, budget, direction)
    return [ref for ref, m in zip(cache.tokens, mask) if m]


def sink_recent_evict(cache: LayerCache, budget: int, sink_size: int, window: int,
                      tokens_per_frame: Optional[int] = None) -> list:
    """Keep the first ``ceil(sink_size / N)`` frames and the last ``window`` frames."""
    if tokens_per_frame is None:
        _, starts, ends = _frame_bounds(cache.frames)
        tokens_per_frame = int((ends - starts).max()) if starts.size else 1
    mask = sink_recent_mask(cache.frames, budget, sink_size, window, tokens_per_frame)
    return [ref for ref, m in zip(cache.tokens, mask) if m]


def recency_window_evict(cache: LayerCache, budget: int) -> list:
    return cache.tokens[max(len(cache) - budget, 0):] if budget > 0 else []


def uniform_budget_plan(num_layers: int, b_total: int) -> BudgetPlan:
    """Equal split; the remainder goes to layer 0."""
    if num_layers < 1:
        raise ValidationError("num_layers", "need at least one layer")
    budgets = np.full(num_layers, b_total // num_layers, dtype=np.int64)
    budgets[0] += b_total - int(budgets.sum())
    return BudgetPlan(budgets, b_total, None, 0)


# -- engines -------------------------------------------------------------------

class _BaselineEngine(EvictionEngine):
    uses_scores = False

    def _evict_layer(self, layer, incoming, incremental, memo):
        return self._baseline_mask(layer, incoming)


class KeySimilarityEngine(_BaselineEngine):
    def __init__(self, plan, weights=None, *, direction="retain_least_similar", key_dim=16, **kw):
        super().__init__(plan, weights, key_dim=key_dim, **kw)
        self.direction = direction

    def _baseline_mask(self, layer, incoming):
        query = incoming.keys.mean(axis=0)
        if not np.any(query):
            query = incoming.keys[0]
        return key_similarity_mask(layer.keys, query, layer.budget, self.direction)


class SinkRecentEngine(_BaselineEngine):
    def __init__(self, plan, weights=None, *, sink_size=1, window=1, **kw):
        super().__init__(plan, weights, **kw)
        self.sink_size = sink_size
        self.window = window

    def _baseline_mask(self, layer, incoming):
        return sink_recent_mask(layer.frames, layer.budget, self.sink_size, self.window,
                                self.tokens_per_frame)


class RecencyEngine(_BaselineEngine):
    def _baseline_mask(self, layer, incoming):
        return recency_mask(len(layer), layer.budget)


def make_engine(policy: PolicyConfig, plan: BudgetPlan, weights: Optional[ScoreWeights] = None, *,
                registers: int = DEFAULT_REGISTERS, mode: str = "standard", ablation: str = "full",
                key_dim: int = 16) -> EvictionEngine:
    if isinstance(policy, str):
        policy = PolicyConfig(policy)
    kw = {"registers": registers, "mode": mode, "ablation": ablation}
    if policy.kind == "ghost":
        return EvictionEngine(plan, weights, **kw)
    if policy.kind == "uniform_budget_ghost":
        return EvictionEngine(uniform_budget_plan(plan.num_layers, plan.total), weights, **kw)
    if policy.kind == "key_similarity":
        return KeySimilarityEngine(plan, weights, direction=policy.params["direction"],
                                   key_dim=key_dim, **kw)
    if policy.kind == "sink_recent":
        return SinkRecentEngine(plan, weights, **policy.params, **kw)
    return RecencyEngine(plan, weights, **kw)
