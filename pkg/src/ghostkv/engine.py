"""Online token eviction over L independent layer caches.

Each call to :meth:`EvictionEngine.step` handles one incoming frame: every
layer whose cache exceeds its budget is cut back to exactly its budget by
importance, then the new frame's tokens are appended to every layer.  The
incremental path reads raw scores from each layer's importance cache and
only scores the new frame; :meth:`EvictionEngine.step_full_recompute`
rescores everything from stored metadata and must select the same tokens.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from .budget import BudgetPlan
from .core import (
    DEFAULT_REGISTERS,
    FrameMeta,
    GhostError,
    LayerCache,
    Pose,
    ScoreWeights,
    TokenRef,
    ValidationError,
    frame_token_ranks,
)
from .scoring import (
    frame_raw_scores,
    frame_score_values,
    minmax_values,
    patch_raw_scores,
    token_score_values,
)

log = logging.getLogger(__name__)

MODES = ("standard", "strict_protection")
ABLATIONS = ("full", "frame_only", "token_only", "no_cam", "no_geo", "no_temp", "no_boost")


class FrameOrderError(GhostError, ValueError):
    code = "E_FRAME_ORDER"


class UnknownFrameError(GhostError, KeyError):
    code = "E_UNKNOWN_FRAME"

    def __str__(self):
        return str(self.args[0])


def apply_ablation(weights: ScoreWeights, ablation: str) -> ScoreWeights:
    """Zero the knocked-out weight(s); dropped frame weights are redistributed
    proportionally so the frame-weight total is unchanged."""
    if ablation not in ABLATIONS:
        raise ValidationError("ablation", f"unknown ablation {ablation!r}")
    if ablation == "full":
        return weights
    if ablation == "frame_only":
        return replace(weights, w_f=1.0, w_k=0.0)
    if ablation == "token_only":
        return replace(weights, w_f=0.0, w_k=1.0)
    if ablation == "no_boost":
        return replace(weights, delta_boost=0.0)
    drop = {"no_cam": "w_cam", "no_geo": "w_geo", "no_temp": "w_temp"}[ablation]
    frame_w = {"w_cam": weights.w_cam, "w_geo": weights.w_geo, "w_temp": weights.w_temp}
    total = sum(frame_w.values())
    kept = total - frame_w[drop]
    scale = total / kept if kept > 0 else 0.0
    changes = {k: (0.0 if k == drop else v * scale) for k, v in frame_w.items()}
    return replace(weights, **changes)


def topk_mask(scores: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the k best entries of ``scores``.

    Entries are assumed to be in canonical token order, so ties at the
    cut-off go to the lowest positions (older frame, then lower kind rank).
    Runs in O(n) via partitioning.
    """
    n = scores.shape[0]
    if k >= n:
        return np.ones(n, dtype=bool)
    mask = np.zeros(n, dtype=bool)
    if k <= 0:
        return mask
    thr = np.partition(scores, n - k)[n - k]
    mask = scores > thr
    need = k - int(np.count_nonzero(mask))
    mask[np.flatnonzero(scores == thr)[:need]] = True
    return mask


def select_topk(scores: Mapping[TokenRef, float], k: int) -> list:
    """The k highest-scoring refs: score descending, then frame, then kind rank."""
    if k < 0:
        raise ValidationError("k", "must be nonnegative")
    ordered = sorted(scores, key=lambda ref: (-scores[ref], ref.sort_key()))
    return ordered[:k]


@dataclass
class EvictionStepResult:
    frame_index: int
    registers: int
    evicted_frames: list
    evicted_ranks: list
    retained_counts: list   # per layer (camera, register, patch) after eviction
    pre_append: list        # per layer size after eviction, before append
    post_append: list       # per layer size after append
    step_time: float = field(default=0.0, compare=False)

    @property
    def evicted(self) -> list:
        return [
            [TokenRef.from_rank(f, r, self.registers) for f, r in zip(fr, rk)]
            for fr, rk in zip(self.evicted_frames, self.evicted_ranks)
        ]

    def num_evicted(self) -> list:
        return [int(a.shape[0]) for a in self.evicted_frames]

    def same_as(self, other: "EvictionStepResult") -> bool:
        """Equality on everything but wall-clock time."""
        return (
            self.frame_index == other.frame_index
            and self.retained_counts == other.retained_counts
            and self.pre_append == other.pre_append
            and self.post_append == other.post_append
            and all(np.array_equal(a, b) for a, b in zip(self.evicted_frames, other.evicted_frames))
            and all(np.array_equal(a, b) for a, b in zip(self.evicted_ranks, other.evicted_ranks))
        )


@dataclass
class _Incoming:
    frame_index: int
    ranks: np.ndarray
    raw: dict          # per-token sal/dc/pc, NaN on special tokens
    frame_raw: tuple   # (s_cam_raw, s_geo_raw)
    keys: Optional[np.ndarray] = None


class EvictionEngine:
    """GHOST eviction state: L layer caches, retained frame metadata, plan and weights.

    Not safe for concurrent ``step`` calls.
    """

    uses_scores = True

    def __init__(self, plan: BudgetPlan, weights: Optional[ScoreWeights] = None, *,
                 registers: int = DEFAULT_REGISTERS, mode: str = "standard",
                 ablation: str = "full", key_dim: int = 0):
        if mode == "strict":
            mode = "strict_protection"
        if mode not in MODES:
            raise ValidationError("mode", f"unknown mode {mode!r}")
        if registers < 0:
            raise ValidationError("registers", "must be nonnegative")
        self.plan = plan
        self.base_weights = weights if weights is not None else ScoreWeights()
        self.weights = apply_ablation(self.base_weights, ablation)
        self.mode = mode
        self.ablation = ablation
        self.registers = int(registers)
        self.layers = [LayerCache(i, int(b), self.registers, key_dim) for i, b in enumerate(plan.budgets)]
        self.metadata: dict = {}
        self.evaluations = 0
        self.num_patches: Optional[int] = None
        self._pred_pose: dict = {}
        self._successor: dict = {}
        self._last_index: Optional[int] = None
        self._last_pose: Optional[Pose] = None
        self._key_dim = key_dim

    # -- public API ---------------------------------------------------------

    @property
    def tokens_per_frame(self) -> int:
        return 1 + self.registers + (self.num_patches or 0)

    def step(self, frame: FrameMeta) -> EvictionStepResult:
        return self._step(frame, incremental=True)

    def step_full_recompute(self, frame: FrameMeta) -> EvictionStepResult:
        return self._step(frame, incremental=False)

    def lazy_update_metadata(self, frame_index: int, **outputs) -> None:
        """Attach late geometry outputs (pose, depth, confidences) to a retained frame."""
        if frame_index not in self.metadata:
            raise UnknownFrameError(f"unknown frame {frame_index}")
        allowed = {"pose", "depth", "depth_conf", "point_conf", "features", "saliency"}
        bad = set(outputs) - allowed
        if bad:
            raise ValidationError(sorted(bad)[0], "not a geometry output")
        old = self.metadata[frame_index]
        if "features" in outputs and "saliency" not in outputs:
            outputs["saliency"] = None
        elif "saliency" in outputs and "features" not in outputs:
            outputs["features"] = None
        new = old.replace(**outputs)
        if new.num_patches != self.num_patches:
            raise ValidationError("features", "patch grid changed")
        self.metadata[frame_index] = new
        cam, geo, raw = self._raw_for(frame_index)
        for layer in self.layers:
            if layer.raw is None or frame_index not in layer.frame_raw:
                continue
            layer.frame_raw[frame_index] = (cam, geo)
            sel = (layer.frames == frame_index) & (layer.ranks > self.registers)
            pidx = layer.ranks[sel] - 1 - self.registers
            for name, arr in layer.raw.items():
                arr[sel] = raw[name][pidx]
        if new.pose != old.pose:
            if frame_index == self._last_index:
                self._last_pose = new.pose
            succ = self._successor.get(frame_index)
            if succ is not None and succ in self.metadata:
                self._pred_pose[succ] = new.pose
                s_cam, s_geo, _ = self._raw_for(succ, patches=False)
                for layer in self.layers:
                    if layer.raw is not None and succ in layer.frame_raw:
                        layer.frame_raw[succ] = (s_cam, s_geo)

    def check_invariants(self) -> None:
        referenced = set()
        for layer in self.layers:
            layer.check_invariants()
            referenced.update(layer.frame_set().tolist())
        if referenced != set(self.metadata):
            raise AssertionError("metadata does not match referenced frames")

    # -- internals ----------------------------------------------------------

    def _raw_for(self, frame_index: int, patches: bool = True):
        meta = self.metadata[frame_index]
        fr = frame_raw_scores(meta, self._pred_pose.get(frame_index))
        self.evaluations += 1
        raw = None
        if patches:
            raw = patch_raw_scores(meta).flat()
            self.evaluations += raw["sal"].shape[0]
        return fr.s_cam_raw, fr.s_geo_raw, raw

    def _token_raw(self, frame_index: int, ranks: np.ndarray, memo: dict) -> dict:
        if frame_index not in memo:
            memo[frame_index] = self._raw_for(frame_index)
        _, _, raw = memo[frame_index]
        out = {}
        patch = ranks > self.registers
        pidx = ranks[patch] - 1 - self.registers
        for name, arr in raw.items():
            col = np.full(ranks.shape[0], np.nan)
            col[patch] = arr[pidx]
            out[name] = col
        return out

    def _rebuild_raw(self, layer: LayerCache, memo: dict):
        """Raw-score columns for every token in ``layer``, recomputed from metadata."""
        frames = layer.frame_set()
        starts = np.searchsorted(layer.frames, frames, side="left")
        ends = np.searchsorted(layer.frames, frames, side="right")
        cols = {"sal": [], "dc": [], "pc": []}
        frame_raw = {}
        for f, a, b in zip(frames.tolist(), starts, ends):
            part = self._token_raw(f, layer.ranks[a:b], memo)
            for name in cols:
                cols[name].append(part[name])
            cam, geo, _ = memo[f]
            frame_raw[f] = (cam, geo)
        raw = {name: (np.concatenate(v) if v else np.empty(0)) for name, v in cols.items()}
        return raw, frame_raw

    def _validate_incoming(self, frame: FrameMeta) -> None:
        if self._last_index is not None and frame.frame_index <= self._last_index:
            raise FrameOrderError(
                f"frame {frame.frame_index} is not after the last cached frame {self._last_index}")
        if self.num_patches is None:
            self.num_patches = frame.num_patches
        elif frame.num_patches != self.num_patches:
            raise ValidationError("features", f"frame {frame.frame_index} has {frame.num_patches} patches, "
                                              f"expected {self.num_patches}")
        if self._key_dim:
            if frame.keys is None:
                raise ValidationError("keys", f"frame {frame.frame_index} has no key vectors")
            if frame.keys.shape != (self.tokens_per_frame, self._key_dim):
                raise ValidationError("keys", f"expected key block {(self.tokens_per_frame, self._key_dim)}, "
                                              f"got {frame.keys.shape}")

    def _step(self, frame: FrameMeta, incremental: bool) -> EvictionStepResult:
        t0 = time.perf_counter()
        self._validate_incoming(frame)
        t = frame.frame_index
        self.metadata[t] = frame
        self._pred_pose[t] = self._last_pose
        if self._last_index is not None:
            self._successor[self._last_index] = t
        ranks = frame_token_ranks(self.num_patches, self.registers)
        memo: dict = {}
        incoming = None
        if self.uses_scores:
            memo[t] = self._raw_for(t)
            cam, geo, _ = memo[t]
            incoming = _Incoming(t, ranks, self._token_raw(t, ranks, memo), (cam, geo))
        else:
            incoming = _Incoming(t, ranks, {}, (0.0, 0.0))
        if self._key_dim:
            incoming.keys = np.asarray(frame.keys, dtype=np.float64)

        ev_frames, ev_ranks, counts, pre, post = [], [], [], [], []
        for layer in self.layers:
            if len(layer) <= layer.budget:
                ev_frames.append(np.empty(0, dtype=np.int64))
                ev_ranks.append(np.empty(0, dtype=np.int64))
            else:
                mask = self._evict_layer(layer, incoming, incremental, memo)
                ev_frames.append(layer.frames[~mask])
                ev_ranks.append(layer.ranks[~mask])
                layer.keep(mask)
            if not incremental:
                layer.raw = None
                layer.frame_raw = None
            counts.append(layer.counts())
            pre.append(len(layer))

        for layer in self.layers:
            layer.append(t, ranks, keys=incoming.keys, raw=incoming.raw, frame_raw=incoming.frame_raw)
            post.append(len(layer))

        self._last_index = t
        self._last_pose = frame.pose
        self._collect_garbage()
        return EvictionStepResult(t, self.registers, ev_frames, ev_ranks, counts, pre, post,
                                  time.perf_counter() - t0)

    def _collect_garbage(self) -> None:
        referenced = set()
        for layer in self.layers:
            referenced.update(layer.frame_set().tolist())
        for f in [f for f in self.metadata if f not in referenced]:
            del self.metadata[f]
            self._pred_pose.pop(f, None)
            self._successor.pop(f, None)

    def _evict_layer(self, layer: LayerCache, incoming: _Incoming, incremental: bool, memo: dict) -> np.ndarray:
        if incremental and layer.raw is not None:
            raw, frame_raw = layer.raw, layer.frame_raw
        else:
            raw, frame_raw = self._rebuild_raw(layer, memo)
            if incremental:
                layer.raw, layer.frame_raw = raw, frame_raw
        scores = self.candidate_scores(layer, raw, frame_raw, incoming)
        return self._select(layer, scores)

    def candidate_scores(self, layer: LayerCache, raw: dict, frame_raw: dict,
                         incoming: _Incoming) -> np.ndarray:
        """Final scores of the cached tokens, normalized jointly with the incoming frame."""
        w = self.weights
        R = self.registers
        t = incoming.frame_index
        frames = np.concatenate([layer.frames, np.full(incoming.ranks.shape[0], t, dtype=np.int64)])
        ranks = np.concatenate([layer.ranks, incoming.ranks])
        uniq = np.append(layer.frame_set(), t)
        cam = np.array([frame_raw[f][0] for f in uniq[:-1].tolist()] + [incoming.frame_raw[0]])
        geo = np.array([frame_raw[f][1] for f in uniq[:-1].tolist()] + [incoming.frame_raw[1]])
        temp = (uniq + 1) / (t + 1)
        s_frame = frame_score_values(cam, geo, temp, w)[np.searchsorted(uniq, frames)]

        scores = np.empty(frames.shape[0])
        patch = ranks > R
        if np.any(patch):
            sal = np.concatenate([raw["sal"], incoming.raw["sal"]])[patch]
            dc = np.concatenate([raw["dc"], incoming.raw["dc"]])[patch]
            pc = np.concatenate([raw["pc"], incoming.raw["pc"]])[patch]
            s_token = token_score_values(sal, dc, pc, w)
            scores[patch] = w.w_f * s_frame[patch] + w.w_k * s_token
        special = ~patch
        scores[special] = s_frame[special] + w.delta_boost + w.eps_tb * ranks[special]
        return minmax_values(scores)[: len(layer)]

    def _select(self, layer: LayerCache, scores: np.ndarray) -> np.ndarray:
        if self.mode == "standard":
            return topk_mask(scores, layer.budget)
        special = layer.special_mask
        n_special = int(np.count_nonzero(special))
        mask = np.zeros(len(layer), dtype=bool)
        if n_special > layer.budget:
            log.info("layer %d: %d protected tokens exceed budget %d; specials compete",
                        layer.layer_index, n_special, layer.budget)
            idx = np.flatnonzero(special)
            mask[idx[topk_mask(scores[idx], layer.budget)]] = True
            return mask
        mask[special] = True
        idx = np.flatnonzero(~special)
        mask[idx[topk_mask(scores[idx], layer.budget - n_special)]] = True
        return mask
