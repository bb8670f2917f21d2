"""Frame-level and token-level importance scores.

Scoring is split in two stages.  Raw signals (camera change, depth-gradient
variance, feature saliency, pooled confidences) depend on one frame only
and are what the engine caches.  Normalized scores depend on the whole
candidate set and are recomputed every step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
from scipy.special import expit

from .core import DegenerateInputError, FrameMeta, Pose, ScoreWeights, ValidationError


@dataclass(frozen=True)
class FrameRawScores:
    s_cam_raw: float
    s_geo_raw: float
    s_temp_raw: float = 1.0


@dataclass(frozen=True, eq=False)
class PatchRawScores:
    """Per-patch raw signals, each an H_p x W_p grid."""

    s_sal_raw: np.ndarray
    depth_conf_patch: np.ndarray
    point_conf_patch: np.ndarray

    def __post_init__(self):
        shapes = {self.s_sal_raw.shape, self.depth_conf_patch.shape, self.point_conf_patch.shape}
        if len(shapes) != 1:
            raise ValidationError("PatchRawScores", f"grid shapes differ: {sorted(shapes)}")

    def flat(self) -> dict:
        return {
            "sal": self.s_sal_raw.ravel().astype(np.float64),
            "dc": self.depth_conf_patch.ravel().astype(np.float64),
            "pc": self.point_conf_patch.ravel().astype(np.float64),
        }


def sigmoid(x, scale: float = 1.0):
    return expit(np.multiply(x, scale))


# -- raw signals -------------------------------------------------------------

def camera_change(pose_t: Pose, pose_prev: Pose) -> float:
    """Translation distance plus one minus |cos| of the unit quaternions."""
    dt = np.subtract(pose_t.translation, pose_prev.translation)
    dot = float(np.dot(pose_t.unit_quaternion(), pose_prev.unit_quaternion()))
    # |dot| can exceed 1 by an ulp for identical quaternions
    return float(np.linalg.norm(dt)) + 1.0 - min(abs(dot), 1.0)


def _forward_diff(grid: np.ndarray, axis: int) -> np.ndarray:
    """Forward difference along ``axis`` with a zero difference at the trailing edge."""
    out = np.zeros_like(grid, dtype=np.float64)
    src = grid.astype(np.float64, copy=False)
    if axis == 0:
        out[:-1] = src[1:] - src[:-1]
    else:
        out[:, :-1] = src[:, 1:] - src[:, :-1]
    return out


def depth_gradient_variance(depth: np.ndarray) -> float:
    """Population variance of the forward-difference gradient magnitude."""
    depth = np.asarray(depth)
    if depth.ndim != 2 or depth.shape[0] < 2 or depth.shape[1] < 2:
        raise DegenerateInputError(f"depth grid must be at least 2x2, got {depth.shape}")
    gy = _forward_diff(depth, 0)
    gx = _forward_diff(depth, 1)
    return float(np.var(np.sqrt(gx * gx + gy * gy)))


def temporal_recency(t: int, t_cur: int) -> float:
    if t_cur <= 0 or t < 1 or t > t_cur:
        raise ValidationError("t", f"need 1 <= t <= t_cur, got t={t}, t_cur={t_cur}")
    return t / t_cur


def feature_saliency(features: np.ndarray) -> np.ndarray:
    """Per-patch spatial gradient magnitude of an H_p x W_p x d feature map."""
    features = np.asarray(features)
    if features.ndim == 2:
        features = features[:, :, None]
    if features.ndim != 3 or features.shape[0] < 2 or features.shape[1] < 2:
        raise DegenerateInputError(f"feature grid must be at least 2x2, got {features.shape[:2]}")
    dy = _forward_diff(features, 0)
    dx = _forward_diff(features, 1)
    return np.sqrt(np.sum(dx * dx, axis=2) + np.sum(dy * dy, axis=2))


def _adaptive_bounds(n_in: int, n_out: int) -> list:
    return [((i * n_in) // n_out, -((-(i + 1) * n_in) // n_out)) for i in range(n_out)]


def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    for i, (lo, hi) in enumerate(_adaptive_bounds(n_in, n_out)):
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def pool_confidence(conf: np.ndarray, target: tuple) -> np.ndarray:
    """Adaptive average pooling of an H x W grid down to ``target``."""
    conf = np.asarray(conf, dtype=np.float64)
    hp, wp = target
    h, w = conf.shape
    if hp > h or wp > w or hp < 1 or wp < 1:
        raise ValidationError("target", f"cannot pool {conf.shape} to {target}")
    if (h, w) == (hp, wp):
        return conf.copy()
    # separable: rows then columns, each an averaging matrix
    out = _pool_matrix(h, hp) @ conf @ _pool_matrix(w, wp).T
    return np.clip(out, 0.0, 1.0)


def patch_raw_scores(meta: FrameMeta) -> PatchRawScores:
    hp, wp = meta.patch_shape
    if meta.features is not None:
        sal = feature_saliency(meta.features)
    else:
        sal = np.asarray(meta.saliency, dtype=np.float64)
    return PatchRawScores(
        s_sal_raw=sal,
        depth_conf_patch=pool_confidence(meta.depth_conf, (hp, wp)),
        point_conf_patch=pool_confidence(meta.point_conf, (hp, wp)),
    )


def frame_raw_scores(meta: FrameMeta, prev_pose: Optional[Pose]) -> FrameRawScores:
    """Cacheable frame-level signals; the first frame of a stream has no camera change."""
    cam = 0.0 if prev_pose is None else camera_change(meta.pose, prev_pose)
    return FrameRawScores(s_cam_raw=cam, s_geo_raw=depth_gradient_variance(meta.depth))


# -- normalized scores --------------------------------------------------------

def frame_score_values(cam, geo, temp, weights: ScoreWeights) -> np.ndarray:
    """Vector form of the normalized frame score over one candidate set."""
    sc = weights.signal_scales
    s = (weights.w_cam * sigmoid(cam, sc[0])
         + weights.w_geo * sigmoid(geo, sc[1])
         + weights.w_temp * sigmoid(temp, sc[2]))
    s = np.asarray(s, dtype=np.float64)
    return s / (s.max() + weights.eps_norm)


def token_score_values(sal, dc, pc, weights: ScoreWeights) -> np.ndarray:
    """Vector form of the normalized token score; one global maximum."""
    sc = weights.signal_scales
    s = (weights.w_sal * sigmoid(sal, sc[3])
         + weights.w_dc * sigmoid(dc, sc[4])
         + weights.w_pc * sigmoid(pc, sc[5]))
    s = np.asarray(s, dtype=np.float64)
    return s / (s.max() + weights.eps_norm)


def frame_scores(raw: Mapping[int, FrameRawScores], weights: ScoreWeights) -> dict:
    if not raw:
        raise DegenerateInputError("frame_scores needs at least one frame")
    frames = list(raw)
    vals = frame_score_values(
        np.array([raw[f].s_cam_raw for f in frames], dtype=np.float64),
        np.array([raw[f].s_geo_raw for f in frames], dtype=np.float64),
        np.array([raw[f].s_temp_raw for f in frames], dtype=np.float64),
        weights,
    )
    return dict(zip(frames, vals.tolist()))


def token_scores(raw: Mapping[int, PatchRawScores], weights: ScoreWeights) -> dict:
    """Map (frame, patch index) to the normalized token score."""
    if not raw:
        raise DegenerateInputError("token_scores needs at least one frame")
    frames = list(raw)
    flats = [raw[f].flat() for f in frames]
    vals = token_score_values(
        np.concatenate([fl["sal"] for fl in flats]),
        np.concatenate([fl["dc"] for fl in flats]),
        np.concatenate([fl["pc"] for fl in flats]),
        weights,
    )
    out = {}
    i = 0
    for f, fl in zip(frames, flats):
        for p in range(fl["sal"].shape[0]):
            out[(f, p)] = float(vals[i])
            i += 1
    return out


def combined_score(s_frame, s_token, weights: ScoreWeights):
    return weights.w_f * s_frame + weights.w_k * s_token


def special_boost(s_frame, rank: int, weights: ScoreWeights, registers: Optional[int] = None):
    """Boosted score of a camera (rank 0) or register (rank 1..R) token."""
    if rank < 0 or (registers is not None and rank > registers):
        raise ValidationError("rank", f"special rank {rank} out of range")
    return s_frame + weights.delta_boost + weights.eps_tb * rank


def minmax_values(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.ones_like(x)
    return (x - lo) / (hi - lo)


def final_renormalize(scores: Mapping) -> dict:
    """Min-max rescale to [0, 1]; a constant input maps to all ones."""
    if not scores:
        raise DegenerateInputError("final_renormalize needs at least one score")
    keys = list(scores)
    vals = minmax_values(np.fromiter((scores[k] for k in keys), dtype=np.float64, count=len(keys)))
    return dict(zip(keys, vals.tolist()))
