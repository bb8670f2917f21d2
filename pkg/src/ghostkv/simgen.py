"""Synthetic frame streams, experiment driver and correlation tooling.

Streams are rendered from a fixed world heightfield seen by a moving
camera, so frames taken from nearby poses have nearly identical depth.
All grids are float32-representable so traces round-trip bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import pdist
from scipy.stats import rankdata

from .baselines import PolicyConfig, make_engine
from .budget import BudgetPlan
from .core import DEFAULT_REGISTERS, FrameMeta, Pose, ScoreWeights, ValidationError
from .scoring import camera_change, depth_gradient_variance, patch_raw_scores

MOTIONS = ("orbit", "corridor", "loiter_then_move", "random_walk")
TEXTURES = ("flat", "ramp", "blobs", "mixed")


@dataclass(frozen=True)
class TrajectoryConfig:
    length: int = 60
    motion: str = "orbit"
    radius: float = 3.0
    step: float = 0.15
    loiter_span: int = 10
    depth_texture: str = "mixed"
    noise_seed: int = 0
    height: int = 48
    width: int = 48
    patch_h: int = 24
    patch_w: int = 24
    feature_dim: int = 8
    registers: int = DEFAULT_REGISTERS
    key_dim: int = 16
    conf_mean: float = 0.75
    conf_spread: float = 0.15
    conf_edge_drop: float = 2.0

    def __post_init__(self):
        if self.length < 2:
            raise ValidationError("length", "need at least two frames")
        if self.motion not in MOTIONS:
            raise ValidationError("motion", f"unknown motion {self.motion!r}")
        if self.depth_texture not in TEXTURES:
            raise ValidationError("depth_texture", f"unknown texture {self.depth_texture!r}")
        if min(self.height, self.width) < 2 or min(self.patch_h, self.patch_w) < 2:
            raise ValidationError("patch_h", "grids must be at least 2x2")
        if self.patch_h > self.height or self.patch_w > self.width:
            raise ValidationError("patch_h", "patch grid larger than depth grid")
        if self.feature_dim < 1 or self.key_dim < 1 or self.registers < 0:
            raise ValidationError("feature_dim", "dimensions must be positive")
        if not 0 <= self.noise_seed < 2 ** 64:
            raise ValidationError("noise_seed", "must be a 64-bit unsigned integer")

    @property
    def tokens_per_frame(self) -> int:
        return 1 + self.registers + self.patch_h * self.patch_w

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrajectoryConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValidationError(sorted(unknown)[0], "unknown trajectory field")
        return cls(**data)


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


def _yaw_quat(theta: float) -> tuple:
    return (math.cos(theta / 2), 0.0, math.sin(theta / 2), 0.0)


def _poses(cfg: TrajectoryConfig) -> list:
    rng = _rng(cfg.noise_seed, 1)
    out = []
    if cfg.motion == "orbit":
        for t in range(cfg.length):
            th = cfg.step * t
            out.append(Pose((cfg.radius * math.cos(th), 0.0, cfg.radius * math.sin(th)), _yaw_quat(-th)))
    elif cfg.motion == "corridor":
        for t in range(cfg.length):
            lat = 0.05 * rng.standard_normal()
            out.append(Pose((lat, 0.0, cfg.step * t), _yaw_quat(0.02 * rng.standard_normal())))
    elif cfg.motion == "loiter_then_move":
        x = 0.0
        for t in range(cfg.length):
            if t < cfg.loiter_span:
                jit = 1e-5 * rng.standard_normal(3)
                out.append(Pose(tuple(jit), _yaw_quat(1e-5 * rng.standard_normal())))
            else:
                x += cfg.step
                out.append(Pose((x, 0.0, 0.0), _yaw_quat(0.3 * math.sin(0.2 * (t - cfg.loiter_span)))))
    else:
        pos = np.zeros(3)
        yaw = 0.0
        for t in range(cfg.length):
            if t:
                pos = pos + cfg.step * rng.standard_normal(3) * np.array([1.0, 0.2, 1.0])
                yaw += 0.1 * rng.standard_normal()
            out.append(Pose(tuple(pos), _yaw_quat(yaw)))
    return out


class _Scene:
    """World heightfield sampled through each camera's footprint."""

    def __init__(self, cfg: TrajectoryConfig):
        rng = _rng(cfg.noise_seed, 2)
        self.texture = cfg.depth_texture
        n = 40
        self.centers = rng.uniform(-6, 6 + cfg.step * cfg.length, size=(n, 2))
        self.amps = rng.uniform(0.2, 1.2, size=n)
        self.widths = rng.uniform(0.15, 0.8, size=n)
        self.boxes = rng.uniform(-6, 6 + cfg.step * cfg.length, size=(12, 2))
        self.slope = rng.uniform(0.1, 0.4, size=2)

    def depth(self, wx: np.ndarray, wz: np.ndarray) -> np.ndarray:
        base = np.full(wx.shape, 2.0)
        if self.texture == "flat":
            return base
        ramp = self.slope[0] * wx + self.slope[1] * wz
        if self.texture == "ramp":
            return np.maximum(base + 0.1 * ramp, 0.0)
        bumps = np.zeros(wx.shape)
        for (cx, cz), a, s in zip(self.centers, self.amps, self.widths):
            bumps += a * np.exp(-((wx - cx) ** 2 + (wz - cz) ** 2) / (2 * s * s))
        if self.texture == "blobs":
            return base + bumps
        steps = np.zeros(wx.shape)
        for bx, bz in self.boxes:
            steps += 0.5 * ((np.abs(wx - bx) < 0.6) & (np.abs(wz - bz) < 0.4))
        return np.maximum(base + bumps + steps + 0.05 * np.sin(ramp * 3.0), 0.0)


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32)


def _render(cfg: TrajectoryConfig, scene: _Scene, pose: Pose, t: int, key_basis) -> FrameMeta:
    h, w = cfg.height, cfg.width
    q = pose.unit_quaternion()
    yaw = 2 * math.atan2(q[2], q[0])
    u = (np.arange(w) - (w - 1) / 2) * (3.0 / w)
    v = (np.arange(h) - (h - 1) / 2) * (3.0 / h)
    uu, vv = np.meshgrid(u, v)
    c, s = math.cos(yaw), math.sin(yaw)
    wx = pose.translation[0] + c * uu - s * vv
    wz = pose.translation[2] + s * uu + c * vv
    depth = scene.depth(wx, wz)

    rng = _rng(cfg.noise_seed, 3, t)
    gy, gx = np.gradient(depth)
    edge = np.sqrt(gx * gx + gy * gy)
    dc = cfg.conf_mean - cfg.conf_edge_drop * edge + cfg.conf_spread * rng.standard_normal((h, w))
    pc = cfg.conf_mean - 0.5 * cfg.conf_edge_drop * edge + cfg.conf_spread * rng.standard_normal((h, w))

    hp, wp = cfg.patch_h, cfg.patch_w
    rows = np.array_split(np.arange(h), hp)
    cols = np.array_split(np.arange(w), wp)
    pooled = np.array([[depth[np.ix_(r, cc)].mean() for cc in cols] for r in rows])
    chan = [pooled]
    for k in range(1, cfg.feature_dim):
        chan.append(np.sin(k * pooled + 0.3 * k) + 0.02 * rng.standard_normal((hp, wp)))
    features = np.stack(chan, axis=2)

    keys = None
    if key_basis is not None:
        base, (omega, phase) = key_basis
        # random Fourier features: emb(a) . emb(b) ~ exp(-|Ta - Tb|^2 / 2)
        emb = np.cos(omega @ np.asarray(pose.translation) + phase)
        emb /= np.linalg.norm(emb) + 1e-12
        noise = rng.standard_normal(base.shape)
        raw = 0.5 * base + emb[None, :] + 0.1 * noise
        keys = raw / np.linalg.norm(raw, axis=1, keepdims=True)

    return FrameMeta(
        frame_index=t,
        pose=Pose(tuple(float(np.float32(x)) for x in pose.translation),
                  tuple(float(np.float32(x)) for x in pose.quaternion), pose.focal),
        depth=_f32(depth),
        depth_conf=_f32(np.clip(dc, 0.0, 1.0)),
        point_conf=_f32(np.clip(pc, 0.0, 1.0)),
        features=_f32(features),
        keys=None if keys is None else _f32(keys),
    )


def generate_stream(config: TrajectoryConfig, with_keys: bool = True) -> list:
    """Deterministic stream of FrameMeta for ``config``."""
    scene = _Scene(config)
    key_basis = None
    if with_keys:
        rng = _rng(config.noise_seed, 4)
        base = rng.standard_normal((config.tokens_per_frame, config.key_dim))
        base /= np.linalg.norm(base, axis=1, keepdims=True)
        omega = rng.standard_normal((config.key_dim, 3))
        phase = rng.uniform(0, 2 * np.pi, config.key_dim)
        key_basis = (base, (omega, phase))
    return [_render(config, scene, pose, t, key_basis) for t, pose in enumerate(_poses(config))]


def seed_battery(base: TrajectoryConfig, n: int = 20, first_seed: int = 0) -> list:
    return [TrajectoryConfig(**{**base.to_dict(), "noise_seed": first_seed + i}) for i in range(n)]


# -- experiments -------------------------------------------------------------

@dataclass
class CoverageReport:
    pose_dispersion: float
    retained_depth_variance_mass: float
    retained_confidence_mass: float
    special_survival_rate: float
    reference_layer: int
    layer_mean: dict = field(default_factory=dict)
    occupancy: list = field(default_factory=list)   # per layer, post-eviction size per step
    dispersion_series: list = field(default_factory=list)   # reference layer, after each step

    def to_dict(self) -> dict:
        return asdict(self)


class _StreamTable:
    """Per-frame quantities of the full stream, computed independently of any engine."""

    def __init__(self, stream: Sequence[FrameMeta], registers: int):
        self.registers = registers
        self.translation = {f.frame_index: np.asarray(f.pose.translation) for f in stream}
        self.geo = {f.frame_index: depth_gradient_variance(f.depth) for f in stream}
        self.conf = {}
        for f in stream:
            pr = patch_raw_scores(f)
            self.conf[f.frame_index] = (pr.depth_conf_patch + pr.point_conf_patch).ravel()
        self.num_patches = stream[0].num_patches
        self.total_geo = sum(self.geo.values())
        self.total_conf = float(sum(c.sum() for c in self.conf.values()))


def _ratio(num: float, den: float) -> float:
    # nothing to lose counts as full retention
    return 1.0 if den <= 0 else min(1.0, max(0.0, num / den))


def _dispersion(layer, table: _StreamTable) -> float:
    pts = np.array([table.translation[f] for f in layer.frame_set().tolist()]).reshape(-1, 3)
    return float(pdist(pts).mean()) if pts.shape[0] >= 2 else 0.0


def _layer_coverage(layer, table: _StreamTable) -> dict:
    frames = layer.frame_set()
    dispersion = _dispersion(layer, table)
    patch = layer.ranks > table.registers
    geo_kept = 0.0
    conf_kept = 0.0
    for f in frames.tolist():
        sel = patch & (layer.frames == f)
        pidx = layer.ranks[sel] - 1 - table.registers
        geo_kept += table.geo[f] * (pidx.size / table.num_patches)
        conf_kept += float(table.conf[f][pidx].sum())
    specials = int(np.count_nonzero(~patch))
    return {
        "pose_dispersion": dispersion,
        "retained_depth_variance_mass": _ratio(geo_kept, table.total_geo),
        "retained_confidence_mass": _ratio(conf_kept, table.total_conf),
        "special_survival_rate": _ratio(specials, layer.specials_appended),
    }


def run_experiment(stream: Sequence[FrameMeta], policy: Union[PolicyConfig, str], plan: BudgetPlan,
                   weights: Optional[ScoreWeights] = None, *, mode: str = "standard",
                   ablation: str = "full", registers: int = DEFAULT_REGISTERS,
                   reference_layer: Optional[int] = None, engine=None):
    """Drive one policy over ``stream``; returns (step results, CoverageReport)."""
    if isinstance(policy, str):
        policy = PolicyConfig(policy)
    if not stream:
        raise ValidationError("stream", "empty stream")
    shapes = {(f.depth.shape, f.patch_shape) for f in stream}
    if len(shapes) != 1:
        raise ValidationError("stream", "frames disagree on grid dimensions")
    key_dim = stream[0].keys.shape[1] if stream[0].keys is not None else 16
    if engine is None:
        engine = make_engine(policy, plan, weights, registers=registers, mode=mode,
                             ablation=ablation, key_dim=key_dim)
    table = _StreamTable(stream, engine.registers)
    if reference_layer is None:
        reference_layer = int(np.argmax(engine.plan.budgets))
    results, series = [], []
    for frame in stream:
        results.append(engine.step(frame))
        series.append(_dispersion(engine.layers[reference_layer], table))
    per_layer = [_layer_coverage(layer, table) for layer in engine.layers]
    ref = per_layer[reference_layer]
    layer_mean = {k: float(np.mean([p[k] for p in per_layer])) for k in ref}
    occupancy = [[r.pre_append[i] for r in results] for i in range(len(engine.layers))]
    report = CoverageReport(reference_layer=reference_layer, layer_mean=layer_mean,
                            occupancy=occupancy, dispersion_series=series, **ref)
    return results, report


# -- correlation tooling -------------------------------------------------------

def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties.

    Returns NaN when either input is constant (correlation undefined).
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError("ys", f"length mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValidationError("xs", "need at least two observations")
    rx = rankdata(x) - (x.size + 1) / 2
    ry = rankdata(y) - (y.size + 1) / 2
    den = math.sqrt(float(np.dot(rx, rx)) * float(np.dot(ry, ry)))
    if den == 0:
        return math.nan
    return max(-1.0, min(1.0, float(np.dot(rx, ry)) / den))


def _mean_keys(frame: FrameMeta) -> np.ndarray:
    k = np.asarray(frame.keys, dtype=np.float64).mean(axis=0)
    return k / np.linalg.norm(k)


def _key_similarity_signal(stream):
    query = _mean_keys(stream[-1])
    return np.array([float(_mean_keys(f) @ query) for f in stream])


def _camera_change_signal(stream):
    return np.array([0.0] + [camera_change(b.pose, a.pose) for a, b in zip(stream, stream[1:])])


SIGNALS: dict = {
    "camera_change": _camera_change_signal,
    "depth_gradient_variance": lambda s: np.array([depth_gradient_variance(f.depth) for f in s]),
    "key_similarity": _key_similarity_signal,
    "temporal_recency": lambda s: np.arange(1, len(s) + 1) / len(s),
    "mean_saliency": lambda s: np.array([patch_raw_scores(f).s_sal_raw.mean() for f in s]),
    "mean_confidence": lambda s: np.array([f.depth_conf.mean() + f.point_conf.mean() for f in s]),
}


def frame_signal(stream: Sequence[FrameMeta], signal: Union[str, Callable]) -> np.ndarray:
    """Per-frame series for a named signal, ``random:<seed>``, or a callable."""
    if callable(signal):
        return np.asarray(signal(stream), dtype=np.float64)
    if signal.startswith("random:"):
        return _rng(int(signal.split(":", 1)[1]), 5).random(len(stream))
    if signal not in SIGNALS:
        raise ValidationError("signal", f"unknown signal {signal!r}; valid: {', '.join(SIGNALS)}")
    if signal == "key_similarity" and stream[0].keys is None:
        raise ValidationError("signal", "stream has no key vectors")
    return SIGNALS[signal](stream)


def correlation_study(stream: Sequence[FrameMeta], score_a, score_b) -> float:
    return spearman(frame_signal(stream, score_a), frame_signal(stream, score_b))


def synthetic_activation_samples(rho_targets: Sequence[float], samples: int = 8, dim: int = 64,
                                 seed: int = 0) -> list:
    """(input, output) pairs per layer whose cosine equals each target exactly up to rounding."""
    rng = _rng(seed, 6)
    layers = []
    for rho in rho_targets:
        pairs = []
        for _ in range(samples):
            x = rng.standard_normal(dim)
            x /= np.linalg.norm(x)
            z = rng.standard_normal(dim)
            z -= (z @ x) * x
            z /= np.linalg.norm(z)
            y = rho * x + math.sqrt(max(0.0, 1 - rho * rho)) * z
            pairs.append((x * 3.0, y * 2.0))
        layers.append(pairs)
    return layers
