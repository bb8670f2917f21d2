"""Domain types shared across the package.

Everything here is immutable except :class:`LayerCache`, which the engine
owns and mutates one layer at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

DEFAULT_REGISTERS = 4
DEFAULT_PATCH_GRID = (24, 24)
# one full frame: camera + registers + patches
DEFAULT_FRAME_TOKENS = 1 + DEFAULT_REGISTERS + DEFAULT_PATCH_GRID[0] * DEFAULT_PATCH_GRID[1]

KIND_CAMERA = "camera"
KIND_REGISTER = "register"
KIND_PATCH = "patch"
_KIND_ORDER = {KIND_CAMERA: 0, KIND_REGISTER: 1, KIND_PATCH: 2}


class GhostError(Exception):
    """Base class for all errors raised by this package."""

    code = "E_GHOST"


class ValidationError(GhostError, ValueError):
    code = "E_VALIDATION"

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class DegenerateInputError(GhostError, ValueError):
    code = "E_DEGENERATE"


def _as_grid(value, name: str, ndim: int) -> np.ndarray:
    arr = np.asarray(value)
    if arr.ndim != ndim:
        raise ValidationError(name, f"expected {ndim}-d grid, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(name, "non-finite values")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Pose:
    """Camera pose: translation, quaternion (any nonzero norm) and focal length."""

    translation: tuple
    quaternion: tuple
    focal: float = 1.0

    def __post_init__(self):
        t = tuple(float(v) for v in self.translation)
        q = tuple(float(v) for v in self.quaternion)
        if len(t) != 3:
            raise ValidationError("pose.translation", "expected 3 components")
        if len(q) != 4:
            raise ValidationError("pose.quaternion", "expected 4 components")
        if not all(math.isfinite(v) for v in t + q):
            raise ValidationError("pose", "non-finite component")
        if math.sqrt(sum(v * v for v in q)) == 0.0:
            raise ValidationError("pose.quaternion", "zero-norm quaternion")
        focal = float(self.focal)
        if not focal > 0:
            raise ValidationError("pose.focal", "focal must be positive")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "quaternion", q)
        object.__setattr__(self, "focal", focal)

    def unit_quaternion(self) -> np.ndarray:
        q = np.asarray(self.quaternion, dtype=np.float64)
        return q / np.linalg.norm(q)


@dataclass(frozen=True, eq=False)
class FrameMeta:
    """Per-frame geometry bundle consumed by the scorers.

    Exactly one of ``features`` (H_p x W_p x d) or ``saliency`` (H_p x W_p)
    is given. ``keys`` holds one vector per token and is only used by the
    key-similarity baseline.
    """

    frame_index: int
    pose: Pose
    depth: np.ndarray
    depth_conf: np.ndarray
    point_conf: np.ndarray
    features: Optional[np.ndarray] = None
    saliency: Optional[np.ndarray] = None
    keys: Optional[np.ndarray] = None

    def __post_init__(self):
        if isinstance(self.frame_index, bool) or int(self.frame_index) != self.frame_index:
            raise ValidationError("frame_index", "must be an integer")
        if self.frame_index < 0:
            raise ValidationError("frame_index", "must be nonnegative")
        object.__setattr__(self, "frame_index", int(self.frame_index))
        if not isinstance(self.pose, Pose):
            raise ValidationError("pose", "expected a Pose")
        for name in ("depth", "depth_conf", "point_conf"):
            object.__setattr__(self, name, _as_grid(getattr(self, name), name, 2))
        if (self.features is None) == (self.saliency is None):
            raise ValidationError("features", "exactly one of features/saliency must be given")
        if self.features is not None:
            object.__setattr__(self, "features", _as_grid(self.features, "features", 3))
        else:
            object.__setattr__(self, "saliency", _as_grid(self.saliency, "saliency", 2))
        if self.keys is not None:
            object.__setattr__(self, "keys", _as_grid(self.keys, "keys", 2))
        validate_frame(self)

    @property
    def shape(self) -> tuple:
        return self.depth.shape

    @property
    def patch_shape(self) -> tuple:
        grid = self.features if self.features is not None else self.saliency
        return grid.shape[:2]

    @property
    def num_patches(self) -> int:
        hp, wp = self.patch_shape
        return hp * wp

    def replace(self, **changes) -> "FrameMeta":
        fields = {
            "frame_index": self.frame_index,
            "pose": self.pose,
            "depth": self.depth,
            "depth_conf": self.depth_conf,
            "point_conf": self.point_conf,
            "features": self.features,
            "saliency": self.saliency,
            "keys": self.keys,
        }
        fields.update(changes)
        return FrameMeta(**fields)

    def __eq__(self, other):
        if not isinstance(other, FrameMeta):
            return NotImplemented
        if self.frame_index != other.frame_index or self.pose != other.pose:
            return False
        for name in ("depth", "depth_conf", "point_conf", "features", "saliency", "keys"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True

    __hash__ = None


def validate_frame(meta: FrameMeta) -> FrameMeta:
    """Check the FrameMeta invariants and return the frame unchanged.

    Raises ValidationError naming the offending field.
    """
    h, w = meta.depth.shape
    if h < 1 or w < 1:
        raise ValidationError("depth", "empty grid")
    if np.any(meta.depth < 0):
        raise ValidationError("depth", "negative depth")
    for name in ("depth_conf", "point_conf"):
        grid = getattr(meta, name)
        if grid.shape != (h, w):
            raise ValidationError(name, f"shape {grid.shape} does not match depth {(h, w)}")
        if np.any(grid < 0) or np.any(grid > 1):
            raise ValidationError(name, f"{name} out of range [0, 1]")
    hp, wp = meta.patch_shape
    if hp < 1 or wp < 1:
        raise ValidationError("features" if meta.features is not None else "saliency", "empty patch grid")
    if meta.features is not None and meta.features.shape[2] < 1:
        raise ValidationError("features", "feature dimension must be >= 1")
    if hp > h or wp > w:
        raise ValidationError("features" if meta.features is not None else "saliency",
                              f"patch grid {(hp, wp)} larger than depth grid {(h, w)}")
    if meta.saliency is not None and np.any(meta.saliency < 0):
        raise ValidationError("saliency", "negative saliency")
    if meta.keys is not None and meta.keys.shape[0] < meta.num_patches:
        raise ValidationError("keys", "fewer key vectors than patch tokens")
    return meta


@dataclass(frozen=True)
class TokenRef:
    """Identity of one cached token; ordering is the canonical cache order."""

    frame_index: int
    kind: str
    index: int = 0

    def __post_init__(self):
        if self.kind not in _KIND_ORDER:
            raise ValidationError("kind", f"unknown token kind {self.kind!r}")
        if self.kind == KIND_CAMERA and self.index != 0:
            raise ValidationError("index", "camera token has no index")
        if self.kind == KIND_REGISTER and self.index < 1:
            raise ValidationError("index", "register index starts at 1")
        if self.kind == KIND_PATCH and self.index < 0:
            raise ValidationError("index", "patch index must be nonnegative")

    def sort_key(self) -> tuple:
        return (self.frame_index, _KIND_ORDER[self.kind], self.index)

    def __lt__(self, other):
        return self.sort_key() < other.sort_key()

    def __le__(self, other):
        return self.sort_key() <= other.sort_key()

    def __gt__(self, other):
        return self.sort_key() > other.sort_key()

    def __ge__(self, other):
        return self.sort_key() >= other.sort_key()

    def __eq__(self, other):
        if not isinstance(other, TokenRef):
            return NotImplemented
        return self.sort_key() == other.sort_key()

    def __hash__(self):
        return hash(self.sort_key())

    @property
    def is_special(self) -> bool:
        return self.kind != KIND_PATCH

    def rank(self, registers: int = DEFAULT_REGISTERS) -> int:
        """Kind rank inside a frame: camera 0, register k -> k, patch p -> 1+R+p."""
        if self.kind == KIND_CAMERA:
            return 0
        if self.kind == KIND_REGISTER:
            if self.index > registers:
                raise ValidationError("index", f"register {self.index} exceeds R={registers}")
            return self.index
        return 1 + registers + self.index

    @classmethod
    def from_rank(cls, frame_index: int, rank: int, registers: int = DEFAULT_REGISTERS) -> "TokenRef":
        rank = int(rank)
        if rank == 0:
            return cls(int(frame_index), KIND_CAMERA, 0)
        if rank <= registers:
            return cls(int(frame_index), KIND_REGISTER, rank)
        return cls(int(frame_index), KIND_PATCH, rank - 1 - registers)

    @classmethod
    def camera(cls, frame_index: int) -> "TokenRef":
        return cls(frame_index, KIND_CAMERA, 0)

    @classmethod
    def register(cls, frame_index: int, k: int) -> "TokenRef":
        return cls(frame_index, KIND_REGISTER, k)

    @classmethod
    def patch(cls, frame_index: int, p: int) -> "TokenRef":
        return cls(frame_index, KIND_PATCH, p)


def frame_token_ranks(num_patches: int, registers: int = DEFAULT_REGISTERS) -> np.ndarray:
    """Kind ranks of one full frame in canonical order."""
    return np.arange(1 + registers + num_patches, dtype=np.int64)


@dataclass(frozen=True)
class ScoreWeights:
    """Weights and constants of the importance score.

    ``signal_scales`` multiplies each raw signal before the logistic, in the
    order (cam, geo, temp, sal, dc, pc); all ones reproduces the plain
    logistic.
    """

    w_cam: float = 0.55
    w_geo: float = 0.55
    w_temp: float = 0.25
    w_sal: float = 0.28
    w_dc: float = 0.45
    w_pc: float = 0.35
    w_f: float = 0.5
    w_k: float = 0.5
    delta_boost: float = 0.3
    eps_tb: float = 1e-6
    eps_norm: float = 1e-8
    signal_scales: tuple = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        names = ("w_cam", "w_geo", "w_temp", "w_sal", "w_dc", "w_pc", "w_f", "w_k", "delta_boost")
        for name in names:
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < 0:
                raise ValidationError(name, "weights must be finite and nonnegative")
            object.__setattr__(self, name, value)
        if abs(self.w_f + self.w_k - 1.0) > 1e-12:
            raise ValidationError("w_f", "w_f + w_k must equal 1")
        for name in ("eps_tb", "eps_norm"):
            value = float(getattr(self, name))
            if not value > 0:
                raise ValidationError(name, "must be positive")
            object.__setattr__(self, name, value)
        scales = tuple(float(s) for s in self.signal_scales)
        if len(scales) != 6 or not all(s > 0 for s in scales):
            raise ValidationError("signal_scales", "expected six positive scales")
        object.__setattr__(self, "signal_scales", scales)

    def to_dict(self) -> dict:
        return {
            "w_cam": self.w_cam, "w_geo": self.w_geo, "w_temp": self.w_temp,
            "w_sal": self.w_sal, "w_dc": self.w_dc, "w_pc": self.w_pc,
            "w_f": self.w_f, "w_k": self.w_k,
            "delta_boost": self.delta_boost, "eps_tb": self.eps_tb, "eps_norm": self.eps_norm,
            "signal_scales": list(self.signal_scales),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScoreWeights":
        data = dict(data)
        unknown = set(data) - set(cls().to_dict())
        if unknown:
            raise ValidationError(sorted(unknown)[0], "unknown weight field")
        if "signal_scales" in data:
            data["signal_scales"] = tuple(data["signal_scales"])
        return cls(**data)


class LayerCache:
    """Token references held by one layer, stored column-wise.

    ``frames`` and ``ranks`` are parallel int64 arrays kept in canonical
    order (frame ascending, kind rank ascending).  When ``raw`` is not None
    it holds the incremental importance cache: per-token patch raw scores
    aligned with the token arrays, and per-frame raw scores for every frame
    present in the layer.
    """

    def __init__(self, layer_index: int, budget: int, registers: int = DEFAULT_REGISTERS,
                 key_dim: int = 0):
        if budget < 0:
            raise ValidationError("budget", "must be nonnegative")
        self.layer_index = int(layer_index)
        self.budget = int(budget)
        self.registers = int(registers)
        self.frames = np.empty(0, dtype=np.int64)
        self.ranks = np.empty(0, dtype=np.int64)
        self.keys = np.empty((0, key_dim), dtype=np.float64) if key_dim else None
        self.raw = None        # dict name -> per-token float array
        self.frame_raw = None  # dict frame -> (s_cam_raw, s_geo_raw)
        self.appended = 0
        self.specials_appended = 0

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @property
    def tokens(self) -> list:
        return [TokenRef.from_rank(f, r, self.registers) for f, r in zip(self.frames, self.ranks)]

    @property
    def special_mask(self) -> np.ndarray:
        return self.ranks <= self.registers

    def frame_set(self) -> np.ndarray:
        if not len(self):
            return self.frames
        keep = np.empty(len(self), dtype=bool)
        keep[0] = True
        np.not_equal(self.frames[1:], self.frames[:-1], out=keep[1:])
        return self.frames[keep]

    def counts(self) -> tuple:
        """(camera, register, patch) token counts."""
        cam = int(np.count_nonzero(self.ranks == 0))
        special = int(np.count_nonzero(self.special_mask))
        return cam, special - cam, len(self) - special

    def cached_raw(self, ref: TokenRef) -> Optional[dict]:
        """Raw-score entry for one token, or None when not cached."""
        if self.raw is None:
            return None
        hit = np.flatnonzero((self.frames == ref.frame_index) & (self.ranks == ref.rank(self.registers)))
        if not hit.size:
            return None
        i = int(hit[0])
        cam, geo = self.frame_raw[ref.frame_index]
        entry = {"s_cam_raw": cam, "s_geo_raw": geo}
        if not ref.is_special:
            entry.update({name: float(arr[i]) for name, arr in self.raw.items()})
        return entry

    def keep(self, mask: np.ndarray) -> None:
        self.frames = self.frames[mask]
        self.ranks = self.ranks[mask]
        if self.keys is not None:
            self.keys = self.keys[mask]
        if self.raw is not None:
            self.raw = {name: arr[mask] for name, arr in self.raw.items()}
            present = set(self.frame_set().tolist())
            self.frame_raw = {f: v for f, v in self.frame_raw.items() if f in present}

    def append(self, frame_index: int, ranks: np.ndarray, keys=None, raw=None, frame_raw=None) -> None:
        n = ranks.shape[0]
        self.frames = np.concatenate([self.frames, np.full(n, frame_index, dtype=np.int64)])
        self.ranks = np.concatenate([self.ranks, ranks])
        if self.keys is not None:
            self.keys = np.concatenate([self.keys, keys])
        if self.raw is not None:
            self.raw = {name: np.concatenate([arr, raw[name]]) for name, arr in self.raw.items()}
            self.frame_raw[frame_index] = frame_raw
        self.appended += n
        self.specials_appended += int(np.count_nonzero(ranks <= self.registers))

    def check_invariants(self) -> None:
        order = np.lexsort((self.ranks, self.frames))
        if not np.array_equal(order, np.arange(len(self))):
            raise AssertionError(f"layer {self.layer_index}: tokens out of canonical order")
        if len(self) > 1:
            same = (self.frames[1:] == self.frames[:-1]) & (self.ranks[1:] == self.ranks[:-1])
            if np.any(same):
                raise AssertionError(f"layer {self.layer_index}: duplicate token")
        if self.raw is not None:
            if set(self.frame_raw) != set(self.frame_set().tolist()):
                raise AssertionError(f"layer {self.layer_index}: raw cache frames != token frames")
            for arr in self.raw.values():
                if arr.shape[0] != len(self):
                    raise AssertionError(f"layer {self.layer_index}: raw cache misaligned")
