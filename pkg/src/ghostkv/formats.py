"""On-disk formats: frame traces, activation traces, profiles, plans.

Float grids travel as base64 of raw little-endian IEEE-754 so a trace
round-trips bit-exactly.  Frame traces use float32 blocks; cache snapshots
use float64 so cached raw scores survive unchanged.
"""

from __future__ import annotations

import base64
import csv
import io
import json
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .budget import BudgetPlan, LayerProfile
from .core import GhostError, FrameMeta, LayerCache, Pose, ScoreWeights, TokenRef, ValidationError
from .scoring import FrameRawScores


class TraceParseError(GhostError, ValueError):
    code = "E_PARSE"

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


def b64_encode(arr, dtype: str = "<f4") -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype=dtype).tobytes()).decode("ascii")


def b64_decode(data: str, dtype: str = "<f4") -> np.ndarray:
    return np.frombuffer(base64.b64decode(data, validate=True), dtype=dtype)


def encode_grid(arr: np.ndarray, dtype: str = "<f4") -> dict:
    arr = np.asarray(arr)
    out = {"h": int(arr.shape[0]), "w": int(arr.shape[1])}
    if arr.ndim == 3:
        out["d"] = int(arr.shape[2])
    out["data_b64"] = b64_encode(arr, dtype)
    return out


def decode_grid(obj: dict, dtype: str = "<f4") -> np.ndarray:
    shape = (int(obj["h"]), int(obj["w"])) + ((int(obj["d"]),) if "d" in obj else ())
    flat = b64_decode(obj["data_b64"], dtype)
    if flat.size != int(np.prod(shape)):
        raise ValueError(f"block holds {flat.size} values, header says {shape}")
    return flat.reshape(shape)


# -- per-type encoders -------------------------------------------------------

def pose_to_dict(pose: Pose) -> dict:
    return {"T": list(pose.translation), "q": list(pose.quaternion), "f": pose.focal}


def pose_from_dict(obj: dict) -> Pose:
    return Pose(tuple(obj["T"]), tuple(obj["q"]), obj.get("f", 1.0))


def frame_to_dict(meta: FrameMeta) -> dict:
    out = {
        "t": meta.frame_index,
        "pose": pose_to_dict(meta.pose),
        "depth": encode_grid(meta.depth),
        "depth_conf": encode_grid(meta.depth_conf),
        "point_conf": encode_grid(meta.point_conf),
    }
    if meta.features is not None:
        out["features"] = encode_grid(meta.features)
    else:
        out["saliency"] = encode_grid(meta.saliency)
    if meta.keys is not None:
        out["keys"] = {"n": int(meta.keys.shape[0]), "d": int(meta.keys.shape[1]),
                       "data_b64": b64_encode(meta.keys)}
    return out


def frame_from_dict(obj: dict) -> FrameMeta:
    keys = None
    if "keys" in obj:
        k = obj["keys"]
        keys = b64_decode(k["data_b64"]).reshape(int(k["n"]), int(k["d"]))
    return FrameMeta(
        frame_index=obj["t"],
        pose=pose_from_dict(obj["pose"]),
        depth=decode_grid(obj["depth"]),
        depth_conf=decode_grid(obj["depth_conf"]),
        point_conf=decode_grid(obj["point_conf"]),
        features=decode_grid(obj["features"]) if "features" in obj else None,
        saliency=decode_grid(obj["saliency"]) if "saliency" in obj else None,
        keys=keys,
    )


def token_to_dict(ref: TokenRef) -> dict:
    return {"frame": ref.frame_index, "kind": ref.kind, "index": ref.index}


def token_from_dict(obj: dict) -> TokenRef:
    return TokenRef(int(obj["frame"]), obj["kind"], int(obj.get("index", 0)))


def raw_scores_to_dict(raw: FrameRawScores) -> dict:
    return {"s_cam_raw": raw.s_cam_raw, "s_geo_raw": raw.s_geo_raw, "s_temp_raw": raw.s_temp_raw}


def raw_scores_from_dict(obj: dict) -> FrameRawScores:
    return FrameRawScores(float(obj["s_cam_raw"]), float(obj["s_geo_raw"]), float(obj["s_temp_raw"]))


def layer_to_dict(layer: LayerCache) -> dict:
    out = {
        "layer": layer.layer_index,
        "budget": layer.budget,
        "registers": layer.registers,
        "frames": layer.frames.tolist(),
        "ranks": layer.ranks.tolist(),
        "appended": layer.appended,
        "specials_appended": layer.specials_appended,
    }
    if layer.keys is not None:
        out["keys"] = {"n": int(layer.keys.shape[0]), "d": int(layer.keys.shape[1]),
                       "data_b64": b64_encode(layer.keys, "<f8")}
    if layer.raw is not None:
        out["raw"] = {name: b64_encode(arr, "<f8") for name, arr in layer.raw.items()}
        out["frame_raw"] = [[f, cam, geo] for f, (cam, geo) in sorted(layer.frame_raw.items())]
    return out


def layer_from_dict(obj: dict) -> LayerCache:
    key_dim = int(obj["keys"]["d"]) if "keys" in obj else 0
    layer = LayerCache(obj["layer"], obj["budget"], obj["registers"], key_dim)
    layer.frames = np.asarray(obj["frames"], dtype=np.int64)
    layer.ranks = np.asarray(obj["ranks"], dtype=np.int64)
    layer.appended = int(obj["appended"])
    layer.specials_appended = int(obj["specials_appended"])
    if key_dim:
        layer.keys = b64_decode(obj["keys"]["data_b64"], "<f8").reshape(-1, key_dim).copy()
    if "raw" in obj:
        layer.raw = {name: b64_decode(v, "<f8").copy() for name, v in obj["raw"].items()}
        layer.frame_raw = {int(f): (float(c), float(g)) for f, c, g in obj["frame_raw"]}
    return layer


def weights_to_dict(weights: ScoreWeights) -> dict:
    return weights.to_dict()


def weights_from_dict(obj: dict) -> ScoreWeights:
    return ScoreWeights.from_dict(obj)


def profile_to_dict(profile: LayerProfile) -> dict:
    return {"rho_bar": profile.rho_bar.tolist(), "samples": profile.sample_count.tolist()}


def profile_from_dict(obj: dict) -> LayerProfile:
    return LayerProfile(np.asarray(obj["rho_bar"]), np.asarray(obj["samples"]))


# -- files -----------------------------------------------------------------------

def _json_lines(path) -> Iterator:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(path, lineno, f"invalid JSON: {exc.msg}") from None


def write_trace(path, frames: Iterable[FrameMeta]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for meta in frames:
            fh.write(json.dumps(frame_to_dict(meta), separators=(",", ":")) + "\n")


def read_trace(path) -> list:
    frames = []
    for lineno, obj in _json_lines(path):
        try:
            frames.append(frame_from_dict(obj))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, KeyError):
                exc = f"missing field {exc.args[0]!r}"
            raise TraceParseError(path, lineno, str(exc)) from None
    return frames


def write_activation_trace(path, samples) -> None:
    """``samples[layer]`` is a sequence of (input, output) vectors."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for layer, pairs in enumerate(samples):
            for s, (x, y) in enumerate(pairs):
                rec = {"layer": layer, "sample": s,
                       "x_b64": b64_encode(np.ravel(x)), "y_b64": b64_encode(np.ravel(y))}
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_activation_trace(path) -> list:
    by_layer: dict = {}
    for lineno, obj in _json_lines(path):
        try:
            layer = int(obj["layer"])
            sample = int(obj["sample"])
            x = b64_decode(obj["x_b64"]).astype(np.float64)
            y = b64_decode(obj["y_b64"]).astype(np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, KeyError):
                exc = f"missing field {exc.args[0]!r}"
            raise TraceParseError(path, lineno, str(exc)) from None
        by_layer.setdefault(layer, []).append((sample, x, y))
    if not by_layer:
        raise TraceParseError(path, 0, "no samples")
    layers = sorted(by_layer)
    if layers != list(range(len(layers))):
        raise TraceParseError(path, 0, f"layer indices must be 0..{len(layers) - 1}, got {layers}")
    return [[(x, y) for _, x, y in sorted(by_layer[l], key=lambda r: r[0])] for l in layers]


def format_profile_csv(profile: LayerProfile) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "rho_bar", "samples"])
    for i, (rho, n) in enumerate(zip(profile.rho_bar, profile.sample_count)):
        w.writerow([i, f"{rho:.9f}", int(n)])
    return buf.getvalue()


def write_profile_csv(path, profile: LayerProfile) -> None:
    Path(path).write_text(format_profile_csv(profile), encoding="utf-8")


def read_profile_csv(path) -> LayerProfile:
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["layer", "rho_bar", "samples"]:
            raise TraceParseError(path, 1, "expected header layer,rho_bar,samples")
        rows = []
        for lineno, row in enumerate(reader, 2):
            try:
                layer, rho, n = int(row[0]), float(row[1]), int(row[2])
            except (IndexError, ValueError):
                raise TraceParseError(path, lineno, f"bad row {row!r}") from None
            if layer != len(rows):
                raise TraceParseError(path, lineno, f"expected layer {len(rows)}, got {layer}")
            rows.append((rho, n))
    if not rows:
        raise TraceParseError(path, 1, "profile has no layers")
    try:
        return LayerProfile(np.array([r for r, _ in rows]), np.array([n for _, n in rows]))
    except ValidationError as exc:
        raise TraceParseError(path, 0, str(exc)) from None


def write_plan_json(path, plan: BudgetPlan) -> None:
    Path(path).write_text(json.dumps(plan.to_dict()) + "\n", encoding="utf-8")


def read_plan_json(path) -> BudgetPlan:
    path = Path(path)
    try:
        return BudgetPlan.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise TraceParseError(path, exc.lineno, f"invalid JSON: {exc.msg}") from None
    except (KeyError, TypeError) as exc:
        raise TraceParseError(path, 0, f"bad plan: {exc}") from None
