import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ghostkv import (BudgetPlan, EvictionEngine, FrameRawScores, LayerProfile, Pose, ScoreWeights,
                     TokenRef, TrajectoryConfig, generate_stream)
from ghostkv import formats as F

from conftest import random_frame

finite = st.floats(-1e5, 1e5, allow_nan=False)


@given(st.tuples(finite, finite, finite), st.tuples(finite, finite, finite, finite).filter(lambda q: any(q)),
       st.floats(0.01, 100))
def test_pose_roundtrip(T, q, f):
    p = Pose(T, q, f)
    assert F.pose_from_dict(json.loads(json.dumps(F.pose_to_dict(p)))) == p


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.booleans(), st.integers(0, 3))
def test_frame_roundtrip_bit_exact(seed, saliency, key_dim):
    rng = np.random.default_rng(seed)
    f = random_frame(rng, int(rng.integers(0, 1000)), shape=(5, 6), patch=(2, 3), use_saliency=saliency,
                     key_dim=key_dim)
    # the trace stores float32, so compare against the float32-rounded frame
    f32 = f.replace(**{k: getattr(f, k).astype(np.float32) for k in
                       ("depth", "depth_conf", "point_conf", "features", "saliency", "keys")
                       if getattr(f, k) is not None},
                    pose=Pose(*[tuple(float(np.float32(v)) for v in c) for c in (f.pose.translation, f.pose.quaternion)]))
    back = F.frame_from_dict(json.loads(json.dumps(F.frame_to_dict(f32))))
    assert back == f32


@given(st.integers(0, 10 ** 6), st.sampled_from(["camera", "register", "patch"]), st.integers(0, 600))
def test_token_roundtrip(frame, kind, index):
    index = 0 if kind == "camera" else index + (kind == "register")
    r = TokenRef(frame, kind, index)
    assert F.token_from_dict(json.loads(json.dumps(F.token_to_dict(r)))) == r


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 1))
def test_raw_scores_roundtrip(a, b, c):
    r = FrameRawScores(a, b, c)
    assert F.raw_scores_from_dict(json.loads(json.dumps(F.raw_scores_to_dict(r)))) == r


@given(st.floats(0, 1), st.floats(0, 3), st.floats(1e-9, 1e-3))
def test_weights_roundtrip(wf, boost, eps):
    w = ScoreWeights(w_f=wf, w_k=1 - wf, delta_boost=boost, eps_tb=eps)
    assert F.weights_from_dict(json.loads(json.dumps(F.weights_to_dict(w)))) == w


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=30), st.floats(0.05, 4), st.integers(0, 10 ** 6))
def test_plan_roundtrip(rho, tau, total):
    plan = __import__("ghostkv").allocate_budgets(LayerProfile.from_values(rho), tau, total, floor=0)
    assert BudgetPlan.from_dict(json.loads(json.dumps(plan.to_dict()))) == plan


def test_profile_roundtrip():
    p = LayerProfile(np.array([0.25, -0.5]), np.array([3, 4]))
    q = F.profile_from_dict(json.loads(json.dumps(F.profile_to_dict(p))))
    assert np.array_equal(q.rho_bar, p.rho_bar) and np.array_equal(q.sample_count, p.sample_count)


def test_layer_cache_roundtrip(rng):
    from conftest import random_stream
    eng = EvictionEngine(BudgetPlan([15], 15), registers=1, key_dim=3)
    for f in random_stream(rng, 6, registers=1, key_dim=3):
        eng.step(f)
    layer = eng.layers[0]
    back = F.layer_from_dict(json.loads(json.dumps(F.layer_to_dict(layer))))
    assert np.array_equal(back.frames, layer.frames) and np.array_equal(back.ranks, layer.ranks)
    assert np.array_equal(back.keys, layer.keys)
    for k in layer.raw:
        assert np.array_equal(back.raw[k], layer.raw[k], equal_nan=True)
    assert back.frame_raw == layer.frame_raw
    back.check_invariants()


def test_trace_file_roundtrip(tmp_path):
    stream = generate_stream(TrajectoryConfig(length=4, height=8, width=8, patch_h=4, patch_w=4))
    path = tmp_path / "t.jsonl"
    F.write_trace(path, stream)
    assert F.read_trace(path) == stream


def test_trace_parse_error_has_line(tmp_path):
    stream = generate_stream(TrajectoryConfig(length=2, height=8, width=8, patch_h=4, patch_w=4))
    path = tmp_path / "t.jsonl"
    F.write_trace(path, stream)
    with path.open("a") as fh:
        fh.write('{"t": 5, "pose": {"T": [0, 0, 0], "q": [1, 0, 0, 0]}}\n')
    with pytest.raises(F.TraceParseError, match=r":3: missing field 'depth'"):
        F.read_trace(path)
    path.write_text("{not json\n")
    with pytest.raises(F.TraceParseError, match=":1:"):
        F.read_trace(path)


def test_grid_size_checked():
    blk = F.encode_grid(np.ones((2, 3)))
    blk["w"] = 4
    with pytest.raises(ValueError):
        F.decode_grid(blk)


def test_activation_trace_roundtrip(tmp_path):
    samples = [[(np.ones(3), np.arange(3.0))], [(np.ones(2), -np.ones(2)), (np.ones(2), np.ones(2))]]
    path = tmp_path / "a.jsonl"
    F.write_activation_trace(path, samples)
    back = F.read_activation_trace(path)
    assert len(back) == 2 and len(back[1]) == 2
    assert np.array_equal(back[0][0][1], np.arange(3.0))


def test_profile_csv_format(tmp_path):
    p = LayerProfile(np.array([1.0, 0.123456789123, -0.5]), np.array([8, 8, 2]))
    text = F.format_profile_csv(p)
    assert text.splitlines() == ["layer,rho_bar,samples", "0,1.000000000,8", "1,0.123456789,8",
                                 "2,-0.500000000,2"]
    path = tmp_path / "p.csv"
    path.write_text(text)
    assert F.read_profile_csv(path).rho_bar.tolist() == [1.0, 0.123456789, -0.5]


def test_profile_csv_errors(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("layer,rho,samples\n")
    with pytest.raises(F.TraceParseError, match="header"):
        F.read_profile_csv(path)
    path.write_text("layer,rho_bar,samples\n0,0.5,3\n2,0.5,3\n")
    with pytest.raises(F.TraceParseError, match=":3:"):
        F.read_profile_csv(path)
