import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ghostkv import BudgetPlan, EvictionEngine, FrameMeta, Pose, ScoreWeights, TokenRef, apply_ablation, select_topk
from ghostkv.core import ValidationError
from ghostkv.engine import FrameOrderError, UnknownFrameError, topk_mask

import oracles as O
from conftest import random_stream


def _plan(*budgets):
    return BudgetPlan(list(budgets), sum(budgets))


def _retained(engine, layer=0):
    lay = engine.layers[layer]
    return sorted(zip(lay.frames.tolist(), lay.ranks.tolist()))


def hand_stream():
    xs = [0.0, 0.1, 1.5, 1.6, 3.0]
    frames = []
    for t in range(5):
        yy, xx = np.mgrid[0:4, 0:4].astype(float)
        depth = 1.0 + 0.25 * t * xx + (yy * xx if t % 2 else 0.0)
        conf = np.clip(0.2 + 0.15 * t + 0.05 * (xx - yy), 0, 1)
        sal = np.array([[0.1 * t, 0.4], [0.9 - 0.1 * t, 0.2 + 0.2 * t]])
        frames.append(FrameMeta(t, Pose((xs[t], 0.0, 0.0), (1.0, 0.0, 0.1 * t, 0.0)), depth,
                                conf, conf[::-1], saliency=sal))
    return frames


# retained (frame, rank) after each step's eviction, from the from-scratch oracle
HAND_TRACE = [
    [],
    [(0, 0), (0, 1), (0, 2), (0, 3), (0, 4), (0, 5)],
    [(0, 0), (0, 1), (1, 0), (1, 1), (1, 2), (1, 3), (1, 4), (1, 5)],
    [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1), (2, 3), (2, 5)],
    [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1), (3, 0), (3, 1)],
]


class TestStep:
    def test_budget_never_reached(self, rng):
        stream = random_stream(rng, 10)
        eng = EvictionEngine(_plan(10_000), registers=1)
        for f in stream:
            res = eng.step(f)
            assert res.num_evicted() == [0]
        assert len(eng.layers[0]) == 10 * 6

    def test_skip_when_exactly_at_budget(self, rng):
        stream = random_stream(rng, 3)  # N = 1 + 1 + 4 = 6
        eng = EvictionEngine(_plan(6), registers=1)
        r0 = eng.step(stream[0])
        r1 = eng.step(stream[1])
        assert r1.num_evicted() == [0] and r1.post_append == [12]
        r2 = eng.step(stream[2])
        assert r2.num_evicted() == [6] and r2.pre_append == [6]

    def test_hand_trace(self):
        eng = EvictionEngine(_plan(8), registers=1)
        for f, expect in zip(hand_stream(), HAND_TRACE):
            res = eng.step(f)
            kept = [(a, b) for a, b in _retained(eng) if a != f.frame_index]
            assert kept == expect
            assert res.pre_append == [len(expect)]

    def test_hand_trace_matches_oracle(self):
        ref = O.reference_eviction(hand_stream(), [8], ScoreWeights(), 1)
        assert [sorted(s[0]) for s in ref] == HAND_TRACE

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["standard", "strict_protection"]))
    def test_random_streams_match_oracle(self, seed, mode):
        rng = np.random.default_rng(seed)
        R = int(rng.integers(0, 3))
        stream = random_stream(rng, int(rng.integers(2, 8)), registers=R, shape=(5, 4), patch=(3, 2),
                               use_saliency=bool(seed % 2))
        N = 1 + R + 6
        budgets = [int(b) for b in rng.integers(0, 3 * N, size=2)]
        ref = O.reference_eviction(stream, budgets, ScoreWeights(), R, mode)
        eng = EvictionEngine(BudgetPlan(budgets, sum(budgets)), registers=R, mode=mode)
        for f, expect in zip(stream, ref):
            eng.step(f)
            for li in range(2):
                got = {(a, b) for a, b in _retained(eng, li) if a != f.frame_index}
                assert got == expect[li]

    def test_occupancy_bounds(self, rng):
        stream = random_stream(rng, 30, registers=2)
        N = 1 + 2 + 4
        eng = EvictionEngine(_plan(20, 35, 7), registers=2)
        for i, f in enumerate(stream):
            res = eng.step(f)
            eng.check_invariants()
            for b, pre, post in zip((20, 35, 7), res.pre_append, res.post_append):
                assert pre <= b and post == pre + N
                if i * N > b:
                    assert pre > b - N

    def test_frame_order(self, rng):
        stream = random_stream(rng, 2)
        eng = EvictionEngine(_plan(10))
        eng.step(stream[1])
        with pytest.raises(FrameOrderError):
            eng.step(stream[0])

    def test_patch_grid_change_rejected(self, rng):
        a = random_stream(rng, 1)[0]
        b = random_stream(rng, 2, patch=(3, 3))[1]
        eng = EvictionEngine(_plan(10))
        eng.step(a)
        with pytest.raises(ValidationError):
            eng.step(b)

    def test_metadata_collected(self, rng):
        stream = random_stream(rng, 20, registers=1)
        eng = EvictionEngine(_plan(12), registers=1, ablation="token_only")
        for f in stream:
            eng.step(f)
        eng.check_invariants()
        assert set(eng.metadata) == set(eng.layers[0].frame_set().tolist())


class TestFullRecompute:
    @pytest.mark.parametrize("mode", ["standard", "strict_protection"])
    def test_fifty_frames(self, rng, mode):
        stream = random_stream(rng, 50, registers=2, shape=(6, 6), patch=(3, 3))
        plan = _plan(40, 90, 15)
        a = EvictionEngine(plan, registers=2, mode=mode)
        b = EvictionEngine(plan, registers=2, mode=mode)
        for f in stream:
            assert a.step(f).same_as(b.step_full_recompute(f))
        assert a.evaluations < b.evaluations

    def test_first_eviction_builds_cache(self, rng):
        stream = random_stream(rng, 3, registers=1)
        eng = EvictionEngine(_plan(8), registers=1)
        eng.step(stream[0])
        eng.step(stream[1])
        assert eng.layers[0].raw is None
        eng.step(stream[2])
        assert eng.layers[0].raw is not None
        eng.layers[0].check_invariants()


class TestLazyUpdate:
    def _engines(self, rng):
        stream = random_stream(rng, 12, registers=1)
        a = EvictionEngine(_plan(20, 30), registers=1)
        b = EvictionEngine(_plan(20, 30), registers=1)
        return stream, a, b

    def test_read_after_write(self, rng):
        stream, a, b = self._engines(rng)
        for f in stream[:8]:
            a.step(f)
            b.step_full_recompute(f)
        target = max(a.metadata)
        new_depth = np.tile(np.arange(4.0), (4, 1)) * 7
        new_pose = Pose((9.0, 9.0, 9.0), (0, 1, 0, 0))
        for e in (a, b):
            e.lazy_update_metadata(target, depth=new_depth, pose=new_pose)
        cached = a.layers[1].frame_raw[target]
        assert cached[1] == pytest.approx(O.depth_gradient_variance(new_depth.tolist()), rel=1e-12)
        for f in stream[8:]:
            assert a.step(f).same_as(b.step_full_recompute(f))

    def test_idempotent(self, rng):
        stream, a, _ = self._engines(rng)
        for f in stream[:6]:
            a.step(f)
        t = max(a.metadata)
        conf = np.full((4, 4), 0.9)
        a.lazy_update_metadata(t, depth_conf=conf)
        snap = [(l.frames.copy(), {k: v.copy() for k, v in (l.raw or {}).items()}) for l in a.layers]
        a.lazy_update_metadata(t, depth_conf=conf)
        for (fr, raw), l in zip(snap, a.layers):
            assert np.array_equal(fr, l.frames)
            for k in raw:
                assert np.array_equal(raw[k], l.raw[k], equal_nan=True)

    def test_unknown_frame(self, rng):
        stream = random_stream(rng, 12, registers=1)
        a = EvictionEngine(_plan(6), registers=1, ablation="no_boost")
        for f in stream:
            a.step(f)
        gone = [f.frame_index for f in stream if f.frame_index not in a.metadata]
        assert gone
        with pytest.raises(UnknownFrameError, match="unknown frame"):
            a.lazy_update_metadata(gone[0], depth=np.ones((4, 4)))


class TestStrict:
    def test_specials_never_evicted(self, rng):
        stream = random_stream(rng, 25, registers=2)
        eng = EvictionEngine(_plan(120), registers=2, mode="strict")
        for f in stream:
            res = eng.step(f)
            assert all(r > 2 for r in res.evicted_ranks[0].tolist())
        assert eng.layers[0].counts()[:2] == (25, 50)

    def test_overflow_keeps_budget(self, rng):
        stream = random_stream(rng, 10, registers=2)
        eng = EvictionEngine(_plan(5), registers=2, mode="strict")
        for f in stream:
            res = eng.step(f)
            assert res.pre_append[0] <= 5
            eng.check_invariants()
        kept = eng.layers[0]
        assert len(kept) == 5 + 7
        assert np.all(kept.ranks[kept.frames != 9] <= 2)


class TestTopK:
    def test_k_zero(self):
        assert select_topk({TokenRef.camera(0): 1.0}, 0) == []

    def test_all_equal(self):
        refs = [TokenRef.patch(1, 0), TokenRef.camera(1), TokenRef.patch(0, 3), TokenRef.register(0, 1),
                TokenRef.camera(0)]
        out = select_topk({r: 0.5 for r in refs}, 3)
        assert out == [TokenRef.camera(0), TokenRef.register(0, 1), TokenRef.patch(0, 3)]

    def test_random_against_full_sort(self, rng):
        refs = [TokenRef.from_rank(int(f), int(r), 2) for f, r in zip(rng.integers(0, 5, 20), rng.integers(0, 8, 20))]
        refs = list(dict.fromkeys(refs))
        scores = {r: float(v) for r, v in zip(refs, rng.random(len(refs)))}
        expect = sorted(refs, key=lambda r: (-scores[r], r.frame_index, r.rank(2)))[:7]
        assert select_topk(scores, 7) == expect

    @given(st.lists(st.integers(0, 4), min_size=0, max_size=40), st.integers(0, 45))
    def test_mask_matches_sort(self, vals, k):
        s = np.asarray(vals, dtype=float)
        order = sorted(range(len(vals)), key=lambda i: (-vals[i], i))[:k]
        assert np.flatnonzero(topk_mask(s, k)).tolist() == sorted(order)


class TestAblation:
    def test_frame_weight_total_kept(self):
        w = ScoreWeights()
        for name, zero in (("no_cam", "w_cam"), ("no_geo", "w_geo"), ("no_temp", "w_temp")):
            a = apply_ablation(w, name)
            assert getattr(a, zero) == 0.0
            assert a.w_cam + a.w_geo + a.w_temp == pytest.approx(1.35, rel=1e-15)

    def test_mixtures(self):
        assert apply_ablation(ScoreWeights(), "frame_only").w_f == 1.0
        assert apply_ablation(ScoreWeights(), "token_only").w_k == 1.0
        assert apply_ablation(ScoreWeights(), "no_boost").delta_boost == 0.0

    def test_unknown(self):
        with pytest.raises(ValidationError):
            apply_ablation(ScoreWeights(), "no_everything")
