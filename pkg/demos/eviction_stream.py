"""Stream frames through the eviction engine and watch what it keeps."""

import numpy as np

from ghostkv import BudgetPlan, EvictionEngine, TrajectoryConfig, generate_stream

cfg = TrajectoryConfig(length=40, motion="orbit", height=16, width=16, patch_h=8, patch_w=8)
n = cfg.tokens_per_frame
plan = BudgetPlan([4 * n, 8 * n], 12 * n)
stream = generate_stream(cfg, with_keys=False)

for mode in ("standard", "strict_protection"):
    engine = EvictionEngine(plan, mode=mode)
    full = EvictionEngine(plan, mode=mode)
    for frame in stream:
        res = engine.step(frame)
        assert res.same_as(full.step_full_recompute(frame))
    layer = engine.layers[0]
    frames, counts = np.unique(layer.frames, return_counts=True)
    specials = int(np.count_nonzero(layer.special_mask))
    print(f"{mode}: layer 0 holds {len(layer)} tokens from {frames.size} frames, {specials} special")
    print("  tokens per frame:", dict(zip(frames.tolist(), counts.tolist())))
    print(f"  score evaluations over {len(stream)} steps: {engine.evaluations} "
          f"(full recompute: {full.evaluations})")
