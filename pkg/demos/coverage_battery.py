"""Compare eviction policies on a camera that loiters, then moves away.

Pose dispersion is the mean pairwise distance between retained frames'
camera positions; a cache that only keeps recent frames collapses it.
"""

import numpy as np

from ghostkv import LayerProfile, TrajectoryConfig, allocate_budgets, generate_stream, run_experiment, seed_battery
from ghostkv.baselines import PolicyConfig

base = TrajectoryConfig(length=60, motion="loiter_then_move", loiter_span=20)
n = base.tokens_per_frame
plan = allocate_budgets(LayerProfile.from_values(np.linspace(0.98, 0.7, 3)), 0.5, 45 * n, n)
policies = {
    "ghost": PolicyConfig("ghost"),
    "recency": PolicyConfig("recency_window"),
    "sink+recent": PolicyConfig("sink_recent", {"sink_size": n, "window": 4}),
    "keysim-least": PolicyConfig("key_similarity"),
    "keysim-most": PolicyConfig("key_similarity", {"direction": "retain_most_similar"}),
}

print(f"{'seed':>4} " + " ".join(f"{k:>13}" for k in policies))
for cfg in seed_battery(base, 5):
    stream = generate_stream(cfg)
    row = [run_experiment(stream, p, plan)[1].pose_dispersion for p in policies.values()]
    print(f"{cfg.noise_seed:>4} " + " ".join(f"{v:>13.3f}" for v in row))
