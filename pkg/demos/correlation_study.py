"""Rank correlation between per-frame signals on a synthetic stream."""

from ghostkv import TrajectoryConfig, generate_stream
from ghostkv.simgen import correlation_study

stream = generate_stream(TrajectoryConfig(length=120, motion="random_walk"))
for a, b in [("key_similarity", "camera_change"),
             ("key_similarity", "depth_gradient_variance"),
             ("camera_change", "temporal_recency"),
             ("random:1", "random:2")]:
    print(f"spearman({a}, {b}) = {correlation_study(stream, a, b):+.3f}")
