"""Turn a per-layer cosine profile into per-layer token budgets.

Layers whose output barely differs from their input (cosine near 1) get
little cache; the layer that changes its input most gets the most.
"""

import numpy as np

from ghostkv import LayerProfile, mean_cosine_profile, sweep_temperature
from ghostkv.simgen import synthetic_activation_samples

targets = [1.00, 0.99, 0.99, 0.98, 0.98, 0.97, 0.96, 0.96, 0.95,
           0.90, 0.85, 0.80, 0.74, 0.68, 0.61,
           0.66, 0.70, 0.73, 0.76, 0.78, 0.80, 0.82, 0.84, 0.86]

# profile from synthetic (input, output) pairs, as if captured from a model
profile = mean_cosine_profile(synthetic_activation_samples(targets, samples=16))
print("measured rho_bar:", np.round(profile.rho_bar, 3).tolist())

for plan in sweep_temperature(profile, [0.3, 0.5, 1.0], 1_200_000):
    b = plan.budgets
    print(f"tau={plan.temperature:.1f}  max layer {int(np.argmax(b))} gets {int(b.max())}, "
          f"min {int(b.min())}, max/min {b.max() / b.min():.2f}")

flat = LayerProfile.from_values([0.9] * 4)
print("equal profile ->", sweep_temperature(flat, [0.5], 1000, 0)[0].budgets.tolist())
