"""Rare conflicts in the car-following environment and what they do to gradients.

Run with ``python3 demos/driving_gradients.py``. Estimates the crash rate of
a reasonable braking policy, then compares the batch-to-batch spread of the
full and critical-episode REINFORCE estimators.
"""

from rarelab import driving
from rarelab import policy_gradient as pg
from rarelab.driving import EnvConfig, PolicyParams

policy = PolicyParams((0.9, 3.0, -2.0))
env = EnvConfig(conflict_prob=0.0135, shaping_scale=0.3)

forced = driving.crash_rate(EnvConfig(conflict_prob=1.0), policy, 20000, seed=1)
print(f"P(crash | conflict) = {forced.rate:.4f} [{forced.low:.4f}, {forced.high:.4f}]")
print(f"crash rate per episode ~ {env.conflict_prob * forced.rate:.2e}")

cmp = pg.gradient_variance_comparison(env, policy, -0.0097, 1000, 100, seed=2)
print(f"critical fraction {cmp.critical_fraction:.4f}")
print(f"Var full {cmp.var_full:.4e}, Var filtered {cmp.var_filtered:.4e}")
print(f"ratio {cmp.var_full / cmp.var_filtered:.1f} vs 1/rho {1 / cmp.critical_fraction:.1f}")
print(f"full mean {cmp.full_mean.round(4)}, filtered mean {cmp.filtered_mean.round(4)}")
