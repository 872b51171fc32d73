"""
Wave smoothing with the Follower Stopper expert
===============================================

Starts from one warmed-up congested state, then runs the controlled
horizon with humans only and with 5% of vehicles driven by the expert.
"""

import numpy as np

from mixedav.controllers import FollowerStopperExpert
from mixedav.metrics import compute_metrics
from mixedav.network import NetworkSpec, SimConfig, run_scenario, warm_up

spec = NetworkSpec(downstream_speed_limit=5.0)
results = {}
for seed in range(3):
    base_cfg = SimConfig(inflow_rate=2100.0, seed=seed)
    warm = warm_up(spec, base_cfg)
    for name, controller, pen in (("baseline", None, 0.0),
                                  ("expert", FollowerStopperExpert(), 0.05)):
        cfg = base_cfg.with_(penetration=pen)
        _, log = run_scenario(spec, cfg, controller, warm_state=warm)
        results.setdefault(name, []).append(compute_metrics(log, spec, cfg))

for name, recs in results.items():
    print(f"{name:8s} mean |accel| "
          f"{np.mean([r.mean_abs_accel for r in recs]):.3f}  "
          f"mpg {np.mean([r.mpg for r in recs]):.2f}  "
          f"throughput {np.mean([r.throughput for r in recs]):.0f}")
