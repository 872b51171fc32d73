"""
Imitating the expert from local observations
============================================

Trains the history-based and current-only policies with the desk preset,
writes their learning curves and checkpoints, and compares them in closed
loop against the expert. Expect roughly half an hour on one CPU.
"""

from mixedav.controllers import FollowerStopperExpert
from mixedav.imitation import (
    AVAgent,
    DaggerConfig,
    ObservationSpec,
    WarmupCache,
    train_dagger,
    write_learning_curve,
)
from mixedav.metrics import compute_metrics
from mixedav.network import NetworkSpec, SimConfig, run_horizon
from mixedav.neural import save_checkpoint

cache = WarmupCache("warmups")
cfg = DaggerConfig.desk()
spec = NetworkSpec(downstream_speed_limit=5.0)
sim = SimConfig(inflow_rate=2100.0, seed=0)

for name, n in (("history", 5), ("current", 0)):
    obs = ObservationSpec(history_N=n)
    result = train_dagger(cfg, obs, seed=0, cache=cache)
    write_learning_curve(f"learning_curve_{name}.csv", result.curve)
    save_checkpoint(result.params, f"policy_{name}.ckpt")
    agent = AVAgent(obs, FollowerStopperExpert(), policy=result.params)
    state = cache.get(spec, sim)
    run_horizon(state, spec, sim, agent)
    rec = compute_metrics(state.trajectory_log, spec, sim,
                          interventions=agent.interventions)
    print(f"{name}: held-out MSE {result.curve[1]['heldout_mse']:.3f} -> "
          f"{result.curve[-1]['heldout_mse']:.3f}, closed-loop mean |accel| "
          f"{rec.mean_abs_accel:.3f}, interventions {agent.interventions}")
