"""Command-line entry points.

Subcommands: ``simulate``, ``train``, ``evaluate``, ``sweep`` and
``selftest``. Exit status is 0 on success, 1 on a configuration or usage
error and 2 on a simulation or training fault.
"""
import argparse
import logging
import os
import sys


from mixedav.config import load_config
from mixedav.controllers import FollowerStopperExpert
from mixedav.imitation import AVAgent, TrainingFault, WarmupCache
from mixedav.imitation import ScenarioSampler, evaluate_policy_mse
from mixedav.imitation import make_controller, mean_learning_curve
from mixedav.imitation import train_dagger, write_learning_curve
from mixedav.metrics import bin_space_time, compute_metrics, run_sweep
from mixedav.metrics import write_metrics_csv
from mixedav.network import ConfigurationError, SimulationFault
from mixedav.network import run_horizon, warm_up
from mixedav.neural import CheckpointError, ContractError, OptimizerFault
from mixedav.neural import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_FAULT = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _controller(cfg):
    """AV controller and the penetration rate for ``cfg.run``."""
    name = cfg.run.controller
    sweep = cfg.sweep
    if cfg.run.checkpoint is not None:
        key = {"imitated_current": "checkpoint_current",
               "imitated_history": "checkpoint_history"}.get(name)
        if key is not None:
            from dataclasses import replace
            sweep = replace(sweep, **{key: cfg.run.checkpoint})
    if name.startswith("imitated"):
        path = (sweep.checkpoint_current if name == "imitated_current"
                else sweep.checkpoint_history)
        if path is None or not os.path.exists(path):
            raise ConfigurationError("run.checkpoint",
                                     f"missing checkpoint for {name}: {path!r}")
    controller = make_controller(name, sweep, cfg.fs)
    pen = 0.0 if name == "baseline" else cfg.sim.penetration
    return controller, pen


def cmd_simulate(args, cfg):
    sim = cfg.sim_config(args.seed)
    controller, pen = _controller(cfg)
    sim = sim.with_(penetration=pen)
    state = warm_up(cfg.network, sim)
    if hasattr(controller, "reset"):
        controller.reset()
    run_horizon(state, cfg.network, sim, controller)
    os.makedirs(args.out, exist_ok=True)
    log = state.trajectory_log
    log.write_csv(os.path.join(args.out, "trajectory.csv"))
    rec = compute_metrics(log, cfg.network, sim, cfg.energy,
                          interventions=getattr(controller, "interventions", 0))
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), rec)
    grid = bin_space_time(log, cfg.network.length_m, cfg.network.num_lanes)
    for lane in range(cfg.network.num_lanes):
        grid.to_csv(os.path.join(args.out, f"spacetime_lane{lane}.csv"), lane)
    print(f"mpg {rec.mpg:.3f}  mean|a| {rec.mean_abs_accel:.4f}  "
          f"throughput {rec.throughput:.1f}")
    return EXIT_OK


def cmd_train(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    cache = WarmupCache(args.cache)
    curves = []
    base = 0 if args.seed is None else args.seed
    for k in range(cfg.dagger.seeds):
        seed = base + k
        seed_dir = os.path.join(args.out, f"seed{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        result = train_dagger(cfg.dagger, cfg.obs, seed,
                              FollowerStopperExpert(cfg.fs), cache,
                              cfg.network, cfg.sim_config(),
                              checkpoint_dir=seed_dir if args.keep_epochs
                              else None)
        save_checkpoint(result.params, os.path.join(seed_dir, "policy.ckpt"))
        write_learning_curve(os.path.join(seed_dir, "learning_curve.csv"),
                             result.curve)
        curves.append(result.curve)
        last = result.curve[-1]
        print(f"seed {seed}: final train {last['train_mse']:.4g} "
              f"heldout {last['heldout_mse']:.4g}")
    write_learning_curve(os.path.join(args.out, "learning_curve.csv"),
                         mean_learning_curve(curves))
    return EXIT_OK


def cmd_evaluate(args, cfg):
    path = args.checkpoint or cfg.run.checkpoint
    if path is None:
        raise ConfigurationError("--checkpoint", "no checkpoint given")
    try:
        policy = load_checkpoint(path)
    except OSError as exc:
        raise ConfigurationError("--checkpoint",
                                 f"cannot read {path}: {exc.strerror}") from None
    except CheckpointError as exc:
        raise ConfigurationError("--checkpoint", f"{path}: {exc}") from None
    from mixedav.imitation import ObservationSpec
    from dataclasses import replace
    obs = cfg.obs
    if policy.input_dim != obs.input_dim:
        if policy.input_dim % 3:
            raise ConfigurationError("--checkpoint",
                                     f"{path}: input width {policy.input_dim}")
        obs = replace(obs, history_N=policy.input_dim // 3 - 1)
    expert = FollowerStopperExpert(cfg.fs)
    cache = WarmupCache(args.cache)
    base = 0 if args.seed is None else args.seed
    sampler = ScenarioSampler(cfg.dagger.heldout_inflows,
                              cfg.dagger.heldout_limits, None, cfg.network,
                              cfg.sim_config())
    conds = cfg.dagger.heldout_conditions()
    scenarios = [sampler.scenario(i, l, base + 10_000 + k)
                 for k, (i, l) in enumerate(conds)]
    mse, per = evaluate_policy_mse(policy, expert, obs, scenarios, cache,
                                   cfg.dagger.heldout_horizon_s)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "evaluation.csv"), "w") as f:
        f.write("inflow,limit,mse\n")
        for (i, l), m in zip(conds, per):
            f.write(f"{i:g},{l:g},{m:.9g}\n")
        f.write(f"all,all,{mse:.9g}\n")
    sim = cfg.sim_config(args.seed)
    agent = AVAgent(obs, expert, policy=policy)
    state = cache.get(cfg.network, sim)
    run_horizon(state, cfg.network, sim, agent)
    rec = compute_metrics(state.trajectory_log, cfg.network, sim, cfg.energy,
                          interventions=agent.interventions)
    write_metrics_csv(os.path.join(args.out, "metrics.csv"), rec)
    print(f"held-out mse {mse:.4g}  mean|a| {rec.mean_abs_accel:.4f}  "
          f"mpg {rec.mpg:.3f}")
    return EXIT_OK


def cmd_sweep(args, cfg):
    sweep = cfg.sweep
    if args.seed is not None:
        from dataclasses import replace
        sweep = replace(sweep, seeds=(args.seed,))
    rows = run_sweep(sweep, args.out, cfg.network, cfg.sim_config(),
                     cfg.energy, cfg.fs)
    print(f"{len(rows)} runs in {os.path.join(args.out, 'sweep.csv')}")
    return EXIT_OK


def cmd_selftest(args, cfg):
    from mixedav.selftest import run_selftest
    return EXIT_OK if run_selftest() else EXIT_FAULT


def build_parser():
    parser = _Parser(prog="mixedav",
                     description="Mixed-autonomy highway simulation and "
                     "imitation of a wave-smoothing controller.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, func, helptext in (
            ("simulate", cmd_simulate, "run one scenario"),
            ("train", cmd_train, "train policies with DAgger"),
            ("evaluate", cmd_evaluate, "score a checkpoint on held-out "
             "scenarios"),
            ("sweep", cmd_sweep, "evaluate a grid of scenarios"),
            ("selftest", cmd_selftest, "run the built-in invariant checks")):
        p = sub.add_parser(name, help=helptext)
        p.set_defaults(func=func)
        if name == "selftest":
            continue
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="simulation or base seed")
        p.add_argument("--out", default=".", help="output directory")
        if name in ("train", "evaluate"):
            p.add_argument("--cache", help="directory for cached warm-ups")
        if name == "train":
            p.add_argument("--keep-epochs", action="store_true",
                           help="write a checkpoint after every epoch")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="policy checkpoint file")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("mixedav: a subcommand is required")
    except UsageError as exc:
        print(parser.format_usage() + str(exc), file=sys.stderr)
        return EXIT_CONFIG
    if args.verbose:
        logging.basicConfig(level=logging.INFO,
                            format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(getattr(args, "config", None))
        return args.func(args, cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationFault, TrainingFault, OptimizerFault,
            ContractError) as exc:
        print(f"fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
