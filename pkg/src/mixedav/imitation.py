"""Imitation of the Follower Stopper expert from local observations.

The learned policy sees, for its own AV, only the ego speed, the gap to the
leader and the leader speed, plus a short history of those three values
sampled every ``sample_interval_dt`` seconds. The expert additionally knows
the downstream speed limit; DAgger is used to remove that dependence.
"""
from collections import deque
from dataclasses import dataclass, asdict, field
import csv
import functools
import hashlib
import logging
import os
import pickle

import numpy as np

from mixedav.controllers import FollowerStopperExpert
from mixedav.controllers import FollowerStopperParams
from mixedav.network import NetworkSpec, SimConfig, SimulationFault
from mixedav.network import run_horizon, warm_up
from mixedav.neural import Dataset, init_adam, init_mlp, load_checkpoint
from mixedav.neural import predict, train_epoch

logger = logging.getLogger(__name__)

#: gap substituted when an AV has no leader, in m
NO_LEADER_GAP = 100.0


class TrainingFault(RuntimeError):
    """Raised when a policy produces unusable actions during DAgger."""

    def __init__(self, epoch, message):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class ObservationSpec:
    """Layout of the policy input.

    Attributes
    ----------
    history_N : int
        number of past samples appended to the current one
    sample_interval_dt : float
        time between two history samples, in s
    scales : tuple of float
        normalization of (ego speed, gap, leader speed)
    """

    history_N: int = 5
    sample_interval_dt: float = 2.0
    scales: tuple = (40.0, 100.0, 40.0)

    def __post_init__(self):
        object.__setattr__(self, "scales",
                           tuple(float(s) for s in self.scales))
        if self.history_N < 0 or len(self.scales) != 3 or \
                min(self.scales) <= 0 or not self.sample_interval_dt > 0:
            raise ValueError("invalid observation spec")

    @property
    def input_dim(self):
        return 3 * (self.history_N + 1)


class HistoryBuffer:
    """Past ``(v, h, v_l)`` samples of one AV, newest first."""

    def __init__(self, spec):
        self.spec = spec
        self._buf = deque(maxlen=spec.history_N)

    def __len__(self):
        return len(self._buf)

    def push(self, triple):
        if self.spec.history_N > 0:
            self._buf.appendleft(tuple(float(x) for x in triple))

    def entries(self):
        return list(self._buf)


def local_triple(v, gap, v_lead):
    """Return ``(v, h, v_l)`` with the no-leader substitution applied."""
    if np.isinf(gap):
        return v, NO_LEADER_GAP, v
    return v, gap, v_lead


def encode_observation(buf, current, spec):
    """Return the normalized observation vector of one AV.

    The current triple comes first, followed by the buffered history from
    newest to oldest. Missing history entries are filled with the current
    triple.
    """
    current = local_triple(*current)
    triples = [current] + buf.entries()
    triples += [current] * (spec.history_N + 1 - len(triples))
    return (np.asarray(triples, dtype=float) / np.asarray(spec.scales)).ravel()


class AVAgent:
    """AV controller that acts with the expert or a policy and records
    expert-labelled observations.

    Parameters
    ----------
    obs_spec : ObservationSpec
        policy input layout
    expert : FollowerStopperExpert
        labelling controller
    policy : MlpParams, optional
        learned policy. When absent the expert drives.
    record : bool
        whether to store ``(observation, expert label, action)`` per AV step
    safety : bool
        override policy actions that would close the gap below
        ``min_gap`` within one step with full braking
    min_gap : float
        supervisor threshold, in m
    """

    def __init__(self, obs_spec, expert=None, policy=None, record=False,
                 safety=True, min_gap=1.0):
        self.obs_spec = obs_spec
        self.expert = FollowerStopperExpert() if expert is None else expert
        self.policy = policy
        self.record = record
        self.safety = safety
        self.min_gap = min_gap
        self.reset()

    def reset(self):
        self.histories = {}
        self.observations = []
        self.labels = []
        self.actions = []
        self.interventions = 0
        self._steps = 0

    def _observe(self, view):
        gap = np.where(np.isinf(view.gap), NO_LEADER_GAP, view.gap)
        lead = np.where(np.isinf(view.gap), view.speed, view.lead_speed)
        current = np.column_stack([view.speed, gap, lead])
        rows = []
        for vid, cur in zip(view.ids, current):
            buf = self.histories.get(int(vid))
            if buf is None:
                buf = self.histories[int(vid)] = HistoryBuffer(self.obs_spec)
            rows.append(encode_observation(buf, cur, self.obs_spec))
        obs = np.array(rows).reshape(len(current), self.obs_spec.input_dim)
        return obs, current

    def _advance(self, view, current):
        every = max(int(round(self.obs_spec.sample_interval_dt / view.cfg.dt)),
                    1)
        if self._steps % every == 0:
            for vid, cur in zip(view.ids, current):
                self.histories[int(vid)].push(cur)
            present = set(int(i) for i in view.ids)
            for vid in list(self.histories):
                if vid not in present:
                    del self.histories[vid]
        self._steps += 1

    def __call__(self, view):
        obs, current = self._observe(view)
        labels = self.expert(view)
        fs = self.expert.params
        if self.policy is None:
            actions = labels
        else:
            raw = np.atleast_1d(predict(self.policy, obs))
            if not np.all(np.isfinite(raw)):
                bad = int(view.ids[~np.isfinite(raw)][0])
                raise SimulationFault(bad, view.state.time,
                                      "policy produced a non-finite action")
            actions = np.clip(raw, -fs.decel_max, fs.a_max)
        applied = actions
        if self.policy is not None and self.safety:
            dt = view.cfg.dt
            next_speed = np.maximum(view.speed + actions * dt, 0.0)
            next_gap = view.gap + (view.lead_speed - next_speed) * dt
            unsafe = next_gap < self.min_gap
            if np.any(unsafe):
                self.interventions += int(np.sum(unsafe))
                applied = np.where(unsafe, -fs.decel_max, actions)
        if self.record:
            self.observations.append(obs)
            self.labels.append(np.asarray(labels, dtype=float))
            self.actions.append(np.asarray(actions, dtype=float))
        self._advance(view, current)
        return applied

    def dataset(self):
        """Return the recorded ``(observation, expert label)`` pairs."""
        data = Dataset(self.obs_spec.input_dim)
        if self.observations:
            data.append(np.concatenate(self.observations),
                        np.concatenate(self.labels))
        return data

    def squared_errors(self):
        """Squared differences between recorded actions and expert labels."""
        if not self.actions:
            return np.zeros(0)
        return (np.concatenate(self.actions) - np.concatenate(self.labels)) ** 2


@dataclass(frozen=True)
class DaggerConfig:
    """Schedule of the DAgger training loop.

    Attributes
    ----------
    init_rollouts : int
        expert rollouts used to build the initial dataset
    init_samples : int
        size of the initial dataset
    samples_per_epoch : int
        policy-visited samples aggregated after every epoch
    epochs : int
        number of DAgger epochs
    total_samples_target : int
        must equal ``init_samples + epochs * samples_per_epoch``
    inflows, limits : tuple of float
        training distribution of boundary conditions
    seeds : int
        number of independent training seeds
    heldout_inflows, heldout_limits : tuple of float
        evaluation boundary conditions
    heldout_horizon_s : float
        horizon of the held-out evaluation rollouts, in s
    rollout_horizon_s : float
        horizon of the training rollouts, in s
    seed_pool : int or None
        number of distinct simulation seeds per training condition; None
        draws a fresh seed for every rollout
    passes_per_epoch : int
        training passes over the aggregated dataset per epoch
    hidden : tuple of int
        hidden layer widths
    dropout_rate, lr : float
        network and optimizer settings
    batch_size : int
        minibatch size
    """

    init_rollouts: int = 20
    init_samples: int = 30000
    samples_per_epoch: int = 7500
    epochs: int = 100
    total_samples_target: int = 780000
    inflows: tuple = tuple(float(x) for x in range(1900, 2301, 50))
    limits: tuple = (5.0, 6.0, 7.0)
    seeds: int = 5
    heldout_inflows: tuple = (1925.0, 2125.0, 2275.0)
    heldout_limits: tuple = (5.0, 6.0, 7.0)
    heldout_horizon_s: float = 600.0
    rollout_horizon_s: float = 600.0
    seed_pool: int = None
    passes_per_epoch: int = 1
    hidden: tuple = (32, 32, 32)
    dropout_rate: float = 0.1
    lr: float = 1e-3
    batch_size: int = 128

    def validate(self):
        from mixedav.network import ConfigurationError
        if self.init_samples + self.epochs * self.samples_per_epoch != \
                self.total_samples_target:
            raise ConfigurationError(
                "total_samples_target",
                "must equal init_samples + epochs * samples_per_epoch")
        if self.passes_per_epoch < 1:
            raise ConfigurationError("passes_per_epoch", "must be >= 1")
        if self.init_rollouts < 1:
            raise ConfigurationError("init_rollouts", "must be >= 1")
        if not self.inflows or not self.limits:
            raise ConfigurationError("inflows", "grids must be non-empty")

    @classmethod
    def desk(cls, **overrides):
        """Reduced schedule taking a few minutes per seed on one CPU."""
        base = dict(init_rollouts=4, init_samples=5000, samples_per_epoch=1500,
                    epochs=10, total_samples_target=20000, seeds=2,
                    heldout_horizon_s=300.0, seed_pool=2, passes_per_epoch=20)
        base.update(overrides)
        return cls(**base)

    def heldout_conditions(self):
        return [(i, l) for i in self.heldout_inflows
                for l in self.heldout_limits]


@functools.lru_cache(maxsize=1)
def _simulator_fingerprint():
    """Hash of the simulator sources, so stale disk caches are not reused."""
    import mixedav.controllers
    import mixedav.network
    h = hashlib.sha1()
    for mod in (mixedav.network, mixedav.controllers):
        with open(mod.__file__, "rb") as f:
            h.update(f.read())
    return h.hexdigest()[:16]


class WarmupCache:
    """Memoizes warm-up states, optionally on disk.

    Warm-ups only depend on the network, the humans and the seed, so one
    warm-up can serve every controller evaluated on the same scenario.
    """

    def __init__(self, directory=None):
        self.directory = directory
        self._mem = {}
        if directory is not None:
            os.makedirs(directory, exist_ok=True)

    @staticmethod
    def _key(spec, cfg):
        cfg = cfg.with_(penetration=0.0, horizon_s=0.0)
        return repr((spec, cfg, _simulator_fingerprint()))

    def get(self, spec, cfg):
        """Return a fresh copy of the warm-up state for ``(spec, cfg)``."""
        key = self._key(spec, cfg)
        state = self._mem.get(key)
        if state is None and self.directory is not None:
            path = os.path.join(self.directory, hashlib.sha1(
                key.encode()).hexdigest() + ".pkl")
            if os.path.exists(path):
                with open(path, "rb") as f:
                    state = pickle.load(f)
            else:
                state = warm_up(spec, cfg)
                with open(path + ".tmp", "wb") as f:
                    pickle.dump(state, f)
                os.replace(path + ".tmp", path)
        if state is None:
            state = warm_up(spec, cfg)
        self._mem[key] = state
        return state.copy()


class ScenarioSampler:
    """Draws boundary conditions uniformly from a grid.

    Each draw gets a simulation seed from the sampler's stream, taken from
    ``range(seed_pool)`` when a pool size is given so that warm-ups can be
    reused across draws.
    """

    def __init__(self, inflows, limits, rng, base_spec=None, base_cfg=None,
                 seed_pool=None):
        self.seed_pool = seed_pool
        self.inflows = tuple(inflows)
        self.limits = tuple(limits)
        self.rng = rng
        self.base_spec = NetworkSpec() if base_spec is None else base_spec
        self.base_cfg = SimConfig() if base_cfg is None else base_cfg

    def scenario(self, inflow, limit, seed):
        spec = NetworkSpec(**{**asdict(self.base_spec),
                              "downstream_speed_limit": float(limit)})
        cfg = self.base_cfg.with_(inflow_rate=float(inflow), seed=int(seed))
        return spec, cfg

    def __call__(self):
        inflow = self.inflows[self.rng.integers(len(self.inflows))]
        limit = self.limits[self.rng.integers(len(self.limits))]
        seed = int(self.rng.integers(self.seed_pool or 2 ** 31))
        return self.scenario(inflow, limit, seed)


def rollout(spec, cfg, agent, cache=None, horizon_s=None):
    """Run one controlled horizon with ``agent`` driving the AVs."""
    cache = WarmupCache() if cache is None else cache
    if horizon_s is not None:
        cfg = cfg.with_(horizon_s=float(horizon_s))
    state = cache.get(spec, cfg)
    agent.reset()
    run_horizon(state, spec, cfg, agent)
    return state


def collect_expert_rollouts(n, sampler, expert, obs_spec, budget, rng,
                            cache=None, horizon_s=None):
    """Build a dataset from ``n`` expert rollouts.

    Every AV decision of every rollout is recorded, then the pooled samples
    are reduced uniformly at random to ``budget``.
    """
    if n < 1:
        raise ValueError("need at least one rollout")
    pooled = Dataset(obs_spec.input_dim)
    for _ in range(n):
        spec, cfg = sampler()
        agent = AVAgent(obs_spec, expert, policy=None, record=True)
        rollout(spec, cfg, agent, cache, horizon_s)
        pooled.extend(agent.dataset())
    return pooled.subsample(budget, rng)


def train_passes(p, opt, data, cfg, rng):
    """Run ``cfg.passes_per_epoch`` training passes; return the last loss."""
    for _ in range(cfg.passes_per_epoch):
        p, opt, loss = train_epoch(p, opt, data, cfg.batch_size, rng)
    return p, opt, loss


def dagger_iteration(p, opt, data, cfg, expert, obs_spec, sampler, rng,
                     cache=None, epoch=0):
    """One DAgger epoch: policy rollout, expert relabelling, aggregation,
    training.

    The current policy drives the AVs; the expert labels every visited
    state with its own action; ``cfg.samples_per_epoch`` of those pairs are
    appended to ``data`` (in place) before ``cfg.passes_per_epoch``
    training passes over the aggregate.

    Returns
    -------
    Dataset, MlpParams, AdamState, dict
        aggregated dataset, updated policy, optimizer and epoch statistics

    Raises
    ------
    TrainingFault
        if the policy emits non-finite actions
    """
    if len(data) == 0:
        raise ValueError("DAgger needs a non-empty initial dataset")
    spec, sim_cfg = sampler()
    agent = AVAgent(obs_spec, expert, policy=p, record=True)
    try:
        rollout(spec, sim_cfg, agent, cache, cfg.rollout_horizon_s)
    except SimulationFault as exc:
        raise TrainingFault(epoch, str(exc)) from exc
    visited = agent.dataset()
    if len(visited) < cfg.samples_per_epoch:
        raise TrainingFault(epoch, f"rollout produced only {len(visited)} "
                            f"samples, {cfg.samples_per_epoch} needed")
    data.extend(visited.subsample(cfg.samples_per_epoch, rng))
    p, opt, loss = train_passes(p, opt, data, cfg, rng)
    info = {"train_mse": loss, "interventions": agent.interventions,
            "samples": len(data)}
    return data, p, opt, info


def evaluate_policy_mse(p, expert, obs_spec, scenarios, cache=None,
                        horizon_s=None):
    """Mean squared difference between policy and expert actions.

    The policy drives the AVs on each scenario; at every AV decision its
    (clipped) action is compared with the expert's label.

    Returns
    -------
    float, list of float
        pooled MSE over all decisions and the per-scenario MSEs
    """
    errs, per = [], []
    for spec, cfg in scenarios:
        agent = AVAgent(obs_spec, expert, policy=p, record=True)
        rollout(spec, cfg, agent, cache, horizon_s)
        e = agent.squared_errors()
        per.append(float(np.mean(e)) if len(e) else 0.0)
        errs.append(e)
    pooled = np.concatenate(errs) if errs else np.zeros(0)
    return (float(np.mean(pooled)) if len(pooled) else 0.0), per


@dataclass
class TrainingResult:
    """Outcome of one DAgger training run."""

    params: object
    curve: list = field(default_factory=list)
    dataset_sizes: list = field(default_factory=list)


LEARNING_CURVE_COLUMNS = ("epoch", "train_mse", "heldout_mse", "samples")


def train_dagger(cfg, obs_spec, seed, expert=None, cache=None,
                 base_spec=None, base_cfg=None, evaluate=True,
                 checkpoint_dir=None):
    """Train a policy with DAgger from scratch.

    The initial dataset comes from ``cfg.init_rollouts`` expert rollouts and
    is trained on for one epoch (epoch 0); then ``cfg.epochs`` DAgger
    iterations follow. Held-out evaluation runs after every epoch when
    ``evaluate`` is set.

    Random streams for initialization, shuffling and dropout, scenario
    sampling and subsampling are all derived from ``seed``; scenario draws
    do not depend on the observation layout, so ablations see the same
    traffic.
    """
    from mixedav.neural import save_checkpoint
    cfg.validate()
    expert = FollowerStopperExpert() if expert is None else expert
    cache = WarmupCache() if cache is None else cache
    ss_init, ss_train, ss_scen, ss_sub = np.random.SeedSequence(seed).spawn(4)
    init_rng = np.random.default_rng(ss_init)
    train_rng = np.random.default_rng(ss_train)
    sub_rng = np.random.default_rng(ss_sub)
    sampler = ScenarioSampler(cfg.inflows, cfg.limits,
                              np.random.default_rng(ss_scen), base_spec,
                              base_cfg, cfg.seed_pool)
    heldout_sampler = ScenarioSampler(cfg.heldout_inflows, cfg.heldout_limits,
                                      None, base_spec, base_cfg)
    heldout = [heldout_sampler.scenario(i, l, 10_000 + k)
               for k, (i, l) in enumerate(cfg.heldout_conditions())]

    layer_sizes = (obs_spec.input_dim,) + tuple(cfg.hidden) + (1,)
    p = init_mlp(layer_sizes, init_rng, cfg.dropout_rate)
    opt = init_adam(p, lr=cfg.lr)

    data = collect_expert_rollouts(cfg.init_rollouts, sampler, expert,
                                   obs_spec, cfg.init_samples, sub_rng, cache,
                                   cfg.rollout_horizon_s)
    p, opt, loss = train_passes(p, opt, data, cfg, train_rng)
    result = TrainingResult(params=p)

    def log_epoch(epoch, loss):
        mse = float("nan")
        if evaluate:
            mse, _ = evaluate_policy_mse(p, expert, obs_spec, heldout, cache,
                                         cfg.heldout_horizon_s)
        result.curve.append({"epoch": epoch, "train_mse": loss,
                             "heldout_mse": mse, "samples": len(data)})
        result.dataset_sizes.append(len(data))
        if checkpoint_dir is not None:
            save_checkpoint(p, os.path.join(checkpoint_dir,
                                            f"policy_epoch{epoch:03d}.ckpt"))
        logger.info("epoch %d: train %.4g heldout %.4g samples %d", epoch,
                    loss, mse, len(data))

    log_epoch(0, loss)
    for epoch in range(1, cfg.epochs + 1):
        data, p, opt, info = dagger_iteration(
            p, opt, data, cfg, expert, obs_spec, sampler, sub_rng, cache,
            epoch)
        log_epoch(epoch, info["train_mse"])
    result.params = p
    return result


def write_learning_curve(path, curve):
    """Write ``epoch,train_mse,heldout_mse,samples`` rows."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LEARNING_CURVE_COLUMNS)
        for row in curve:
            w.writerow([row["epoch"], "%.9g" % row["train_mse"],
                        "%.9g" % row["heldout_mse"], row["samples"]])


def mean_learning_curve(curves):
    """Average learning curves of several seeds epoch by epoch."""
    out = []
    for rows in zip(*curves):
        out.append({
            "epoch": rows[0]["epoch"],
            "train_mse": float(np.mean([r["train_mse"] for r in rows])),
            "heldout_mse": float(np.mean([r["heldout_mse"] for r in rows])),
            "samples": rows[0]["samples"],
        })
    return out


def make_controller(name, sweep=None, fs_params=None):
    """Build the AV controller a sweep or CLI run refers to by name.

    ``baseline`` returns None (no AVs are tagged), ``expert`` the Follower
    Stopper, and the imitated variants an :class:`AVAgent` around the
    checkpoint named in ``sweep``.
    """
    expert = FollowerStopperExpert(fs_params)
    if name == "baseline":
        return None
    if name == "expert":
        return expert
    if name == "imitated_current":
        obs_spec = ObservationSpec(history_N=0)
        path = sweep.checkpoint_current
    elif name == "imitated_history":
        obs_spec = ObservationSpec()
        path = sweep.checkpoint_history
    else:
        raise ValueError(f"unknown controller {name!r}")
    policy = load_checkpoint(path)
    if policy.input_dim != obs_spec.input_dim:
        # allow any history length stored in the checkpoint
        if policy.input_dim % 3:
            raise ValueError(f"{path}: input width {policy.input_dim} is not "
                             "a multiple of 3")
        obs_spec = ObservationSpec(history_N=policy.input_dim // 3 - 1)
    return AVAgent(obs_spec, expert, policy=policy)
