"""Fast invariant checks runnable from an installed package.

``run_selftest`` exercises the controllers, the network, the MLP and the
configuration parser in a few seconds. It is what ``mixedav selftest``
runs; the full pytest suite covers much more.
"""
import os
import tempfile

import numpy as np

from mixedav import controllers as ctl
from mixedav import neural as nn
from mixedav.config import Config, dump_config, parse_config
from mixedav.imitation import HistoryBuffer, ObservationSpec
from mixedav.imitation import encode_observation
from mixedav.metrics import EnergyModelParams, fuel_rate
from mixedav.network import NetworkSpec, SimConfig, equilibrium_speed
from mixedav.network import init_network, step


def _fs_continuity():
    p = ctl.FollowerStopperParams()
    worst = 0.0
    for dv in np.linspace(-8, 8, 33):
        for b in ctl.region_boundaries(dv, p):
            lo = ctl.fs_command_velocity(12.0, b - 1e-10, 12.0 - dv, 20.0, p)
            hi = ctl.fs_command_velocity(12.0, b + 1e-10, 12.0 - dv, 20.0, p)
            worst = max(worst, abs(hi - lo))
    return worst < 1e-6, f"max jump {worst:.2e}"


def _fs_range():
    p = ctl.FollowerStopperParams(c=0.0)
    rng = np.random.default_rng(0)
    gap = rng.uniform(0, 80, 2000)
    v = rng.uniform(0, 30, 2000)
    vl = rng.uniform(-2, 30, 2000)
    cmd = ctl.fs_command_velocity_array(v, gap, vl, 7.0, p)
    ok = bool(np.all((cmd >= 0) & (cmd <= 7.0 + 1e-12)))
    return ok, f"range [{cmd.min():.3f}, {cmd.max():.3f}]"


def _idm_free_road():
    p = ctl.IdmParams()
    a = ctl.idm_accel(15.0, float("inf"), 15.0, p)
    want = p.a * (1 - (15.0 / p.v0) ** p.delta)
    return abs(a - want) < 1e-12, f"{a:.6f} vs {want:.6f}"


def _ring_equilibrium():
    spec = NetworkSpec(topology="ring", length_m=260.0, num_lanes=1)
    idm = ctl.IdmParams(noise_std=0.0)
    cfg = SimConfig(idm=idm, warmup_s=0.0, horizon_s=0.0, penetration=0.0)
    state = init_network(spec, cfg)
    v_eq = equilibrium_speed(260.0 / 22, idm)
    for _ in range(250):
        step(state, spec, cfg)
    dev = float(np.max(np.abs(state.speed - v_eq)))
    return dev < 1e-6, f"max deviation {dev:.2e}"


def _gradient_check():
    rng = np.random.default_rng(1)
    p = nn.init_mlp((4, 5, 1), rng, dropout_rate=0.0)
    x = rng.normal(size=(7, 4))
    y = rng.normal(size=7)
    _, cache = nn.forward(p, x)
    g = nn.backward(p, cache, y)
    h = 1e-6
    worst = 0.0
    for k in range(len(p.weights)):
        for idx in np.ndindex(p.weights[k].shape):
            up, dn = p.copy(), p.copy()
            up.weights[k][idx] += h
            dn.weights[k][idx] -= h
            fd = (nn.mse_loss(up, x, y) - nn.mse_loss(dn, x, y)) / (2 * h)
            an = g.weights[k][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd) + abs(an), 1e-8))
    return worst < 1e-4, f"max relative error {worst:.2e}"


def _checkpoint_roundtrip():
    p = nn.init_mlp((18, 8, 1), np.random.default_rng(2))
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "p.ckpt")
        nn.save_checkpoint(p, path)
        q = nn.load_checkpoint(path)
    same = all(np.array_equal(a, b) for a, b in zip(p.weights, q.weights)) \
        and all(np.array_equal(a, b) for a, b in zip(p.biases, q.biases))
    return same, "bit-exact" if same else "mismatch"


def _observation_padding():
    spec = ObservationSpec()
    obs = encode_observation(HistoryBuffer(spec), (20.0, 50.0, 20.0), spec)
    ok = obs.shape == (18,) and np.allclose(obs, 0.5)
    return ok, f"shape {obs.shape}"


def _fuel_floor():
    p = EnergyModelParams()
    v = np.linspace(0, 40, 81)
    ok = bool(np.all(fuel_rate(v, -3.0, p) >= p.idle_rate)) and \
        fuel_rate(0.0, 0.0, p) == p.idle_rate
    return ok, "idle floor holds" if ok else "floor violated"


def _config_roundtrip():
    cfg = Config()
    return parse_config(dump_config(cfg)) == cfg, "dump/parse identity"


CHECKS = (
    ("follower stopper continuity", _fs_continuity),
    ("follower stopper range", _fs_range),
    ("idm free road", _idm_free_road),
    ("ring equilibrium", _ring_equilibrium),
    ("mlp gradient", _gradient_check),
    ("checkpoint round-trip", _checkpoint_roundtrip),
    ("observation padding", _observation_padding),
    ("fuel idle floor", _fuel_floor),
    ("config round-trip", _config_roundtrip),
)


def run_selftest(out=print):
    """Run every check, report one line each, return True iff all pass."""
    all_ok = True
    for name, check in CHECKS:
        try:
            ok, detail = check()
        except Exception as exc:  # a crash is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return all_ok
