"""Closed-form driving laws for human and automated vehicles.

Human vehicles follow the Intelligent Driver Model (IDM). Automated vehicles
use a Follower Stopper velocity controller, optionally with a quadratic
gap-recovery term, whose speed command is turned into an acceleration by a
one-step speed tracker.

Every law comes in a scalar form (used by tests and small scenarios) and a
vectorized numpy form used by the simulator. The two share the same code
path: the scalar functions wrap the array functions.
"""
from dataclasses import dataclass
import logging

import numpy as np

logger = logging.getLogger(__name__)

#: emergency deceleration and physicality bound, in m/s^2
EMERGENCY_DECEL = 9.0
#: gap used for the gap-recovery term when no leader exists, in m
NO_LEADER_GAP_CAP = 100.0


@dataclass(frozen=True)
class IdmParams:
    """Intelligent Driver Model parameters.

    Attributes
    ----------
    v0 : float
        desirable velocity, in m/s
    T : float
        safe time headway, in s
    a : float
        max acceleration, in m/s2
    b : float
        comfortable deceleration, in m/s2
    delta : float
        acceleration exponent
    s0 : float
        linear jam distance, in m
    noise_std : float
        standard deviation of the additive acceleration noise, in m/s2
    """

    v0: float = 30.0
    T: float = 1.0
    a: float = 1.3
    b: float = 2.0
    delta: float = 4.0
    s0: float = 2.0
    noise_std: float = 0.3

    def __post_init__(self):
        for name in ("v0", "T", "a", "b", "delta", "s0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"IdmParams.{name} must be positive")
        if not self.noise_std >= 0:
            raise ValueError("IdmParams.noise_std must be non-negative")


@dataclass(frozen=True)
class FollowerStopperParams:
    """Follower Stopper parameters.

    Attributes
    ----------
    dx0 : tuple of float
        region intercepts at zero closing speed, in m
    d : tuple of float
        deceleration rates shaping each region, in m/s2
    a_max : float
        maximum acceleration of the lower-level controller, in m/s2
    c : float
        gap-recovery gain, in 1/(m s). Zero recovers the original controller.
    decel_max : float
        maximum deceleration of the lower-level controller, in m/s2
    k_p : float or None
        speed-tracking gain, in 1/s. None means 1/dt.
    """

    dx0: tuple = (4.5, 5.25, 6.0)
    d: tuple = (1.5, 1.0, 0.5)
    a_max: float = 1.0
    c: float = 0.001
    decel_max: float = 3.0
    k_p: float = None

    def __post_init__(self):
        dx0 = tuple(float(x) for x in self.dx0)
        d = tuple(float(x) for x in self.d)
        object.__setattr__(self, "dx0", dx0)
        object.__setattr__(self, "d", d)
        if len(dx0) != 3 or not dx0[0] < dx0[1] < dx0[2]:
            raise ValueError("FollowerStopperParams.dx0 must be increasing")
        if len(d) != 3 or not d[0] > d[1] > d[2] > 0:
            raise ValueError("FollowerStopperParams.d must be decreasing "
                             "and positive")
        if not self.c >= 0:
            raise ValueError("FollowerStopperParams.c must be non-negative")
        if not (self.a_max > 0 and self.decel_max > 0):
            raise ValueError("FollowerStopperParams acceleration bounds must "
                             "be positive")


def idm_desired_gap(v, v_lead, p):
    """Return the IDM desired gap s*, floored at the jam distance."""
    v = np.asarray(v, dtype=float)
    dyn = v * p.T + v * (v - v_lead) / (2.0 * np.sqrt(p.a * p.b))
    return p.s0 + np.maximum(0.0, dyn)


def idm_accel_array(v, gap, v_lead, p, noise=0.0, v0=None):
    """Vectorized IDM acceleration.

    Parameters
    ----------
    v : array_like
        ego speeds, in m/s
    gap : array_like
        bumper-to-bumper gaps, in m. ``inf`` marks the absence of a leader.
    v_lead : array_like
        leader speeds, in m/s (ignored where the gap is infinite)
    p : IdmParams
        model parameters
    noise : array_like
        additive acceleration samples
    v0 : array_like, optional
        per-vehicle desired speed overriding ``p.v0`` (speed-limit zones)

    Returns
    -------
    np.ndarray
        accelerations clipped to [-9, 2a]. Non-positive gaps yield -9.
    """
    v = np.asarray(v, dtype=float)
    gap = np.asarray(gap, dtype=float)
    v_lead = np.where(np.isinf(gap), v, v_lead)
    v0 = p.v0 if v0 is None else np.asarray(v0, dtype=float)

    s_star = idm_desired_gap(v, v_lead, p)
    safe = gap > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        interaction = np.where(safe, (s_star / np.where(safe, gap, 1.0)) ** 2,
                               0.0)
    accel = p.a * (1.0 - (v / v0) ** p.delta - interaction) + noise
    accel = np.clip(accel, -EMERGENCY_DECEL, 2.0 * p.a)
    return np.where(safe, accel, -EMERGENCY_DECEL)


def idm_accel(v, gap, v_lead, p, noise_sample=0.0):
    """Return the IDM acceleration of a single vehicle, in m/s2.

    A missing leader is expressed with ``gap=float('inf')``. A non-positive
    gap returns the emergency deceleration and logs a safety event.
    """
    if gap <= 0:
        logger.warning("IDM gap %.3f m <= 0: emergency braking", gap)
    return float(idm_accel_array(v, gap, v_lead, p, noise_sample))


def delta_x(k, dv, p):
    """Return the k-th Follower Stopper region boundary, in m.

    Parameters
    ----------
    k : int
        region index, 1, 2 or 3
    dv : float
        leader speed minus ego speed, in m/s
    p : FollowerStopperParams
        controller parameters
    """
    if k not in (1, 2, 3):
        raise ValueError(f"region index must be 1, 2 or 3, got {k!r}")
    dv_minus = min(dv, 0.0)
    return p.dx0[k - 1] + dv_minus ** 2 / (2.0 * p.d[k - 1])


def region_boundaries(dv, p):
    """Return the sorted region boundaries for an array of speed differences.

    The raw boundaries can cross for large closing speeds (d_1 > d_2 > d_3
    means the outer boundaries grow faster), so they are sorted per row.

    Returns
    -------
    np.ndarray
        array of shape ``dv.shape + (3,)``
    """
    dv_minus = np.minimum(np.asarray(dv, dtype=float), 0.0)
    dx0 = np.asarray(p.dx0)
    d = np.asarray(p.d)
    raw = dx0 + dv_minus[..., None] ** 2 / (2.0 * d)
    return np.sort(raw, axis=-1)


def fs_command_velocity_array(v_av, gap, v_lead, U, p, c=None):
    """Vectorized Follower Stopper speed command.

    Parameters
    ----------
    v_av, gap, v_lead, U : array_like
        ego speed, bumper-to-bumper gap, leader speed and desired speed.
        An infinite gap marks the absence of a leader; the command is then
        ``U`` plus the recovery term evaluated at a capped gap.
    p : FollowerStopperParams
        controller parameters
    c : float, optional
        overrides ``p.c``

    Returns
    -------
    np.ndarray
        commanded speeds, in m/s
    """
    c = p.c if c is None else c
    v_av, gap, v_lead, U = np.broadcast_arrays(
        *(np.asarray(x, dtype=float) for x in (v_av, gap, v_lead, U)))
    no_leader = np.isinf(gap)
    gap = np.where(no_leader, np.inf, gap)
    v_lead = np.where(no_leader, v_av, v_lead)

    bounds = region_boundaries(v_lead - v_av, p)
    x1, x2, x3 = bounds[..., 0], bounds[..., 1], bounds[..., 2]
    v = np.minimum(np.maximum(v_lead, 0.0), U)

    with np.errstate(divide="ignore", invalid="ignore"):
        ramp = v * (gap - x1) / (x2 - x1)
        blend = v + (U - v) * (gap - x2) / (x3 - x2)
    # degenerate (zero-width) regions collapse onto their upper endpoint
    ramp = np.where(x2 > x1, ramp, v)
    blend = np.where(x3 > x2, blend, U)
    far_gap = np.where(no_leader, NO_LEADER_GAP_CAP, gap)
    recovery = U + c * np.maximum(far_gap - x3, 0.0) ** 2

    return np.select(
        [gap <= x1, gap <= x2, gap <= x3],
        [np.zeros_like(gap), ramp, blend],
        default=recovery,
    )


def fs_command_velocity(v_av, gap, v_lead, U, p, v0=None):
    """Return the Follower Stopper speed command of a single AV, in m/s.

    ``gap=float('inf')`` marks the absence of a leader, in which case the
    command is ``min(U + c (100 - dx_3)^2, v0)``.
    """
    v_cmd = float(fs_command_velocity_array(v_av, gap, v_lead, U, p))
    if np.isinf(gap) and v0 is not None:
        v_cmd = min(v_cmd, v0)
    return v_cmd


def speed_command_to_accel(v, v_cmd, p, dt):
    """Convert a speed command into a bounded acceleration, in m/s2.

    The tracker reaches the command in one step (gain ``1/dt`` unless
    ``p.k_p`` is set) and the result is clipped to ``[-decel_max, a_max]``.
    Works on scalars and arrays.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    k_p = 1.0 / dt if p.k_p is None else p.k_p
    accel = np.clip(k_p * (np.asarray(v_cmd) - np.asarray(v)),
                    -p.decel_max, p.a_max)
    return float(accel) if np.ndim(accel) == 0 else accel


def harmonic_mean_speed(speeds):
    """Return the harmonic mean of a collection of speeds.

    Stopped vehicles make the harmonic mean zero.
    """
    speeds = np.asarray(speeds, dtype=float)
    if np.any(speeds <= 0):
        return 0.0
    return float(len(speeds) / np.sum(1.0 / speeds))


def desired_speed_U(spec, state, mode="configured"):
    """Return the Follower Stopper desired speed, in m/s.

    Parameters
    ----------
    spec : mixedav.network.NetworkSpec
        network description. The downstream speed limit is privileged,
        non-local information.
    state : mixedav.network.SimState or None
        current simulation state, used by the ``measured`` mode
    mode : {"configured", "measured"}
        ``configured`` returns the downstream speed limit; ``measured``
        returns the harmonic-mean speed inside the speed-limit zone and falls
        back to the limit when the zone is empty.
    """
    if mode == "configured":
        return float(spec.downstream_speed_limit)
    if mode != "measured":
        raise ValueError(f"unknown desired-speed mode {mode!r}")
    if state is None:
        return float(spec.downstream_speed_limit)
    in_zone = state.pos >= spec.length_m - spec.speed_limit_zone_length_m
    if not np.any(in_zone):
        return float(spec.downstream_speed_limit)
    return harmonic_mean_speed(state.speed[in_zone])


class FollowerStopperExpert:
    """AV controller driving the Follower Stopper at the downstream speed.

    The desired speed is read from the network (privileged information). The
    speed command is capped at the speed limit inside the reduced-limit zone
    and converted to an acceleration with :func:`speed_command_to_accel`.

    Parameters
    ----------
    params : FollowerStopperParams
        controller parameters. ``c=0`` gives the original controller.
    u_mode : {"configured", "measured"}
        how the desired speed is obtained, see :func:`desired_speed_U`
    v0 : float
        speed cap used when an AV has no leader, in m/s
    """

    def __init__(self, params=None, u_mode="configured", v0=30.0):
        self.params = FollowerStopperParams() if params is None else params
        self.u_mode = u_mode
        self.v0 = v0

    def command(self, view):
        """Return the speed command of every AV in ``view``."""
        U = desired_speed_U(view.spec, view.state, self.u_mode)
        v_cmd = fs_command_velocity_array(
            view.speed, view.gap, view.lead_speed, U, self.params)
        v_cmd = np.where(np.isinf(view.gap), np.minimum(v_cmd, self.v0), v_cmd)
        return np.where(view.in_zone,
                        np.minimum(v_cmd, view.spec.downstream_speed_limit),
                        v_cmd)

    def __call__(self, view):
        return speed_command_to_accel(view.speed, self.command(view),
                                      self.params, view.cfg.dt)


def forced_gap_error(params, U=5.0, error_s=10.0, error_speed=None,
                     release_s=200.0, dt=0.4, gap0=None):
    """Two-vehicle test of gap recovery after a forced slowdown.

    A leader drives at constant speed ``U``. The AV starts at ``U`` at the
    controller's settled gap, is forced to hold ``error_speed`` for
    ``error_s`` seconds (opening the gap), then released to the Follower
    Stopper for ``release_s`` seconds.

    Returns
    -------
    t : np.ndarray
        times after release, in s
    gap : np.ndarray
        gap at those times, in m
    x3 : float
        outer region boundary at zero speed difference, in m
    """
    error_speed = 0.5 * U if error_speed is None else error_speed
    x3 = float(region_boundaries(0.0, params)[2])
    gap = x3 if gap0 is None else gap0
    v = U
    for _ in range(int(round(error_s / dt))):
        a = speed_command_to_accel(v, error_speed, params, dt)
        v = max(v + a * dt, 0.0)
        gap += (U - v) * dt
    ts, gaps = [0.0], [gap]
    for k in range(int(round(release_s / dt))):
        v_cmd = fs_command_velocity(v, gap, U, U, params)
        a = speed_command_to_accel(v, v_cmd, params, dt)
        v_new = max(v + a * dt, 0.0)
        gap += (U - 0.5 * (v + v_new)) * dt
        v = v_new
        ts.append((k + 1) * dt)
        gaps.append(gap)
    return np.array(ts), np.array(gaps), x3
