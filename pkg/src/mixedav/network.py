"""Discrete-time multi-lane highway simulation.

Vehicles live in a struct-of-arrays :class:`SimState` that is kept sorted by
``(lane, position)`` so that the leader of every vehicle is its successor in
storage order. All vehicles are advanced synchronously with a first-order
Euler scheme whose speeds are floored at zero.

Two topologies are supported: an open highway fed by a per-lane inflow and
drained by a reduced speed-limit zone at its downstream end, and a closed
ring used to study string instability.
"""
import copy
from dataclasses import dataclass, field, replace
import logging

import numpy as np
from scipy.optimize import brentq

from mixedav.controllers import EMERGENCY_DECEL
from mixedav.controllers import IdmParams
from mixedav.controllers import idm_accel_array
from mixedav.controllers import idm_desired_gap

logger = logging.getLogger(__name__)

#: lane-change incentive threshold at unit eagerness, in m/s2
LC_THRESHOLD = 0.5
#: maximum deceleration a lane change may impose on the new follower, in m/s2
LC_SAFE_DECEL = 3.0
#: time between two lane changes of the same vehicle, in s
LC_COOLDOWN = 5.0
#: headroom added to the upstream-most speed when inserting vehicles, in m/s
ENTRY_SPEED_MARGIN = 2.0
#: relative jitter of the inflow inter-arrival times
ARRIVAL_JITTER = 0.1

HUMAN, AV = "human", "av"


class ConfigurationError(ValueError):
    """Raised when a network or simulation configuration is invalid."""

    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class SimulationFault(RuntimeError):
    """Raised when a controller produces an unusable acceleration."""

    def __init__(self, vehicle_id, time, message):
        super().__init__(f"vehicle {vehicle_id} at t={time:.1f}s: {message}")
        self.vehicle_id = vehicle_id
        self.time = time


@dataclass(frozen=True)
class NetworkSpec:
    """Geometry and boundary conditions of the simulated road.

    Attributes
    ----------
    length_m : float
        road length, in m
    num_lanes : int
        number of lanes
    speed_limit_zone_length_m : float
        length of the reduced speed-limit zone at the downstream end, in m
    downstream_speed_limit : float
        speed limit inside that zone, in m/s
    mainline_speed_limit : float
        speed limit elsewhere, in m/s
    topology : {"open_highway", "ring"}
        road topology. Rings have no speed-limit zone and no inflow.
    ring_vehicles : int
        number of vehicles seeded on a ring
    """

    length_m: float = 1609.0
    num_lanes: int = 5
    speed_limit_zone_length_m: float = 100.0
    downstream_speed_limit: float = 5.0
    mainline_speed_limit: float = 30.0
    topology: str = "open_highway"
    ring_vehicles: int = 22

    def validate(self):
        if self.topology not in ("open_highway", "ring"):
            raise ConfigurationError("topology", f"unknown {self.topology!r}")
        if not self.length_m > 0:
            raise ConfigurationError("length_m", "must be positive")
        # rings have no speed-limit zone
        if self.topology == "open_highway" and \
                not self.length_m > self.speed_limit_zone_length_m > 0:
            raise ConfigurationError(
                "length_m", "must exceed speed_limit_zone_length_m > 0")
        if int(self.num_lanes) != self.num_lanes or self.num_lanes < 1:
            raise ConfigurationError("num_lanes", "must be an integer >= 1")
        if not 0 < self.downstream_speed_limit < self.mainline_speed_limit:
            raise ConfigurationError(
                "downstream_speed_limit",
                "must be positive and below mainline_speed_limit")
        if self.topology == "ring" and self.ring_vehicles < 1:
            raise ConfigurationError("ring_vehicles", "must be >= 1")

    @property
    def zone_start(self):
        """Position where the reduced speed-limit zone begins, in m."""
        return self.length_m - self.speed_limit_zone_length_m


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings.

    Attributes
    ----------
    dt : float
        simulation step, in s
    warmup_s : float
        all-human warm-up duration, in s
    horizon_s : float
        controlled horizon following the warm-up, in s
    inflow_rate : float
        inflow per lane, in veh/hr/lane
    penetration : float
        fraction of vehicles operated as AVs after the warm-up
    seed : int
        random seed
    lc_eagerness : float
        lane-change frequency multiplier. Zero disables lane changes.
    idm : IdmParams
        human driver parameters
    """

    dt: float = 0.4
    warmup_s: float = 3600.0
    horizon_s: float = 600.0
    inflow_rate: float = 2100.0
    penetration: float = 0.05
    seed: int = 0
    lc_eagerness: float = 1.0
    idm: IdmParams = field(default_factory=IdmParams)

    def validate(self):
        if not self.dt > 0:
            raise ConfigurationError("dt", "must be positive")
        if not 0 <= self.penetration <= 1:
            raise ConfigurationError("penetration", "must lie in [0, 1]")
        if not self.inflow_rate > 0:
            raise ConfigurationError("inflow_rate", "must be positive")
        if self.warmup_s < 0 or self.horizon_s < 0:
            raise ConfigurationError("horizon_s", "durations must be >= 0")
        if self.lc_eagerness < 0:
            raise ConfigurationError("lc_eagerness", "must be non-negative")

    def with_(self, **kwargs):
        """Return a copy with some fields replaced."""
        return replace(self, **kwargs)


@dataclass
class VehicleState:
    """Snapshot of a single vehicle."""

    id: int
    lane: int
    position: float
    speed: float
    accel: float
    kind: str
    length: float = 5.0
    lc_cooldown: float = 0.0


class TrajectoryLog:
    """Append-only record of ``(time, id, lane, position, speed, accel, kind)``.

    Rows are stored as one chunk of arrays per logged step.
    """

    columns = ("time", "id", "lane", "position", "speed", "accel", "kind")

    def __init__(self):
        self._chunks = []

    def __len__(self):
        return sum(len(c[1]) for c in self._chunks)

    def append(self, time, ids, lane, pos, speed, accel, is_av):
        self._chunks.append((
            np.full(len(ids), time), ids.copy(), lane.copy(), pos.copy(),
            speed.copy(), accel.copy(), is_av.copy()))

    def arrays(self):
        """Return the log as a dict of concatenated column arrays."""
        if not self._chunks:
            empty = np.zeros(0)
            return {"time": empty, "id": empty.astype(np.int64),
                    "lane": empty.astype(np.int64), "position": empty,
                    "speed": empty, "accel": empty,
                    "is_av": empty.astype(bool)}
        cols = [np.concatenate(c) for c in zip(*self._chunks)]
        return dict(zip(("time", "id", "lane", "position", "speed", "accel",
                         "is_av"), cols))

    def write_csv(self, path):
        """Write the log as CSV with 6-decimal fixed-point floats."""
        write_trajectory_csv(path, self.arrays())


def write_trajectory_csv(path, cols):
    """Write trajectory columns (as returned by :meth:`TrajectoryLog.arrays`)."""
    kinds = np.where(cols["is_av"], AV, HUMAN)
    with open(path, "w") as f:
        f.write(",".join(TrajectoryLog.columns) + "\n")
        for row in zip(cols["time"], cols["id"], cols["lane"],
                       cols["position"], cols["speed"], cols["accel"], kinds):
            f.write("%.6f,%d,%d,%.6f,%.6f,%.6f,%s\n" % row)


def read_trajectory_csv(path):
    """Read a trajectory CSV back into column arrays.

    Raises
    ------
    ValueError
        on malformed rows, naming the offending row number
    """
    out = {k: [] for k in ("time", "id", "lane", "position", "speed",
                           "accel", "is_av")}
    with open(path) as f:
        header = f.readline().strip()
        if header != ",".join(TrajectoryLog.columns):
            raise ValueError(f"row 1: unexpected header {header!r}")
        for row_num, line in enumerate(f, start=2):
            parts = line.strip().split(",")
            try:
                if len(parts) != 7 or parts[6] not in (HUMAN, AV):
                    raise ValueError("wrong field count or kind")
                out["time"].append(float(parts[0]))
                out["id"].append(int(parts[1]))
                out["lane"].append(int(parts[2]))
                out["position"].append(float(parts[3]))
                out["speed"].append(float(parts[4]))
                out["accel"].append(float(parts[5]))
                out["is_av"].append(parts[6] == AV)
            except ValueError as exc:
                raise ValueError(f"row {row_num}: malformed ({exc})") from None
    return {
        "time": np.array(out["time"], dtype=float),
        "id": np.array(out["id"], dtype=np.int64),
        "lane": np.array(out["lane"], dtype=np.int64),
        "position": np.array(out["position"], dtype=float),
        "speed": np.array(out["speed"], dtype=float),
        "accel": np.array(out["accel"], dtype=float),
        "is_av": np.array(out["is_av"], dtype=bool),
    }


_ARRAY_FIELDS = ("ids", "lane", "pos", "speed", "accel", "is_av", "length",
                 "lc_cooldown")


@dataclass
class SimState:
    """Complete, self-contained state of one simulation.

    Vehicle attributes are parallel arrays sorted by ``(lane, pos)``.
    """

    time: float
    rng: np.random.Generator
    num_lanes: int
    ring_length: float = None
    ids: np.ndarray = None
    lane: np.ndarray = None
    pos: np.ndarray = None
    speed: np.ndarray = None
    accel: np.ndarray = None
    is_av: np.ndarray = None
    length: np.ndarray = None
    lc_cooldown: np.ndarray = None
    next_id: int = 0
    spawned_count: int = 0
    exited_count: int = 0
    blocked_inflows: int = 0
    safety_events: int = 0
    lane_changes: int = 0
    min_gap: float = np.inf
    next_arrival: np.ndarray = None
    pending: np.ndarray = None
    spawn_penetration: float = 0.0
    logging: bool = False
    trajectory_log: TrajectoryLog = field(default_factory=TrajectoryLog)

    def __post_init__(self):
        if self.ids is None:
            self.ids = np.zeros(0, dtype=np.int64)
            self.lane = np.zeros(0, dtype=np.int64)
            self.pos = np.zeros(0)
            self.speed = np.zeros(0)
            self.accel = np.zeros(0)
            self.is_av = np.zeros(0, dtype=bool)
            self.length = np.zeros(0)
            self.lc_cooldown = np.zeros(0)

    @property
    def num_vehicles(self):
        return len(self.ids)

    @property
    def is_ring(self):
        return self.ring_length is not None

    def index_of(self, vehicle_id):
        """Return the storage index of a vehicle.

        Raises
        ------
        KeyError
            if no such vehicle is present
        """
        hits = np.flatnonzero(self.ids == vehicle_id)
        if len(hits) == 0:
            raise KeyError(f"unknown vehicle id {vehicle_id!r}")
        return int(hits[0])

    def vehicle(self, vehicle_id):
        """Return a :class:`VehicleState` snapshot of one vehicle."""
        i = self.index_of(vehicle_id)
        return VehicleState(
            id=int(self.ids[i]), lane=int(self.lane[i]),
            position=float(self.pos[i]), speed=float(self.speed[i]),
            accel=float(self.accel[i]), kind=AV if self.is_av[i] else HUMAN,
            length=float(self.length[i]),
            lc_cooldown=float(self.lc_cooldown[i]))

    def vehicles(self):
        """Return snapshots of every vehicle in storage order."""
        return [self.vehicle(i) for i in self.ids]

    def add_vehicle(self, lane, pos, speed, kind=HUMAN, length=5.0):
        """Insert a vehicle and return its id. Keeps storage sorted."""
        vid = self.next_id
        self.next_id += 1
        new = dict(ids=vid, lane=lane, pos=pos, speed=speed, accel=0.0,
                   is_av=kind == AV, length=length, lc_cooldown=0.0)
        for name in _ARRAY_FIELDS:
            arr = getattr(self, name)
            setattr(self, name, np.append(arr, np.array(new[name],
                                                        dtype=arr.dtype)))
        self.sort()
        return vid

    def keep(self, mask):
        """Drop every vehicle where ``mask`` is False."""
        for name in _ARRAY_FIELDS:
            setattr(self, name, getattr(self, name)[mask])

    def sort(self):
        order = np.lexsort((self.pos, self.lane))
        if np.any(order != np.arange(len(order))):
            for name in _ARRAY_FIELDS:
                setattr(self, name, getattr(self, name)[order])

    def copy(self):
        """Return an independent deep copy (including the RNG stream)."""
        return copy.deepcopy(self)

    def log_snapshot(self):
        self.trajectory_log.append(self.time, self.ids, self.lane, self.pos,
                                   self.speed, self.accel, self.is_av)


def equilibrium_speed(spacing, p, length=5.0):
    """Return the IDM speed at which a uniform platoon with the given
    front-to-front spacing is stationary."""
    gap = spacing - length
    if gap <= p.s0:
        return 0.0

    def residual(v):
        return float(idm_accel_array(v, gap, v, p))

    return brentq(residual, 0.0, p.v0, xtol=1e-15, rtol=4 * np.finfo(float).eps)


def init_network(spec, cfg, vehicle_length=5.0):
    """Return the initial state of a simulation.

    Open highways start empty. Rings are seeded with ``spec.ring_vehicles``
    equally spaced vehicles in lane 0 driving at the IDM equilibrium speed.

    Raises
    ------
    ConfigurationError
        if ``spec`` or ``cfg`` is invalid
    """
    spec.validate()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    state = SimState(time=0.0, rng=rng, num_lanes=int(spec.num_lanes))
    if spec.topology == "ring":
        state.ring_length = float(spec.length_m)
        n = spec.ring_vehicles
        spacing = spec.length_m / n
        v_eq = equilibrium_speed(spacing, cfg.idm, vehicle_length)
        state.ids = np.arange(n, dtype=np.int64)
        state.lane = np.zeros(n, dtype=np.int64)
        state.pos = np.arange(n) * spacing
        state.speed = np.full(n, v_eq)
        state.accel = np.zeros(n)
        state.is_av = np.zeros(n, dtype=bool)
        state.length = np.full(n, vehicle_length)
        state.lc_cooldown = np.zeros(n)
        state.next_id = n
        state.spawned_count = n
    else:
        headway = 3600.0 / cfg.inflow_rate
        state.next_arrival = headway * rng.uniform(
            1 - ARRIVAL_JITTER, 1 + ARRIVAL_JITTER, spec.num_lanes)
        state.pending = np.zeros(spec.num_lanes, dtype=np.int64)
    return state


def leaders(state):
    """Return leader indices, gaps and leader speeds for every vehicle.

    Returns
    -------
    leader : np.ndarray of int
        storage index of each vehicle's leader, -1 when there is none
    gap : np.ndarray
        bumper-to-bumper gap, ``inf`` when there is no leader
    lead_speed : np.ndarray
        leader speed, equal to the ego speed when there is no leader
    """
    n = state.num_vehicles
    leader = np.arange(1, n + 1)
    same = np.zeros(n, dtype=bool)
    same[:-1] = state.lane[1:] == state.lane[:-1]
    leader = np.where(same, leader, -1)
    gap = np.full(n, np.inf)
    idx = np.flatnonzero(same)
    gap[idx] = state.pos[idx + 1] - state.length[idx + 1] - state.pos[idx]

    if state.is_ring and n:
        # the head of each lane follows the tail of the same lane
        heads = np.flatnonzero(~same)
        first = np.searchsorted(state.lane, state.lane[heads], side="left")
        leader[heads] = first
        gap[heads] = (state.pos[first] + state.ring_length - state.length[first]
                      - state.pos[heads])

    lead_speed = state.speed.copy()
    has = leader >= 0
    lead_speed[has] = state.speed[leader[has]]
    return leader, gap, lead_speed


def leader_of(state, vehicle_id):
    """Return ``(leader_id, gap, leader_speed)`` or None if there is no leader.

    Raises
    ------
    KeyError
        if the vehicle does not exist
    """
    i = state.index_of(vehicle_id)
    leader, gap, lead_speed = leaders(state)
    if leader[i] < 0 or leader[i] == i:
        return None
    return int(state.ids[leader[i]]), float(gap[i]), float(lead_speed[i])


def _draw_av(state, lane, penetration):
    """Tag rule for a vehicle entering behind the upstream-most one."""
    if penetration <= 0:
        return False
    upstream = np.flatnonzero(state.lane == lane)
    if len(upstream) and state.is_av[upstream[0]]:
        return False
    return bool(state.rng.random() < penetration)


def spawn_inflow(state, cfg, spec):
    """Insert new vehicles at the upstream boundary.

    Arrivals follow a deterministic per-lane schedule with a headway of
    ``3600 / inflow_rate`` seconds, jittered by +/-10%. Arrivals that cannot
    be inserted safely queue and are retried every step, one insertion per
    lane per step. An insertion is safe when the gap to the upstream-most
    vehicle covers the IDM desired gap at the entry speed.
    """
    if state.is_ring:
        raise ConfigurationError("topology", "inflows need an open highway")
    headway = 3600.0 / cfg.inflow_rate
    p = cfg.idm
    for lane in range(spec.num_lanes):
        while state.next_arrival[lane] <= state.time + 1e-9:
            state.pending[lane] += 1
            state.next_arrival[lane] += headway * state.rng.uniform(
                1 - ARRIVAL_JITTER, 1 + ARRIVAL_JITTER)
        if state.pending[lane] == 0:
            continue
        in_lane = np.flatnonzero(state.lane == lane)
        if len(in_lane) == 0:
            v_entry = spec.mainline_speed_limit
        else:
            up = in_lane[0]
            v_up = state.speed[up]
            v_entry = min(spec.mainline_speed_limit, v_up + ENTRY_SPEED_MARGIN)
            gap = state.pos[up] - state.length[up]
            if gap < idm_desired_gap(v_entry, v_up, p):
                state.blocked_inflows += 1
                continue
        kind = AV if _draw_av(state, lane, state.spawn_penetration) else HUMAN
        state.add_vehicle(lane, 0.0, v_entry, kind)
        state.pending[lane] -= 1
        state.spawned_count += 1
    return state


def _neighbors_in_lane(state, target_lane, pos):
    """Leader/follower storage indices in ``target_lane`` around ``pos``.

    Returns arrays of indices with -1 where no such vehicle exists. On rings
    the lane wraps around.
    """
    lane_start = np.searchsorted(state.lane, target_lane, side="left")
    lane_end = np.searchsorted(state.lane, target_lane, side="right")
    # storage is sorted by (lane, pos), hence by this composite key
    stride = 4.0 * (np.max(np.abs(state.pos)) + 1.0)
    keys = state.lane * stride + state.pos
    # first vehicle of the target lane strictly ahead of pos
    ahead = np.searchsorted(keys, target_lane * stride + pos, side="right")
    ahead = np.clip(ahead, lane_start, lane_end)
    lead = np.where(ahead < lane_end, ahead, -1)
    foll = np.where(ahead - 1 >= lane_start, ahead - 1, -1)
    if state.is_ring:
        nonempty = lane_end > lane_start
        lead = np.where((lead < 0) & nonempty, lane_start, lead)
        foll = np.where((foll < 0) & nonempty, lane_end - 1, foll)
    return lead, foll


def _wrap(d, state):
    if state.is_ring:
        return np.mod(d, state.ring_length)
    return d


def apply_lane_changes(state, cfg, spec, gaps=None):
    """Move human vehicles to an adjacent lane when it pays off safely.

    A vehicle changes lanes when its anticipated IDM acceleration in the
    target lane beats the current one by ``0.5 / lc_eagerness`` m/s2, and
    neither it nor its new follower would need to brake harder than
    3 m/s2. Changes are followed by a 5 s cooldown. AVs never change lanes.
    When two vehicles target the same slot, the larger incentive wins.
    """
    p = cfg.idm
    state.lc_cooldown = np.maximum(state.lc_cooldown - cfg.dt, 0.0)
    n = state.num_vehicles
    if spec.num_lanes < 2 or cfg.lc_eagerness <= 0 or n == 0:
        return state
    threshold = LC_THRESHOLD / cfg.lc_eagerness

    cand = (~state.is_av) & (state.lc_cooldown <= 0)
    if not np.any(cand):
        return state
    _, gap, lead_speed = leaders(state) if gaps is None else gaps
    a_cur = idm_accel_array(state.speed, gap, lead_speed, p)

    ci = np.flatnonzero(cand)
    best_gain = np.full(len(ci), -np.inf)
    best_lane = np.full(len(ci), -1)
    best_slot = np.full(len(ci), -1)
    v = state.speed[ci]
    x = state.pos[ci]
    ln = state.length[ci]
    for direction in (-1, 1):
        tl = state.lane[ci] + direction
        ok = (tl >= 0) & (tl < spec.num_lanes)
        if not np.any(ok):
            continue
        tl_c = np.clip(tl, 0, spec.num_lanes - 1)
        lead, foll = _neighbors_in_lane(state, tl_c, x)

        has_lead = lead >= 0
        gap_ahead = np.full(len(ci), np.inf)
        gap_ahead[has_lead] = _wrap(
            state.pos[lead[has_lead]] - state.length[lead[has_lead]]
            - x[has_lead], state)
        v_ahead = np.where(has_lead, state.speed[np.maximum(lead, 0)], v)
        a_new = idm_accel_array(v, gap_ahead, v_ahead, p)

        has_foll = foll >= 0
        gap_behind = np.full(len(ci), np.inf)
        gap_behind[has_foll] = _wrap(
            x[has_foll] - ln[has_foll] - state.pos[foll[has_foll]], state)
        fi = np.maximum(foll, 0)
        a_foll = np.where(
            has_foll,
            idm_accel_array(state.speed[fi], gap_behind, v, p),
            0.0)

        safe = ((gap_ahead > 0) & (gap_behind > 0)
                & (a_foll >= -LC_SAFE_DECEL) & (a_new >= -LC_SAFE_DECEL))
        gain = a_new - a_cur[ci]
        better = ok & safe & (gain > threshold) & (gain > best_gain)
        best_gain = np.where(better, gain, best_gain)
        best_lane = np.where(better, tl, best_lane)
        # the slot is identified by the target lane and its follower index
        best_slot = np.where(better, tl * (n + 1) + foll + 1, best_slot)

    movers = np.flatnonzero(best_lane >= 0)
    if len(movers) == 0:
        return state
    order = movers[np.argsort(-best_gain[movers], kind="stable")]
    _, first = np.unique(best_slot[order], return_index=True)
    accepted = ci[order[first]]
    state.lane[accepted] = best_lane[order[first]]
    state.lc_cooldown[accepted] = LC_COOLDOWN
    state.lane_changes += len(accepted)
    state.sort()
    return state


def tag_avs(state, penetration, rng=None):
    """Convert vehicles to AVs at the end of the warm-up.

    Per lane, from upstream to downstream, each vehicle becomes an AV with
    probability ``penetration`` unless the vehicle just upstream of it was
    made an AV. Vehicles inserted afterwards follow the same rule.
    """
    rng = state.rng if rng is None else rng
    draws = rng.random(state.num_vehicles)
    prev_lane, prev_av = -1, False
    for i in range(state.num_vehicles):
        if state.lane[i] != prev_lane:
            prev_lane, prev_av = state.lane[i], False
        make_av = (not prev_av) and draws[i] < penetration
        state.is_av[i] = make_av
        prev_av = make_av
    state.spawn_penetration = penetration
    return state


class AVView:
    """Local and privileged information handed to an AV controller.

    Attributes
    ----------
    state, spec, cfg
        the full simulation context (privileged)
    idx : np.ndarray
        storage indices of the AVs
    ids, speed, gap, lead_speed, pos, lane : np.ndarray
        per-AV quantities. ``gap`` is ``inf`` without a leader, in which
        case ``lead_speed`` equals ``speed``.
    in_zone : np.ndarray of bool
        whether each AV is inside the reduced speed-limit zone
    """

    def __init__(self, state, spec, cfg, idx, gap, lead_speed):
        self.state = state
        self.spec = spec
        self.cfg = cfg
        self.idx = idx
        self.ids = state.ids[idx]
        self.speed = state.speed[idx]
        self.pos = state.pos[idx]
        self.lane = state.lane[idx]
        self.gap = gap[idx]
        self.lead_speed = lead_speed[idx]
        if state.is_ring:
            self.in_zone = np.zeros(len(idx), dtype=bool)
        else:
            self.in_zone = self.pos >= spec.zone_start

    def __len__(self):
        return len(self.idx)


def step(state, spec, cfg, av_controller=None):
    """Advance the simulation by one step of ``cfg.dt`` seconds.

    Order of operations: inflow insertion, lane changes, acceleration queries
    against the resulting state, synchronous Euler update, removal of
    vehicles past the downstream boundary (or wrap-around on rings) and
    trajectory logging. The logged acceleration is the one actually realized
    after flooring speeds at zero.

    Parameters
    ----------
    av_controller : callable, optional
        maps an :class:`AVView` to one acceleration per AV. Required as soon
        as AVs are present.

    Raises
    ------
    SimulationFault
        if a controller returns a non-finite acceleration
    """
    dt = cfg.dt
    p = cfg.idm
    if not state.is_ring:
        spawn_inflow(state, cfg, spec)
    gaps = leaders(state)
    if spec.num_lanes > 1:
        apply_lane_changes(state, cfg, spec, gaps=gaps)
        gaps = leaders(state)
    _, gap, lead_speed = gaps
    n = state.num_vehicles
    if n == 0:
        state.time = round(state.time + dt, 9)
        if state.logging:
            state.log_snapshot()
        return state

    if np.any(gap <= 0):
        state.safety_events += int(np.sum(gap <= 0))
    state.min_gap = min(state.min_gap, float(np.min(gap)))

    noise = (state.rng.normal(0.0, p.noise_std, n) if p.noise_std > 0
             else np.zeros(n))
    accel = idm_accel_array(state.speed, gap, lead_speed, p, noise)

    av_idx = np.flatnonzero(state.is_av)
    if len(av_idx):
        if av_controller is None:
            raise SimulationFault(int(state.ids[av_idx[0]]), state.time,
                                  "AVs present but no AV controller given")
        view = AVView(state, spec, cfg, av_idx, gap, lead_speed)
        av_accel = np.asarray(av_controller(view), dtype=float)
        if av_accel.shape != (len(av_idx),):
            raise SimulationFault(int(state.ids[av_idx[0]]), state.time,
                                  "controller returned wrong shape")
        bad = ~np.isfinite(av_accel)
        if np.any(bad):
            raise SimulationFault(int(view.ids[bad][0]), state.time,
                                  "non-finite acceleration")
        accel[av_idx] = av_accel

    if not state.is_ring:
        # nobody is commanded above the limit inside the zone
        zone = state.pos >= spec.zone_start
        cap = (spec.downstream_speed_limit - state.speed[zone]) / dt
        accel[zone] = np.maximum(np.minimum(accel[zone], cap),
                                 -EMERGENCY_DECEL)

    new_speed = np.maximum(state.speed + accel * dt, 0.0)
    state.accel = (new_speed - state.speed) / dt
    state.speed = new_speed
    state.pos = state.pos + new_speed * dt
    state.time = round(state.time + dt, 9)

    if state.is_ring:
        if np.any(state.pos >= state.ring_length):
            state.pos = np.mod(state.pos, state.ring_length)
            state.sort()
    else:
        exiting = state.pos > spec.length_m
        if np.any(exiting):
            state.exited_count += int(np.sum(exiting))
            state.keep(~exiting)

    if state.logging:
        state.log_snapshot()
    return state


def warm_up(spec, cfg, state=None):
    """Run the all-human warm-up and return the resulting state."""
    state = init_network(spec, cfg) if state is None else state
    n_steps = int(round(cfg.warmup_s / cfg.dt))
    for _ in range(n_steps):
        step(state, spec, cfg)
    return state


def run_horizon(state, spec, cfg, av_controller=None, callback=None):
    """Tag AVs on a warmed-up state and run the controlled horizon.

    The state is modified in place. Logging starts with a snapshot of the
    warm-up's final state.
    """
    tag_avs(state, cfg.penetration)
    state.logging = True
    state.log_snapshot()
    n_steps = int(round(cfg.horizon_s / cfg.dt))
    for _ in range(n_steps):
        step(state, spec, cfg, av_controller)
        if callback is not None:
            callback(state)
    return state


def run_scenario(spec, cfg, av_controller=None, warm_state=None):
    """Run a complete scenario: warm-up, AV tagging, controlled horizon.

    Parameters
    ----------
    av_controller : callable, optional
        AV acceleration provider; see :func:`step`
    warm_state : SimState, optional
        previously computed warm-up state to start from. It is copied, not
        modified.

    Returns
    -------
    SimState, TrajectoryLog
        final state and the post-warm-up trajectory log
    """
    if warm_state is None:
        state = warm_up(spec, cfg)
    else:
        state = warm_state.copy()
    if hasattr(av_controller, "reset"):
        av_controller.reset()
    run_horizon(state, spec, cfg, av_controller)
    return state, state.trajectory_log
