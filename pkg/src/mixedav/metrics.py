"""Run-level metrics, space-time binning and scenario sweeps.

Energy is estimated with a power-based polynomial surrogate: an idle floor,
rolling, drivetrain and aerodynamic terms in speed, and a positive inertial
power term. The default coefficients describe a mid-size crossover
(1600 kg, CdA = 0.8 m2, 25% tank-to-wheel efficiency) and only support
relative comparisons between controllers.
"""
from dataclasses import dataclass, asdict, fields
import csv
import itertools
import logging
import os

import numpy as np

from mixedav.network import read_trajectory_csv

logger = logging.getLogger(__name__)

METERS_PER_MILE = 1609.344


@dataclass(frozen=True)
class EnergyModelParams:
    """Coefficients of the fuel-rate surrogate, in gal/hr.

    ``rate = max(idle_rate, c0 + c1 v + c2 v^2 + c3 v^3 + c4 max(a, 0) v)``
    with ``v`` in m/s and ``a`` in m/s2.
    """

    idle_rate: float = 0.18
    c0: float = 0.18
    c1: float = 0.0186
    c2: float = 0.0005
    c3: float = 5.7e-5
    c4: float = 0.19


def fuel_rate(v, a, p=None):
    """Return the fuel consumption rate, in gal/hr (scalar or array)."""
    p = EnergyModelParams() if p is None else p
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    rate = (p.c0 + p.c1 * v + p.c2 * v ** 2 + p.c3 * v ** 3
            + p.c4 * np.maximum(a, 0.0) * v)
    rate = np.maximum(rate, p.idle_rate)
    return float(rate) if rate.ndim == 0 else rate


@dataclass
class MetricsRecord:
    """Aggregate metrics of one run.

    Attributes
    ----------
    mpg : float
        fleet miles per gallon, total vehicle-miles over total gallons
    mean_abs_accel : float
        mean absolute acceleration over all vehicles and steps, in m/s2
    throughput : float
        vehicles leaving the network, in veh/hr/lane
    intervention_count : int
        safety-supervisor overrides during the run
    min_gap : float
        smallest bumper-to-bumper gap in the log, in m
    """

    mpg: float
    mean_abs_accel: float
    throughput: float
    intervention_count: int = 0
    min_gap: float = float("inf")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def _log_columns(log):
    if isinstance(log, (str, os.PathLike)):
        return read_trajectory_csv(log)
    if isinstance(log, dict):
        return log
    return log.arrays()


def compute_metrics(log, spec, cfg, p=None, interventions=0,
                    vehicle_length=5.0):
    """Compute a :class:`MetricsRecord` from a trajectory log.

    Only rows at or after the end of the warm-up are used. Fuel is the
    trapezoidal integral of :func:`fuel_rate` between consecutive rows of
    each vehicle. A vehicle counts as having exited when it disappears before
    the last logged time. Results do not depend on the row order.

    Parameters
    ----------
    log : TrajectoryLog, dict of arrays or path to a trajectory CSV
        the rows to evaluate
    spec : NetworkSpec
    cfg : SimConfig

    Raises
    ------
    ValueError
        if no post-warm-up rows exist (or, for CSV input, on malformed rows)
    """
    p = EnergyModelParams() if p is None else p
    cols = _log_columns(log)
    keep = cols["time"] >= cfg.warmup_s - 1e-6
    if not np.any(keep):
        raise ValueError("no post-warm-up rows in trajectory log")
    t = cols["time"][keep]
    vid = cols["id"][keep]
    lane = cols["lane"][keep]
    x = cols["position"][keep]
    v = cols["speed"][keep]
    a = cols["accel"][keep]

    order = np.lexsort((t, vid))
    t, vid, lane, x, v, a = (c[order] for c in (t, vid, lane, x, v, a))
    rate = fuel_rate(v, a, p)
    same = vid[1:] == vid[:-1]
    dt_rows = np.where(same, t[1:] - t[:-1], 0.0)
    gallons = float(np.sum(0.5 * (rate[1:] + rate[:-1]) * dt_rows) / 3600.0)
    meters = float(np.sum(np.where(same, np.maximum(x[1:] - x[:-1], 0.0),
                                   0.0)))
    mpg = (meters / METERS_PER_MILE) / gallons if gallons > 0 else 0.0

    t_start, t_end = float(t.min()), float(t.max())
    last_seen = t[np.r_[~same, True]]
    exits = int(np.sum(last_seen < t_end - 1e-6))
    span = t_end - t_start
    throughput = exits / (span / 3600.0) / spec.num_lanes if span > 0 else 0.0

    order = np.lexsort((x, lane, t))
    ts, ls, xs = t[order], lane[order], x[order]
    adjacent = (ts[1:] == ts[:-1]) & (ls[1:] == ls[:-1])
    gaps = (xs[1:] - vehicle_length - xs[:-1])[adjacent]
    min_gap = float(gaps.min()) if len(gaps) else float("inf")

    return MetricsRecord(mpg=mpg, mean_abs_accel=float(np.mean(np.abs(a))),
                         throughput=throughput,
                         intervention_count=int(interventions),
                         min_gap=min_gap)


@dataclass
class SpaceTimeGrid:
    """Binned speed field of a run.

    Attributes
    ----------
    dx, dt : float
        bin sizes in space (m) and time (s)
    x_edges, t_edges : np.ndarray
        lower bin edges
    mean_speed : np.ndarray
        array of shape ``(num_lanes, len(x_edges), len(t_edges))``; NaN where
        a bin holds no observation
    counts : np.ndarray
        number of observations per bin
    length_m : float
        network length the grid covers
    """

    dx: float
    dt: float
    x_edges: np.ndarray
    t_edges: np.ndarray
    mean_speed: np.ndarray
    counts: np.ndarray
    length_m: float

    def to_csv(self, path, lane):
        """Write the occupied bins of one lane in long format."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["x_start", "t_start", "mean_speed", "count"])
            for i, j in zip(*np.nonzero(self.counts[lane])):
                w.writerow(["%.3f" % self.x_edges[i], "%.3f" % self.t_edges[j],
                            "%.6f" % self.mean_speed[lane, i, j],
                            int(self.counts[lane, i, j])])


def bin_space_time(log, length_m, num_lanes, dx=50.0, dt=10.0, t0=None):
    """Average speeds into ``dx`` by ``dt`` bins, separately per lane."""
    cols = _log_columns(log)
    t = cols["time"]
    t0 = float(t.min()) if t0 is None else t0
    n_x = int(np.ceil(length_m / dx))
    n_t = max(int(np.floor((t.max() - t0) / dt)) + 1, 1) if len(t) else 1
    ix = np.clip((cols["position"] // dx).astype(int), 0, n_x - 1)
    it = np.clip(((t - t0) // dt).astype(int), 0, n_t - 1)
    lane = cols["lane"].astype(int)
    flat = (lane * n_x + ix) * n_t + it
    size = num_lanes * n_x * n_t
    counts = np.bincount(flat, minlength=size).reshape(num_lanes, n_x, n_t)
    sums = np.bincount(flat, weights=cols["speed"], minlength=size) \
        .reshape(num_lanes, n_x, n_t)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return SpaceTimeGrid(dx, dt, np.arange(n_x) * dx, t0 + np.arange(n_t) * dt,
                         mean, counts, float(length_m))


def wave_index(grid, upstream_fraction=0.8):
    """Return a scalar measure of stop-and-go intensity.

    For every lane and every position bin lying in the upstream
    ``upstream_fraction`` of the network, take the standard deviation over
    time of the occupied bin speeds; average over position bins, then over
    lanes. Uniform traffic scores zero.

    Raises
    ------
    ValueError
        if the grid spans fewer than 10 time bins
    """
    if grid.mean_speed.shape[2] < 10:
        raise ValueError("wave_index needs at least 10 time bins")
    upstream = grid.x_edges + grid.dx <= upstream_fraction * grid.length_m + 1e-9
    per_lane = []
    for lane in range(grid.mean_speed.shape[0]):
        stds = []
        for i in np.flatnonzero(upstream):
            row = grid.mean_speed[lane, i]
            row = row[~np.isnan(row)]
            if len(row) >= 2:
                stds.append(np.std(row))
        if stds:
            per_lane.append(np.mean(stds))
    return float(np.mean(per_lane)) if per_lane else 0.0


def wave_speed(grid, lane=0, threshold=None):
    """Least-squares propagation speed (m/s) of the slowest bins.

    For every time column the position of the minimum-speed bin is located;
    a line fitted through ``(time, position)`` gives the wave speed.
    Backward-moving waves yield negative values. Columns whose minimum speed
    exceeds ``threshold`` are ignored.
    """
    speeds = grid.mean_speed[lane]
    ts, xs = [], []
    for j in range(speeds.shape[1]):
        col = speeds[:, j]
        if np.all(np.isnan(col)):
            continue
        i = int(np.nanargmin(col))
        if threshold is not None and col[i] > threshold:
            continue
        ts.append(grid.t_edges[j] + grid.dt / 2)
        xs.append(grid.x_edges[i] + grid.dx / 2)
    if len(ts) < 2:
        return float("nan")
    slope, _ = np.polyfit(ts, xs, 1)
    return float(slope)


CONTROLLERS = ("baseline", "expert", "imitated_current", "imitated_history")


@dataclass
class SweepSpec:
    """Grid of scenario variations to evaluate.

    Every combination of the grids, seeds and controllers is one cell.
    Imitated controllers need a checkpoint path each.
    """

    inflows: tuple = (2100.0,)
    limits: tuple = (5.0,)
    penetrations: tuple = (0.05,)
    idm_a: tuple = (1.3,)
    lc_eagerness: tuple = (1.0,)
    seeds: tuple = (0,)
    controllers: tuple = ("baseline", "expert")
    checkpoint_current: str = None
    checkpoint_history: str = None
    workers: int = 1

    def validate(self):
        from mixedav.network import ConfigurationError
        for name in ("inflows", "limits", "penetrations", "idm_a",
                     "lc_eagerness", "seeds", "controllers"):
            if len(getattr(self, name)) == 0:
                raise ConfigurationError(name, "grid must be non-empty")
        for c in self.controllers:
            if c not in CONTROLLERS:
                raise ConfigurationError("controllers", f"unknown {c!r}")
        for c, path in (("imitated_current", self.checkpoint_current),
                        ("imitated_history", self.checkpoint_history)):
            if c in self.controllers and (path is None
                                          or not os.path.exists(path)):
                raise ConfigurationError(
                    f"checkpoint_{c.split('_')[1]}",
                    f"missing checkpoint for {c}: {path!r}")

    def cells(self):
        return list(itertools.product(
            self.inflows, self.limits, self.idm_a, self.lc_eagerness,
            self.seeds, self.penetrations, self.controllers))


#: factor on the inflow above which a cell's throughput is reported
THROUGHPUT_TOLERANCE = 1.1

SWEEP_COLUMNS = ["inflow", "limit", "idm_a", "lc_eagerness", "seed",
                 "penetration", "controller"] + MetricsRecord.field_names()


def _cell_name(cell):
    inflow, limit, a, lc, seed, pen, ctl = cell
    return (f"in{inflow:g}_lim{limit:g}_a{a:g}_lc{lc:g}_s{seed}_p{pen:g}_"
            f"{ctl}.csv")


def _fmt(x):
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.6f" % x


def _run_cell_group(args):
    """Evaluate every cell sharing one warm-up. Module level for pickling."""
    from mixedav.imitation import make_controller
    from mixedav.network import run_horizon, warm_up
    spec, cfg, cells, sweep, out_dir, energy, fs_params = args
    warm = warm_up(spec, cfg)
    for cell in cells:
        pen, ctl = cell[5], cell[6]
        controller = make_controller(ctl, sweep, fs_params)
        if hasattr(controller, "reset"):
            controller.reset()
        state = warm.copy()
        run_cfg = cfg.with_(penetration=0.0 if ctl == "baseline" else pen)
        run_horizon(state, spec, run_cfg, controller)
        rec = compute_metrics(
            state.trajectory_log, spec, run_cfg, energy,
            interventions=getattr(controller, "interventions", 0))
        if rec.throughput > THROUGHPUT_TOLERANCE * cfg.inflow_rate:
            logger.warning("cell %s: throughput %.1f exceeds inflow %.1f",
                           _cell_name(cell), rec.throughput, cfg.inflow_rate)
        _write_cell(os.path.join(out_dir, "cells", _cell_name(cell)), cell,
                    rec)
    return len(cells)


def _write_cell(path, cell, rec):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_COLUMNS)
        w.writerow([_fmt(x) for x in cell] +
                   [_fmt(x) for x in asdict(rec).values()])
    os.replace(tmp, path)


def run_sweep(sweep, out_dir, base_spec=None, base_cfg=None, energy=None,
              fs_params=None):
    """Evaluate every cell of a sweep and write result tables.

    Each cell's metrics land in ``out_dir/cells/<cell>.csv``; cells whose
    file already exists are skipped, so interrupted sweeps resume. Once all
    cells are done, ``sweep.csv`` (one row per run) and ``sweep_mean.csv``
    (averaged over seeds) are written.

    Returns
    -------
    list of dict
        the rows of ``sweep.csv``

    Raises
    ------
    ConfigurationError
        before any simulation if the sweep is invalid or a checkpoint is
        missing
    """
    from mixedav.controllers import IdmParams
    from mixedav.network import NetworkSpec, SimConfig
    sweep.validate()
    base_spec = NetworkSpec() if base_spec is None else base_spec
    base_cfg = SimConfig() if base_cfg is None else base_cfg
    os.makedirs(os.path.join(out_dir, "cells"), exist_ok=True)

    groups = {}
    for cell in sweep.cells():
        if os.path.exists(os.path.join(out_dir, "cells", _cell_name(cell))):
            continue
        groups.setdefault(cell[:5], []).append(cell)
    jobs = []
    for (inflow, limit, a, lc, seed), cells in groups.items():
        spec = NetworkSpec(**{**asdict(base_spec),
                              "downstream_speed_limit": float(limit)})
        idm = IdmParams(**{**asdict(base_cfg.idm), "a": float(a)})
        cfg = base_cfg.with_(inflow_rate=float(inflow), lc_eagerness=float(lc),
                             seed=int(seed), idm=idm)
        jobs.append((spec, cfg, cells, sweep, out_dir, energy, fs_params))
    logger.info("sweep: %d groups to run", len(jobs))

    if sweep.workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(sweep.workers) as pool:
            list(pool.map(_run_cell_group, jobs))
    else:
        for job in jobs:
            _run_cell_group(job)

    rows = []
    for cell in sweep.cells():
        with open(os.path.join(out_dir, "cells", _cell_name(cell))) as f:
            rows.append(next(iter(csv.DictReader(f))))
    _write_table(os.path.join(out_dir, "sweep.csv"), SWEEP_COLUMNS, rows)

    mean_rows = {}
    for row in rows:
        key = tuple(row[k] for k in SWEEP_COLUMNS[:7] if k != "seed")
        mean_rows.setdefault(key, []).append(row)
    metric_names = MetricsRecord.field_names()
    mean_cols = [k for k in SWEEP_COLUMNS[:7] if k != "seed"] + \
        ["num_seeds"] + metric_names
    table = []
    for key, group in mean_rows.items():
        out = dict(zip(mean_cols, key))
        out["num_seeds"] = str(len(group))
        for m in metric_names:
            out[m] = _fmt(float(np.mean([float(r[m]) for r in group])))
        table.append(out)
    _write_table(os.path.join(out_dir, "sweep_mean.csv"), mean_cols, table)
    return rows


def _write_table(path, columns, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})


def write_metrics_csv(path, rec):
    """Write one :class:`MetricsRecord` as a two-line CSV."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MetricsRecord.field_names())
        w.writerow([_fmt(x) for x in asdict(rec).values()])
