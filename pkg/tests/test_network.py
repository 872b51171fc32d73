"""Network simulation tests: geometry, inflow, lane changes, stepping."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mixedav.controllers import FollowerStopperExpert, IdmParams
from mixedav.network import (
    AV,
    ConfigurationError,
    NetworkSpec,
    SimConfig,
    SimState,
    SimulationFault,
    apply_lane_changes,
    equilibrium_speed,
    init_network,
    leader_of,
    leaders,
    read_trajectory_csv,
    run_scenario,
    step,
    tag_avs,
    warm_up,
)

QUIET = IdmParams(noise_std=0.0)


def ring(n=22, length=260.0, idm=QUIET, seed=0):
    spec = NetworkSpec(topology="ring", length_m=length, num_lanes=1,
                       ring_vehicles=n)
    cfg = SimConfig(idm=idm, seed=seed, warmup_s=0.0, penetration=0.0)
    return spec, cfg, init_network(spec, cfg)


def manual_state(rows, num_lanes=2, seed=0):
    """Open-highway state from (lane, pos, speed, kind) tuples."""
    state = SimState(time=0.0, rng=np.random.default_rng(seed),
                     num_lanes=num_lanes)
    state.next_arrival = np.full(num_lanes, np.inf)
    state.pending = np.zeros(num_lanes, dtype=np.int64)
    for lane, pos, speed, kind in rows:
        state.add_vehicle(lane, pos, speed, kind)
    return state


class TestSpecValidation:
    @pytest.mark.parametrize("field, value", [
        ("length_m", -1.0), ("num_lanes", 0), ("downstream_speed_limit", 0.0),
        ("topology", "mobius"),
    ])
    def test_network_errors_name_the_field(self, field, value):
        with pytest.raises(ConfigurationError) as info:
            NetworkSpec(**{field: value}).validate()
        assert info.value.field == field

    @pytest.mark.parametrize("field, value", [
        ("dt", 0.0), ("penetration", 1.5), ("inflow_rate", -5.0),
    ])
    def test_sim_config_errors(self, field, value):
        with pytest.raises(ConfigurationError) as info:
            SimConfig(**{field: value}).validate()
        assert info.value.field == field

    def test_defaults(self):
        spec, cfg = NetworkSpec(), SimConfig()
        assert (spec.length_m, spec.num_lanes) == (1609.0, 5)
        assert spec.zone_start == pytest.approx(1509.0)
        assert (cfg.dt, cfg.warmup_s, cfg.horizon_s) == (0.4, 3600.0, 600.0)


class TestLeaders:
    def test_open_highway(self):
        s = manual_state([(0, 10.0, 5.0, "human"), (0, 30.0, 6.0, "human"),
                          (1, 20.0, 7.0, "human")])
        lead, gap, vl = leaders(s)
        # storage sorted by (lane, pos): ids 0, 1 in lane 0 then id 2
        assert list(lead) == [1, -1, -1]
        assert gap[0] == pytest.approx(15.0)
        assert np.isinf(gap[1]) and np.isinf(gap[2])
        assert vl[0] == 6.0 and vl[1] == 6.0
        assert leader_of(s, 0) == (1, pytest.approx(15.0), 6.0)
        assert leader_of(s, 1) is None

    def test_ring_wrap(self):
        spec, cfg, s = ring(n=4, length=100.0)
        _, gap, _ = leaders(s)
        np.testing.assert_allclose(gap, 20.0)

    def test_unknown_vehicle(self):
        with pytest.raises(KeyError):
            manual_state([]).vehicle(42)


class TestRing:
    def test_equilibrium_is_stationary(self):
        spec, cfg, s = ring()
        v_eq = equilibrium_speed(260.0 / 22, QUIET)
        for _ in range(int(300 / cfg.dt)):
            step(s, spec, cfg)
        assert np.max(np.abs(s.speed - v_eq)) <= 1e-6

    def test_equilibrium_speed_root(self):
        v = equilibrium_speed(20.0, QUIET)
        from mixedav.controllers import idm_accel
        assert abs(idm_accel(v, 15.0, v, QUIET)) < 1e-9

    def test_jammed(self):
        assert equilibrium_speed(6.0, QUIET) == 0.0

    def test_vehicle_count_conserved(self):
        spec, cfg, s = ring(idm=IdmParams())
        for _ in range(500):
            step(s, spec, cfg)
        assert s.num_vehicles == 22 and s.exited_count == 0


class TestInflow:
    def test_rate(self):
        spec = NetworkSpec(num_lanes=2, length_m=800.0)
        cfg = SimConfig(inflow_rate=900.0, warmup_s=400.0, seed=3)
        s = warm_up(spec, cfg)
        want = 900.0 * 2 * 400.0 / 3600.0
        assert abs(s.spawned_count - want) <= 0.05 * want + 2
        assert np.all(s.speed >= 0)

    def test_ring_rejects_inflow(self):
        from mixedav.network import spawn_inflow
        spec, cfg, s = ring()
        with pytest.raises(ConfigurationError):
            spawn_inflow(s, cfg, spec)

    def test_blocked_entry_waits(self):
        s = manual_state([(0, 3.0, 0.0, "human")], num_lanes=1)
        s.next_arrival = np.array([0.0])
        spec = NetworkSpec(num_lanes=1)
        cfg = SimConfig()
        from mixedav.network import spawn_inflow
        spawn_inflow(s, cfg, spec)
        assert s.num_vehicles == 1 and s.pending[0] == 1
        assert s.blocked_inflows == 1


@pytest.fixture(scope="module")
def short_run():
    spec = NetworkSpec(num_lanes=3, length_m=1000.0)
    cfg = SimConfig(inflow_rate=1800.0, warmup_s=300.0, horizon_s=60.0,
                    seed=11)
    state, log = run_scenario(spec, cfg, FollowerStopperExpert())
    return spec, cfg, state, log.arrays()


class TestStep:
    def test_no_reversing(self, short_run):
        *_, cols = short_run
        order = np.lexsort((cols["time"], cols["id"]))
        ids, pos = cols["id"][order], cols["position"][order]
        same = ids[1:] == ids[:-1]
        assert np.all(np.diff(pos)[same] >= -1e-9)
        assert np.all(cols["speed"] >= 0)

    def test_ids_unique_per_step(self, short_run):
        *_, cols = short_run
        for t in np.unique(cols["time"])[::20]:
            ids = cols["id"][cols["time"] == t]
            assert len(ids) == len(np.unique(ids))

    def test_avs_stay_in_lane(self, short_run):
        *_, cols = short_run
        av = cols["is_av"]
        for vid in np.unique(cols["id"][av]):
            assert len(np.unique(cols["lane"][cols["id"] == vid])) == 1

    def test_storage_sorted(self, short_run):
        _, _, state, _ = short_run
        key = np.lexsort((state.pos, state.lane))
        assert np.array_equal(key, np.arange(state.num_vehicles))

    def test_zone_cap(self):
        s = manual_state([(0, 1550.0, 10.0, "human")], num_lanes=1)
        spec, cfg = NetworkSpec(num_lanes=1), SimConfig()
        step(s, spec, cfg)
        assert s.speed[0] == pytest.approx(10.0 - 9.0 * 0.4)
        step(s, spec, cfg)
        assert s.speed[0] == pytest.approx(5.0)

    def test_exit_counted(self):
        s = manual_state([(0, 1608.0, 5.0, "human")], num_lanes=1)
        step(s, NetworkSpec(num_lanes=1), SimConfig())
        assert s.num_vehicles == 0 and s.exited_count == 1

    def test_bad_controller_faults(self):
        s = manual_state([(0, 100.0, 5.0, AV)], num_lanes=1)
        spec, cfg = NetworkSpec(num_lanes=1), SimConfig()
        with pytest.raises(SimulationFault):
            step(s, spec, cfg, lambda view: np.full(len(view), np.nan))
        with pytest.raises(SimulationFault):
            step(s, spec, cfg, lambda view: np.zeros(len(view) + 1))
        with pytest.raises(SimulationFault):
            step(s, spec, cfg, None)

    def test_deterministic(self):
        spec = NetworkSpec(num_lanes=2, length_m=600.0)
        cfg = SimConfig(inflow_rate=2000.0, warmup_s=120.0, horizon_s=40.0,
                        seed=5)
        a = run_scenario(spec, cfg, FollowerStopperExpert())[1].arrays()
        b = run_scenario(spec, cfg, FollowerStopperExpert())[1].arrays()
        for k in a:
            assert np.array_equal(a[k], b[k])

    def test_warm_state_not_modified(self):
        spec = NetworkSpec(num_lanes=2, length_m=600.0)
        cfg = SimConfig(inflow_rate=2000.0, warmup_s=60.0, horizon_s=20.0)
        warm = warm_up(spec, cfg)
        before = warm.pos.copy()
        run_scenario(spec, cfg, FollowerStopperExpert(), warm_state=warm)
        assert np.array_equal(warm.pos, before)


class TestLaneChanges:
    def test_overtakes_slow_leader(self):
        s = manual_state([(0, 100.0, 20.0, "human"), (0, 120.0, 2.0, "human")])
        spec, cfg = NetworkSpec(num_lanes=2), SimConfig()
        apply_lane_changes(s, cfg, spec)
        assert s.vehicle(0).lane == 1
        assert s.vehicle(0).lc_cooldown == 5.0
        assert s.lane_changes == 1

    def test_cooldown_blocks(self):
        s = manual_state([(0, 100.0, 20.0, "human"), (0, 120.0, 2.0, "human")])
        s.lc_cooldown[:] = 3.0
        apply_lane_changes(s, SimConfig(), NetworkSpec(num_lanes=2))
        assert s.vehicle(0).lane == 0

    def test_av_never_changes(self):
        s = manual_state([(0, 100.0, 20.0, AV), (0, 120.0, 2.0, "human")])
        apply_lane_changes(s, SimConfig(), NetworkSpec(num_lanes=2))
        assert s.vehicle(0).lane == 0

    def test_unsafe_gap_rejected(self):
        # fast follower right behind the target slot would brake too hard
        s = manual_state([(0, 100.0, 10.0, "human"), (0, 115.0, 2.0, "human"),
                          (1, 96.0, 25.0, "human")])
        apply_lane_changes(s, SimConfig(), NetworkSpec(num_lanes=2))
        assert s.vehicle(0).lane == 0

    def test_zero_eagerness_disables(self):
        s = manual_state([(0, 100.0, 20.0, "human"), (0, 120.0, 2.0, "human")])
        apply_lane_changes(s, SimConfig(lc_eagerness=0.0),
                           NetworkSpec(num_lanes=2))
        assert s.vehicle(0).lane == 0


class TestTagging:
    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.0, 1.0), st.integers(0, 10_000))
    def test_no_adjacent_avs(self, pen, seed):
        rng = np.random.default_rng(seed)
        rows = [(int(l), float(x), 5.0, "human")
                for l, x in zip(rng.integers(0, 3, 60),
                                rng.uniform(0, 1000, 60))]
        s = manual_state(rows, num_lanes=3)
        tag_avs(s, pen, np.random.default_rng(seed))
        same_lane = s.lane[1:] == s.lane[:-1]
        assert not np.any(s.is_av[1:] & s.is_av[:-1] & same_lane)

    def test_fraction(self):
        rows = [(0, float(x), 5.0, "human") for x in range(0, 40000, 10)]
        s = manual_state(rows, num_lanes=1)
        tag_avs(s, 0.05, np.random.default_rng(0))
        # adjacency exclusion lowers the rate to p / (1 + p)
        assert s.is_av.mean() == pytest.approx(0.05 / 1.05, abs=0.01)

    def test_zero(self):
        s = manual_state([(0, 1.0, 1.0, "human")], num_lanes=1)
        tag_avs(s, 0.0)
        assert not s.is_av.any()


class TestTrajectoryCsv:
    def test_round_trip(self, tmp_path):
        spec = NetworkSpec(num_lanes=2, length_m=500.0)
        cfg = SimConfig(inflow_rate=1500.0, warmup_s=60.0, horizon_s=10.0)
        _, log = run_scenario(spec, cfg, FollowerStopperExpert())
        path = tmp_path / "t.csv"
        log.write_csv(path)
        back = read_trajectory_csv(path)
        cols = log.arrays()
        assert np.array_equal(back["id"], cols["id"])
        assert np.array_equal(back["is_av"], cols["is_av"])
        np.testing.assert_allclose(back["position"], cols["position"],
                                   atol=1e-6)

    def test_malformed_row_number(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("time,id,lane,position,speed,accel,kind\n"
                        "0.0,1,0,1.0,2.0,0.0,human\n"
                        "0.4,1,0,oops,2.0,0.0,human\n")
        with pytest.raises(ValueError, match="row 3"):
            read_trajectory_csv(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n")
        with pytest.raises(ValueError, match="row 1"):
            read_trajectory_csv(path)
