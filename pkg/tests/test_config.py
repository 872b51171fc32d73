"""Configuration file parsing."""
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mixedav.config import Config, dump_config, load_config, parse_config
from mixedav.network import ConfigurationError


class TestParse:
    def test_empty_is_defaults(self):
        assert parse_config("") == Config()

    def test_sections(self):
        cfg = parse_config("""
            # comment line
            network.downstream_speed_limit = 6   # trailing comment
            sim.seed = 4
            idm.a = 1.0
            fs.c = 0
            obs.history_N = 0
            dagger.epochs = 2
            dagger.total_samples_target = 45000
            energy.c4 = 0.1
            sweep.inflows = 1900, 2000
            sweep.controllers = baseline
            run.controller = expert
        """)
        assert cfg.network.downstream_speed_limit == 6.0
        assert cfg.sim.seed == 4 and isinstance(cfg.sim.seed, int)
        assert cfg.sim_config().idm.a == 1.0
        assert cfg.fs.c == 0.0
        assert cfg.obs.input_dim == 3
        assert cfg.energy.c4 == 0.1
        assert cfg.sweep.inflows == (1900.0, 2000.0)
        assert cfg.sweep.controllers == ("baseline",)
        assert cfg.run.controller == "expert"

    def test_optional_fields(self):
        cfg = parse_config("fs.k_p = 2.5\nsweep.checkpoint_history = a.ckpt")
        assert cfg.fs.k_p == 2.5
        assert cfg.sweep.checkpoint_history == "a.ckpt"
        assert parse_config("fs.k_p = none").fs.k_p is None

    def test_seed_override(self):
        assert Config().sim_config(9).seed == 9

    @pytest.mark.parametrize("text, key", [
        ("bogus.x = 1", "bogus.x"),
        ("sim.unknown = 1", "sim.unknown"),
        ("sim.idm = 1", "sim.idm"),
        ("sim.dt = fast", "sim.dt"),
        ("idm.v0 = none", "idm.v0"),
        ("run.controller = oracle", "run.controller"),
        ("dagger.epochs = 3", "total_samples_target"),
        ("sweep.seeds = ", "sweep.seeds"),
    ])
    def test_errors(self, text, key):
        with pytest.raises(ConfigurationError) as info:
            parse_config(text)
        assert key in str(info.value)

    def test_line_number(self):
        with pytest.raises(ConfigurationError, match="cfg:3"):
            parse_config("sim.seed = 1\n\nnot a pair\n", source="cfg")

    def test_missing_file(self, tmp_path):
        missing = tmp_path / "nope.cfg"
        with pytest.raises(ConfigurationError, match="nope.cfg"):
            load_config(missing)

    def test_round_trip(self):
        cfg = Config()
        assert parse_config(dump_config(cfg)) == cfg

    @given(st.integers(0, 2 ** 31), st.floats(0.0, 1.0),
           st.lists(st.floats(100, 5000), min_size=1, max_size=4))
    def test_round_trip_values(self, seed, pen, inflows):
        text = (f"sim.seed = {seed}\nsim.penetration = {pen!r}\n"
                f"sweep.inflows = {', '.join(map(repr, inflows))}\n")
        cfg = parse_config(text)
        assert parse_config(dump_config(cfg)) == cfg
        assert cfg.sweep.inflows == tuple(inflows)
