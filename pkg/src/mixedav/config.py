"""Flat ``key = value`` configuration files.

Every key is ``<section>.<field>`` where the section selects one parameter
object::

    network.  NetworkSpec          sim.     SimConfig
    idm.      IdmParams            fs.      FollowerStopperParams
    obs.      ObservationSpec      dagger.  DaggerConfig
    energy.   EnergyModelParams    sweep.   SweepSpec
    run.      controller selection for ``simulate`` and ``evaluate``

Lists are comma-separated, ``none`` clears an optional field, ``#`` starts
a comment. Unknown keys and unparsable values raise
:class:`~mixedav.network.ConfigurationError`.
"""
from dataclasses import dataclass, field, fields, replace

from mixedav.controllers import FollowerStopperParams, IdmParams
from mixedav.imitation import DaggerConfig, ObservationSpec
from mixedav.metrics import CONTROLLERS, EnergyModelParams, SweepSpec
from mixedav.network import ConfigurationError, NetworkSpec, SimConfig


@dataclass(frozen=True)
class RunOptions:
    """Which controller ``simulate`` and ``evaluate`` drive the AVs with.

    ``checkpoint`` overrides the sweep checkpoint of the chosen imitated
    controller.
    """

    controller: str = "baseline"
    checkpoint: str = None


@dataclass(frozen=True)
class Config:
    """Every parameter object the command-line tools need."""

    network: NetworkSpec = field(default_factory=NetworkSpec)
    sim: SimConfig = field(default_factory=SimConfig)
    idm: IdmParams = field(default_factory=IdmParams)
    fs: FollowerStopperParams = field(default_factory=FollowerStopperParams)
    obs: ObservationSpec = field(default_factory=ObservationSpec)
    dagger: DaggerConfig = field(default_factory=DaggerConfig)
    energy: EnergyModelParams = field(default_factory=EnergyModelParams)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    run: RunOptions = field(default_factory=RunOptions)

    def sim_config(self, seed=None):
        """SimConfig with the ``idm.`` section and an optional seed applied."""
        cfg = self.sim.with_(idm=self.idm)
        return cfg if seed is None else cfg.with_(seed=int(seed))


SECTIONS = tuple(f.name for f in fields(Config))
_SKIP = {("sim", "idm")}


def _scalar(text, kind):
    if kind is bool:
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def _parse_value(text, f, default):
    text = text.strip()
    if text.lower() == "none":
        if default is not None and f.type is not str:
            raise ValueError("field is not optional")
        return None
    if f.type is tuple:
        elem = type(default[0]) if default else str
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(_scalar(t, elem) for t in items)
    kind = f.type if isinstance(f.type, type) else str
    if kind is float and isinstance(default, int) and \
            not isinstance(default, bool):
        kind = int
    return _scalar(text, kind)


def parse_config(text, source="<string>"):
    """Parse configuration text into a :class:`Config`.

    Raises
    ------
    ConfigurationError
        on malformed lines, unknown keys, bad values, or invalid
        parameter combinations
    """
    updates = {s: {} for s in SECTIONS}
    defaults = Config()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigurationError(where, f"expected 'key = value': {raw!r}")
        key, value = (t.strip() for t in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigurationError(key, f"{where}: unknown key")
        obj = getattr(defaults, section)
        known = {f.name: f for f in fields(obj)}
        if name not in known or (section, name) in _SKIP:
            raise ConfigurationError(key, f"{where}: unknown key")
        try:
            updates[section][name] = _parse_value(value, known[name],
                                                  getattr(obj, name))
        except ValueError as exc:
            raise ConfigurationError(key, f"{where}: {exc}") from None
    try:
        parts = {s: replace(getattr(defaults, s), **updates[s])
                 for s in SECTIONS}
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(source, str(exc)) from None
    cfg = Config(**parts)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    """Check cross-field constraints that the parts don't check themselves."""
    cfg.network.validate()
    cfg.sim_config().validate()
    cfg.dagger.validate()
    if cfg.run.controller not in CONTROLLERS:
        raise ConfigurationError("run.controller",
                                 f"unknown controller {cfg.run.controller!r}")
    for name in ("inflows", "limits", "penetrations", "idm_a",
                 "lc_eagerness", "seeds", "controllers"):
        if len(getattr(cfg.sweep, name)) == 0:
            raise ConfigurationError(f"sweep.{name}", "grid must be non-empty")


def load_config(path):
    """Read and parse a configuration file.

    A missing or unreadable file raises ConfigurationError naming the path.
    """
    if path is None:
        return Config()
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigurationError("--config",
                                 f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, source=str(path))


def dump_config(cfg):
    """Serialize ``cfg`` so that ``parse_config(dump_config(cfg)) == cfg``."""
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            if (section, f.name) in _SKIP:
                continue
            v = getattr(obj, f.name)
            if v is None:
                text = "none"
            elif isinstance(v, tuple):
                text = ", ".join(repr(x) if isinstance(x, float) else str(x)
                                 for x in v)
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{section}.{f.name} = {text}")
    return "\n".join(lines) + "\n"
