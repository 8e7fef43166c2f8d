"""Run configuration and its key-value file format.

A config file holds one ``section.key = value`` assignment per line; blank
lines and ``#`` comments are ignored. Values are parsed as JSON when
possible (numbers, ``true``/``false``, lists, quoted strings) and taken as
bare strings otherwise::

    # desk-scale run
    synth.width = 512
    synth.bands = ["R", "B"]
    tiling.grid_rows = 4
    trigger1.n_sigma = 3.0
    net.heartbeat_interval = 2.0
    sinks = ["stdout", "file:alerts.jsonl"]
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace

from .imagery import TilingConfig
from .synthgen import SynthConfig
from .trigger1 import Trigger1Config
from .trigger2 import Trigger2Config


@dataclass(frozen=True)
class CalibConfig:
    reference_epoch: int = 0
    max_shift: int = 3


@dataclass(frozen=True)
class NetConfig:
    heartbeat_interval: float = 2.0
    heartbeat_timeout: float = 5.0
    retry_budget: int = 3
    worker_deadline: float = 30.0
    payload_mode: str = "inline"

    def __post_init__(self):
        if self.payload_mode not in ("inline", "path"):
            raise ValueError("payload_mode must be 'inline' or 'path'")
        if self.heartbeat_interval <= 0 or self.heartbeat_timeout <= 0:
            raise ValueError("heartbeat settings must be positive")
        if self.retry_budget < 1:
            raise ValueError("retry_budget must be >= 1")


@dataclass(frozen=True)
class DispatchConfig:
    near_threshold_band: float = 0.2
    alert_min_significance: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    calib: CalibConfig = field(default_factory=CalibConfig)
    tiling: TilingConfig = field(default_factory=lambda: TilingConfig(4, 4, 8))
    trigger1: Trigger1Config = field(default_factory=Trigger1Config)
    trigger2: Trigger2Config = field(default_factory=Trigger2Config)
    net: NetConfig = field(default_factory=NetConfig)
    dispatch: DispatchConfig = field(default_factory=DispatchConfig)
    sinks: tuple = ()
    seed: int = 0
    run_id: str = "run"

    def __post_init__(self):
        self.tiling.core_shape(self.synth.width, self.synth.height)
        if self.trigger1.saturation_level <= self.synth.sky_background:
            raise ValueError("saturation level must exceed the sky background")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def digest(self) -> str:
        """Hash of every setting that changes tile-processing output."""
        science = {
            "synth": {"width": self.synth.width, "height": self.synth.height, "bands": list(self.synth.bands)},
            "tiling": dataclasses.asdict(self.tiling),
            "trigger1": dataclasses.asdict(self.trigger1),
            "trigger2": dataclasses.asdict(self.trigger2),
            "near_threshold_band": self.dispatch.near_threshold_band,
        }
        canon = json.dumps(science, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


_SECTIONS = {
    "synth": SynthConfig,
    "calib": CalibConfig,
    "tiling": TilingConfig,
    "trigger1": Trigger1Config,
    "trigger2": Trigger2Config,
    "net": NetConfig,
    "dispatch": DispatchConfig,
}
_TOP = {"sinks", "seed", "run_id"}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _coerce(cls, key, value):
    types = {f.name: f.type for f in fields(cls)}
    if key not in types:
        raise ValueError(f"unknown key {cls.__name__}.{key}")
    t = str(types[key])
    if t == "int":
        if isinstance(value, bool) or float(value) != int(value):
            raise ValueError(f"{key} must be an integer")
        return int(value)
    if t == "float":
        return float(value)
    if t == "bool":
        if not isinstance(value, bool):
            raise ValueError(f"{key} must be true or false")
        return value
    if t == "tuple":
        return tuple(value) if isinstance(value, list) else tuple(str(value).split(","))
    return value


def apply_overrides(cfg: RunConfig, pairs: dict) -> RunConfig:
    """Return ``cfg`` with dotted ``section.key`` overrides applied."""
    sections = {name: {} for name in _SECTIONS}
    top = {}
    for key, value in pairs.items():
        if key in _TOP:
            top[key] = value
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ValueError(f"unknown config key {key!r}")
        sections[section][name] = _coerce(_SECTIONS[section], name, value)
    updates = {}
    for section, vals in sections.items():
        if vals:
            updates[section] = replace(getattr(cfg, section), **vals)
    if "sinks" in top:
        sinks = top["sinks"]
        updates["sinks"] = tuple(sinks) if isinstance(sinks, list) else tuple(str(sinks).split(","))
    if "seed" in top:
        updates["seed"] = int(top["seed"])
    if "run_id" in top:
        updates["run_id"] = str(top["run_id"])
    return replace(cfg, **updates)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        pairs[key.strip()] = _parse_value(value.strip())
    return apply_overrides(base or RunConfig(), pairs)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in _SECTIONS:
        for key, value in dataclasses.asdict(getattr(cfg, section)).items():
            if isinstance(value, tuple):
                value = list(value)
            lines.append(f"{section}.{key} = {json.dumps(value)}")
    lines.append(f"sinks = {json.dumps(list(cfg.sinks))}")
    lines.append(f"seed = {cfg.seed}")
    lines.append(f"run_id = {json.dumps(cfg.run_id)}")
    return "\n".join(lines) + "\n"
