"""Scenario files: room, access point, reflector mounts, limits and episode settings.

Scenarios are TOML documents. Every table is optional except that at least
one ``[[reflector]]`` must be present; unknown keys are rejected so typos
never silently fall back to defaults. The ``schema`` key must equal
:data:`SCHEMA_VERSION`.

Example::

    schema = 1
    [room]
    lo = [-5.0, -5.0, 0.0]
    hi = [5.0, 5.0, 3.0]
    [ap]
    position = [0.0, 7.0, 2.5]
    [[reflector]]
    mount_center = [-4.8, 4.0, 2.2]
    mount_normal = [1.0, 0.0, 0.0]
    rows = 7
    cols = 9
    segments = 2
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from .channel import ChannelParams
from .environment import EnvConfig, Scene
from .errors import InvalidInput
from .geometry import FeasibleBox, angle_limits_about, build_grid, feasible_box

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ReflectorSpec:
    mount_center: tuple[float, float, float]
    mount_normal: tuple[float, float, float]
    rows: int = 7
    cols: int = 9
    segments: int = 2
    pitch: float = 0.05


DEFAULT_REFLECTORS = (
    ReflectorSpec((-4.8, 4.0, 2.2), (1.0, 0.0, 0.0)),
    ReflectorSpec((4.8, 4.0, 2.2), (-1.0, 0.0, 0.0)),
)


@dataclass(frozen=True)
class Scenario:
    """Everything needed to build a :class:`Scene` and an :class:`EnvConfig`."""

    room_lo: tuple[float, float, float] = (-5.0, -5.0, 0.0)
    room_hi: tuple[float, float, float] = (5.0, 5.0, 3.0)
    ap: tuple[float, float, float] = (0.0, 7.0, 2.5)
    reflectors: tuple[ReflectorSpec, ...] = DEFAULT_REFLECTORS
    theta_half_deg: float = 45.0
    phi_half_deg: float = 45.0
    grid_step: float = 0.25
    channel: ChannelParams = field(default_factory=ChannelParams)
    env: EnvConfig = field(default_factory=EnvConfig)
    training: dict = field(default_factory=dict)

    @property
    def num_segments(self) -> int:
        return sum(r.segments for r in self.reflectors)

    def with_rows(self, rows: int) -> "Scenario":
        return replace(self, reflectors=tuple(replace(r, rows=rows) for r in self.reflectors))

    def with_env(self, **changes) -> "Scenario":
        return replace(self, env=replace(self.env, **changes))

    def to_dict(self) -> dict:
        env = {}
        for f in fields(EnvConfig):
            v = getattr(self.env, f.name)
            env[f.name] = list(v) if isinstance(v, tuple) else v
        out = {
            "schema": SCHEMA_VERSION,
            "room": {"lo": list(self.room_lo), "hi": list(self.room_hi)},
            "ap": {"position": list(self.ap)},
            "limits": {
                "theta_half_deg": self.theta_half_deg,
                "phi_half_deg": self.phi_half_deg,
                "grid_step": self.grid_step,
            },
            "channel": _channel_to_toml(self.channel),
            "env": env,
            "reflector": [
                {
                    "mount_center": list(r.mount_center),
                    "mount_normal": list(r.mount_normal),
                    "rows": r.rows,
                    "cols": r.cols,
                    "segments": r.segments,
                    "pitch": r.pitch,
                }
                for r in self.reflectors
            ],
        }
        if self.training:
            out["training"] = copy.deepcopy(self.training)
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def content_hash(self) -> str:
        """Short stable digest of the scenario contents."""
        blob = json.dumps(self.to_dict(), sort_keys=True, default=float)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def build(self) -> Scene:
        return build_scene(self)


def _channel_to_toml(p: ChannelParams) -> dict:
    d = p.to_dict()
    if np.isinf(d["wall_loss"]):
        d["wall_loss"] = "inf"
    return d


_TOP_KEYS = {"schema", "room", "ap", "limits", "channel", "env", "reflector", "training"}
_ROOM_KEYS = {"lo", "hi"}
_AP_KEYS = {"position"}
_LIMIT_KEYS = {"theta_half_deg", "phi_half_deg", "grid_step"}
_CHANNEL_KEYS = {"carrier_freq", "tx_power", "wall_loss", "tile_gain_beamwidth_deg", "aperture"}
_REFLECTOR_KEYS = {"mount_center", "mount_normal", "rows", "cols", "segments", "pitch"}


def _check_keys(table: dict, allowed: set, where: str):
    if not isinstance(table, dict):
        raise InvalidInput(f"{where}: expected a table, got {type(table).__name__}")
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise InvalidInput(f"{where}: unknown key(s) {unknown}; allowed {sorted(allowed)}")


def _vec(value, n: int, where: str) -> tuple:
    try:
        arr = [float(x) for x in value]
    except (TypeError, ValueError):
        raise InvalidInput(f"{where}: expected a list of {n} numbers, got {value!r}") from None
    if len(arr) != n or not all(np.isfinite(arr)):
        raise InvalidInput(f"{where}: expected {n} finite numbers, got {value!r}")
    return tuple(arr)


def _num(value, where: str, integer: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        if not (isinstance(value, str) and value == "inf" and not integer):
            raise InvalidInput(f"{where}: expected a number, got {value!r}")
        return float("inf")
    if integer:
        if int(value) != value:
            raise InvalidInput(f"{where}: expected an integer, got {value!r}")
        return int(value)
    return float(value)


def scenario_from_dict(doc: dict) -> Scenario:
    """Validate a parsed document and build a :class:`Scenario`.

    Raises:
        InvalidInput: on a missing or wrong schema, unknown keys, or bad values.
    """
    _check_keys(doc, _TOP_KEYS, "scenario")
    if doc.get("schema") != SCHEMA_VERSION:
        raise InvalidInput(f"scenario: schema must be {SCHEMA_VERSION}, got {doc.get('schema')!r}")
    base = Scenario()
    kw: dict = {}

    room = doc.get("room", {})
    _check_keys(room, _ROOM_KEYS, "room")
    if "lo" in room:
        kw["room_lo"] = _vec(room["lo"], 3, "room.lo")
    if "hi" in room:
        kw["room_hi"] = _vec(room["hi"], 3, "room.hi")

    ap = doc.get("ap", {})
    _check_keys(ap, _AP_KEYS, "ap")
    if "position" in ap:
        kw["ap"] = _vec(ap["position"], 3, "ap.position")

    limits = doc.get("limits", {})
    _check_keys(limits, _LIMIT_KEYS, "limits")
    for key in _LIMIT_KEYS:
        if key in limits:
            kw[key] = _num(limits[key], f"limits.{key}")

    ch = doc.get("channel", {})
    _check_keys(ch, _CHANNEL_KEYS, "channel")
    ch_kw = {}
    for key in ("carrier_freq", "tx_power", "wall_loss", "aperture"):
        if key in ch:
            ch_kw[key] = _num(ch[key], f"channel.{key}")
    if "tile_gain_beamwidth_deg" in ch:
        ch_kw["tile_gain_beamwidth"] = float(np.deg2rad(_num(ch["tile_gain_beamwidth_deg"], "channel.tile_gain_beamwidth_deg")))
    try:
        kw["channel"] = ChannelParams(**ch_kw)
    except ValueError as exc:
        raise InvalidInput(f"channel: {exc}") from None

    env = doc.get("env", {})
    env_fields = {f.name: f for f in fields(EnvConfig)}
    _check_keys(env, set(env_fields), "env")
    env_kw = {}
    defaults = EnvConfig()
    for key, value in env.items():
        current = getattr(defaults, key)
        if isinstance(current, bool):
            if not isinstance(value, bool):
                raise InvalidInput(f"env.{key}: expected true/false, got {value!r}")
            env_kw[key] = value
        elif isinstance(current, tuple):
            env_kw[key] = _vec(value, len(current), f"env.{key}")
        else:
            env_kw[key] = _num(value, f"env.{key}", integer=isinstance(current, int))
    try:
        kw["env"] = EnvConfig(**env_kw)
    except ValueError as exc:
        raise InvalidInput(f"env: {exc}") from None

    if "reflector" in doc:
        refl = doc["reflector"]
        if not isinstance(refl, list) or not refl:
            raise InvalidInput("reflector: expected at least one [[reflector]] table")
        specs = []
        for i, r in enumerate(refl):
            where = f"reflector[{i}]"
            _check_keys(r, _REFLECTOR_KEYS, where)
            for req in ("mount_center", "mount_normal"):
                if req not in r:
                    raise InvalidInput(f"{where}: missing required key '{req}'")
            rkw = {
                "mount_center": _vec(r["mount_center"], 3, f"{where}.mount_center"),
                "mount_normal": _vec(r["mount_normal"], 3, f"{where}.mount_normal"),
            }
            for key in ("rows", "cols", "segments"):
                if key in r:
                    rkw[key] = _num(r[key], f"{where}.{key}", integer=True)
            if "pitch" in r:
                rkw["pitch"] = _num(r["pitch"], f"{where}.pitch")
            specs.append(ReflectorSpec(**rkw))
        kw["reflectors"] = tuple(specs)

    if "training" in doc:
        if not isinstance(doc["training"], dict):
            raise InvalidInput("training: expected a table")
        kw["training"] = copy.deepcopy(doc["training"])
    return replace(base, **kw)


def parse_scenario(text: str, source: str = "<string>") -> Scenario:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise InvalidInput(f"{source}: {exc}") from None
    try:
        return scenario_from_dict(doc)
    except InvalidInput as exc:
        raise InvalidInput(f"{source}: {exc}") from None


def load_scenario(path) -> Scenario:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"scenario file not found: {path}")
    return parse_scenario(path.read_text(), str(path))


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(scenario.to_toml())


def build_scene(s: Scenario) -> Scene:
    """Lay out the reflectors and compute every segment's feasible box."""
    try:
        room = FeasibleBox(np.array(s.room_lo), np.array(s.room_hi))
    except ValueError as exc:
        raise InvalidInput(f"room: {exc}") from None
    ap = np.array(s.ap, dtype=np.float64)
    theta_half = np.deg2rad(s.theta_half_deg)
    phi_half = np.deg2rad(s.phi_half_deg)
    grids, refs, boxes = [], [], []
    for spec in s.reflectors:
        grid = build_grid(spec.rows, spec.cols, spec.pitch, spec.mount_center, spec.mount_normal, spec.segments)
        theta_lim, phi_lim = angle_limits_about(grid.mount_normal, theta_half, phi_half)
        for seg in range(grid.num_segments):
            refs.append((grid, seg))
            boxes.append(feasible_box(grid, seg, ap, theta_lim, phi_lim, room, s.grid_step))
        grids.append(grid)
    return Scene(ap=ap, segments=tuple(refs), boxes=tuple(boxes), params=s.channel, room=room)
