"""Deterministic lock-step simulation of an irrigation fleet.

Each tick: scripted timeline events fire, soil moisture evolves, sensors
publish on the bus, the knowledge base ingests, the adaptation loop runs on
period boundaries, and actuator commands take effect for the next tick.
"""

from __future__ import annotations

import json
import os
import random
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import IO, Any

from fleetdspl.adaptation import AdaptationEngine, Goal, LoopSettings, Projection
from fleetdspl.bus import Bus, BusMessage
from fleetdspl.knowledge import (
    Dimension,
    DeviceDescriptor,
    DimensionMap,
    Fact,
    InvalidFact,
    KnowledgeBase,
    KnowledgeError,
    Reading,
    StaleOutOfOrder,
    BASE_MODE,
)
from fleetdspl.trace import Trace, TraceEvent
from fleetdspl.variability import (
    DConfig,
    FConfig,
    FeatureModel,
    ModelError,
    check_selection,
    derive_fconfig,
    model_from_dict,
    parse_model,
)

MOISTURE = "soil_moisture"
WATER_TAG_PREFIX = "water."

SCENARIO_KEYS = {
    "name",
    "model",
    "devices",
    "dimension_map",
    "modes",
    "active_mode",
    "initial_selection",
    "goals",
    "loop",
    "dynamics",
    "timeline",
    "effects",
    "forecast_gains",
    "defaults",
}
_REQUIRED = ("model", "devices", "dimension_map", "initial_selection")
_EVENT_FIELDS = {
    "fact": ("variable", "value", "valid_at"),
    "mode": ("mode",),
    "rain": ("amount",),
    "device_fail": ("device",),
    "reading_override": ("variable", "value"),
}


class ScenarioError(ValueError):
    def __init__(self, key: str, message: str = "invalid"):
        super().__init__(f"{key}: {message}")
        self.key = key


class InitialSelectionInvalid(ScenarioError):
    def __init__(self, message: str):
        super().__init__("initial_selection", message)


@dataclass(frozen=True)
class Dynamics:
    dry_rate: float = 0.5
    irrigation_gain: float = 1.0
    rain_gain: float = 1.0
    initial: Mapping[str, float] = field(default_factory=dict)
    noise: float = 0.0

    def next_moisture(self, moisture: float, active_rate: float, rain_now: float) -> float:
        value = moisture - self.dry_rate + self.irrigation_gain * active_rate + self.rain_gain * rain_now
        return min(100.0, max(0.0, value))


class SimDevice:
    """A virtual device: senses one variable and/or actuates bound features."""

    def __init__(self, descriptor: DeviceDescriptor, bus: Bus):
        self.id = descriptor.id
        self.params = dict(descriptor.params.params)
        self.alive = descriptor.reachable
        self.active: set[str] = set()
        self.pending: list[tuple[str, str | None, dict]] = []
        self.bus = bus
        bus.subscribe(f"cmd/{self.id}", self.on_command)

    @property
    def measures(self) -> str | None:
        return self.params.get("measures")

    def on_command(self, msg: BusMessage) -> None:
        if not self.alive:
            return
        self.pending.append((msg.payload["op"], msg.payload.get("feature"), msg.payload.get("params", {})))
        latency = int(self.params.get("ack_latency", 0))
        self.bus.publish(f"ack/{self.id}", {"id": msg.payload["id"]}, msg.tick + latency)

    def apply_pending(self) -> None:
        for op, feature, params in self.pending:
            if op == "activate":
                self.active.add(feature)
            elif op == "deactivate":
                self.active.discard(feature)
            self.params.update(params)
        self.pending.clear()

    def fail(self) -> None:
        self.alive = False
        self.active.clear()
        self.pending.clear()


class World:
    def __init__(
        self,
        model: FeatureModel,
        kb: KnowledgeBase,
        engine: AdaptationEngine,
        bus: Bus,
        devices: dict[str, SimDevice],
        dynamics: Dynamics,
        timeline: list[dict],
        seed: int = 0,
        name: str = "scenario",
    ):
        self.name = name
        self.clock = 0
        self.model = model
        self.kb = kb
        self.engine = engine
        self.bus = bus
        self.devices = devices
        self.dynamics = dynamics
        self.values: dict[str, float] = dict(dynamics.initial)
        self.timeline = sorted(timeline, key=lambda e: e["t"])  # stable: file order within a tick
        self.rng = random.Random(seed)
        self.watering_features = frozenset(
            f for f, tags in model.capabilities.items() if any(t.startswith(WATER_TAG_PREFIX) for t in tags)
        )
        self._next_event = 0
        self._rain_now = 0.0

    @property
    def trace(self) -> Trace:
        return self.kb.trace

    @property
    def settings(self) -> LoopSettings:
        return self.engine.settings

    def active_rate(self) -> float:
        rate = 0.0
        for dev in self.devices.values():
            if dev.alive and dev.active & self.watering_features:
                rate += float(dev.params.get("flow_rate", 1.0))
        return rate

    def _apply_timeline(self, t: int) -> None:
        while self._next_event < len(self.timeline) and self.timeline[self._next_event]["t"] <= t:
            ev = self.timeline[self._next_event]
            self._next_event += 1
            kind = ev["event"]
            if kind == "fact":
                try:
                    self.kb.ingest_fact(Fact(ev["variable"], float(ev["value"]), int(ev["valid_at"]), t))
                except InvalidFact as exc:
                    self.trace.emit(t, "Warning", {"warning": "InvalidFact", "detail": str(exc)})
            elif kind == "mode":
                self.kb.set_mode(ev["mode"], t)
            elif kind == "rain":
                self._rain_now += float(ev["amount"])
            elif kind == "device_fail":
                dev = self.devices[ev["device"]]
                dev.fail()
                self.kb.mark_unreachable(dev.id)
                self.trace.emit(t, "Warning", {"warning": "DeviceFailure", "device": dev.id})
            elif kind == "reading_override":
                self.values[ev["variable"]] = float(ev["value"])

    def step(self) -> list[TraceEvent]:
        t = self.clock
        start = len(self.trace)
        self._rain_now = 0.0
        self._apply_timeline(t)

        if MOISTURE in self.values:
            self.values[MOISTURE] = self.dynamics.next_moisture(
                self.values[MOISTURE], self.active_rate(), self._rain_now
            )

        for dev_id in sorted(self.devices):
            dev = self.devices[dev_id]
            var = dev.measures
            if not dev.alive or var is None or var not in self.values:
                continue
            value = self.values[var]
            if self.dynamics.noise:
                value += self.rng.gauss(0.0, self.dynamics.noise)
            self.bus.publish(f"sensor/{dev_id}", {"variable": var, "value": value}, t)

        for topic in self.bus.pending_topics("sensor/"):
            source = topic.split("/", 1)[1]
            for msg in self.bus.drain(topic):
                try:
                    self.kb.ingest_reading(Reading(msg.payload["variable"], msg.payload["value"], msg.tick, source))
                except StaleOutOfOrder:
                    pass
        self.kb.prune(t, self.settings.horizon)

        if t % self.settings.period == 0:
            self.engine.run_loop_step(t)

        for dev_id in sorted(self.devices):
            self.devices[dev_id].apply_pending()
        self.clock += 1
        return self.trace.events[start:]

    def summary(self) -> dict[str, Any]:
        report = self.engine.last_report
        return {
            "ticks": self.clock,
            "adaptations": self.engine.adaptations,
            "final_effective": None if report is None else report.effective,
            "fconfig": self.engine.current.to_dict(),
        }


def run(world: World, until: int, sink: IO[str] | None = None) -> Trace:
    """Step until the clock reaches ``until``; stream every event line to ``sink``."""
    if until <= 0:
        raise ValueError("until must be positive")
    written = 0
    while world.clock < until:
        world.step()
        if sink is not None:
            events = world.trace.events
            sink.write("".join(e.to_line() + "\n" for e in events[written:]))
            written = len(events)
    return world.trace


# -- scenario loading -------------------------------------------------------


def _require(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ScenarioError(key, message)


def _load_model(source: Any, base_dir: str | None) -> FeatureModel:
    try:
        if isinstance(source, str):
            path = source if os.path.isabs(source) or base_dir is None else os.path.join(base_dir, source)
            with open(path, encoding="utf-8") as fh:
                return parse_model(fh.read())
        if isinstance(source, dict):
            return model_from_dict(source)
    except ModelError as exc:
        raise ScenarioError("model", str(exc)) from None
    raise ScenarioError("model", "must be a path or an inline model object")


def _devices(raw: Any) -> list[DeviceDescriptor]:
    _require(isinstance(raw, list), "devices", "must be a list")
    out, seen = [], set()
    for i, d in enumerate(raw):
        where = f"devices[{i}]"
        _require(isinstance(d, dict) and isinstance(d.get("id"), str), where, "needs a string id")
        extra = sorted(set(d) - {"id", "capabilities", "battery", "params", "reachable"})
        _require(not extra, f"{where}.{extra[0] if extra else ''}", "unknown key")
        _require(d["id"] not in seen, where, f"duplicate device id {d['id']!r}")
        seen.add(d["id"])
        try:
            out.append(
                DeviceDescriptor(
                    d["id"],
                    tuple(d.get("capabilities", ())),
                    float(d.get("battery", 100.0)),
                    bool(d.get("reachable", True)),
                    DConfig(d.get("params", {})),
                )
            )
        except (TypeError, ValueError) as exc:
            raise ScenarioError(where, str(exc)) from None
    return out


def _dimension_map(data: dict) -> DimensionMap:
    raw = data["dimension_map"]
    _require(isinstance(raw, dict), "dimension_map", "must be an object")
    try:
        base = {v: Dimension(d) for v, d in raw.items()}
    except ValueError as exc:
        raise ScenarioError("dimension_map", str(exc)) from None
    modes_raw = data.get("modes", {})
    _require(isinstance(modes_raw, dict), "modes", "must be an object")
    try:
        modes = {m: {v: Dimension(d) for v, d in o.items()} for m, o in modes_raw.items()}
        return DimensionMap(base, modes, data.get("active_mode", BASE_MODE))
    except (KnowledgeError, ValueError, AttributeError) as exc:
        key = "active_mode" if "mode" in type(exc).__name__.lower() else "modes"
        raise ScenarioError(key, str(exc)) from None


def _timeline(raw: Any, modes: Mapping, devices: set[str]) -> list[dict]:
    _require(isinstance(raw, list), "timeline", "must be a list")
    out = []
    for i, ev in enumerate(raw):
        where = f"timeline[{i}]"
        _require(isinstance(ev, dict), where, "must be an object")
        _require(isinstance(ev.get("t"), int) and ev["t"] >= 0, f"{where}.t", "must be a tick >= 0")
        kind = ev.get("event")
        _require(kind in _EVENT_FIELDS, f"{where}.event", f"unknown event {kind!r}")
        for key in _EVENT_FIELDS[kind]:
            _require(key in ev, f"{where}.{key}", "missing")
        extra = sorted(set(ev) - {"t", "event", *_EVENT_FIELDS[kind]})
        _require(not extra, f"{where}.{extra[0] if extra else ''}", "unknown key")
        if kind == "mode":
            _require(ev["mode"] == BASE_MODE or ev["mode"] in modes, f"{where}.mode", f"unknown mode {ev['mode']!r}")
        if kind == "device_fail":
            _require(ev["device"] in devices, f"{where}.device", f"unknown device {ev['device']!r}")
        out.append(dict(ev))
    return out


def load_scenario(text: str, base_dir: str | None = None, seed: int = 0) -> World:
    """Build a ready-to-run :class:`World` from a scenario document."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError("document", f"invalid JSON ({exc.msg} at line {exc.lineno})") from None
    _require(isinstance(data, dict), "document", "top level must be an object")
    for key in _REQUIRED:
        _require(key in data, key, "missing required key")
    unknown = sorted(set(data) - SCENARIO_KEYS)
    _require(not unknown, unknown[0] if unknown else "", "unknown key")

    model = _load_model(data["model"], base_dir)
    descriptors = _devices(data["devices"])
    dim_map = _dimension_map(data)

    try:
        settings = LoopSettings.from_dict(data.get("loop", {}))
    except (TypeError, ValueError) as exc:
        raise ScenarioError("loop", str(exc)) from None
    try:
        goals = [Goal.from_dict(g) for g in data.get("goals", [])]
    except (TypeError, ValueError) as exc:
        raise ScenarioError("goals", str(exc)) from None
    features = set(model.features)
    for g in goals:
        _require(g.feature is None or g.feature in features, "goals", f"unknown feature {g.feature!r}")

    effects = data.get("effects", {})
    _require(isinstance(effects, dict) and set(effects) <= features, "effects", "keys must be model features")
    gains = data.get("forecast_gains", {})
    _require(isinstance(gains, dict) and set(gains) <= set(dim_map.base), "forecast_gains", "keys must be mapped variables")
    projection = Projection(
        {f: {v: float(x) for v, x in m.items()} for f, m in effects.items()},
        {s: {v: float(x) for v, x in m.items()} for s, m in gains.items()},
    )
    defaults = data.get("defaults", {})
    _require(isinstance(defaults, dict) and set(defaults) <= features, "defaults", "keys must be model features")

    dyn_raw = data.get("dynamics", {})
    _require(isinstance(dyn_raw, dict), "dynamics", "must be an object")
    extra = sorted(set(dyn_raw) - {"dry_rate", "irrigation_gain", "rain_gain", "initial", "noise"})
    _require(not extra, f"dynamics.{extra[0] if extra else ''}", "unknown key")
    dynamics = Dynamics(
        **{k: float(v) for k, v in dyn_raw.items() if k != "initial"},
        initial={k: float(v) for k, v in dyn_raw.get("initial", {}).items()},
    )
    timeline = _timeline(data.get("timeline", []), dim_map.modes, {d.id for d in descriptors})

    trace = Trace()
    kb = KnowledgeBase(dim_map, trace, battery_floor=settings.battery_floor)
    for d in descriptors:
        try:
            kb.register_device(d)
        except KnowledgeError as exc:
            raise ScenarioError("devices", str(exc)) from None

    initial = data["initial_selection"]
    _require(isinstance(initial, list), "initial_selection", "must be a list of features")
    try:
        verdict = check_selection(model, initial)
    except ModelError as exc:
        raise InitialSelectionInvalid(str(exc)) from None
    if not verdict.valid:
        raise InitialSelectionInvalid("; ".join(str(v) for v in verdict.violations))
    feasible = [d for d in descriptors if d.id in kb.feasible_devices()]
    try:
        current = derive_fconfig(model, initial, feasible, defaults)
    except ModelError as exc:
        raise InitialSelectionInvalid(str(exc)) from None

    bus = Bus()
    devices = {d.id: SimDevice(d, bus) for d in descriptors}
    for feature, dev in current.bindings.items():
        devices[dev].active.add(feature)
    for dev, cfg in current.dconfigs.items():
        devices[dev].params.update(cfg.params)

    engine = AdaptationEngine(model, goals, settings, kb, bus, current, projection, defaults)
    return World(model, kb, engine, bus, devices, dynamics, timeline, seed, data.get("name", "scenario"))


def load_scenario_file(path: str, seed: int = 0) -> World:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return load_scenario(text, os.path.dirname(os.path.abspath(path)), seed)
