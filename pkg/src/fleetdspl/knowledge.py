"""The knowledge base shared by the adaptation loop.

Variables are partitioned into three dimensions (system, context,
environment).  The partition can change at runtime by switching modes.
Readings feed the current view, facts (forecasts) feed the predicted view,
and the device registry decides which devices are feasible binding targets.
"""

from __future__ import annotations

import enum
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from types import MappingProxyType

from fleetdspl.trace import Trace
from fleetdspl.variability import DConfig

BASE_MODE = "base"
DEFAULT_BATTERY_FLOOR = 10.0


class Dimension(str, enum.Enum):
    SYSTEM = "system"
    CONTEXT = "context"
    ENVIRONMENT = "environment"


class KnowledgeError(ValueError):
    pass


class RangeError(KnowledgeError):
    pass


class StaleOutOfOrder(KnowledgeError):
    pass


class InvalidFact(KnowledgeError):
    pass


class UnknownMode(KnowledgeError):
    pass


@dataclass(frozen=True)
class DimensionMap:
    """Base assignment plus named override sets; exactly one mode is active."""

    base: Mapping[str, Dimension]
    modes: Mapping[str, Mapping[str, Dimension]] = field(default_factory=dict)
    active_mode: str = BASE_MODE

    def __post_init__(self):
        base = {v: Dimension(d) for v, d in self.base.items()}
        modes = {}
        for name, overrides in self.modes.items():
            if name == BASE_MODE:
                raise KnowledgeError(f"mode name {BASE_MODE!r} is reserved")
            stray = sorted(set(overrides) - set(base))
            if stray:
                raise KnowledgeError(f"mode {name!r} overrides unmapped variable {stray[0]!r}")
            modes[name] = MappingProxyType({v: Dimension(d) for v, d in overrides.items()})
        object.__setattr__(self, "base", MappingProxyType(base))
        object.__setattr__(self, "modes", MappingProxyType(modes))
        if self.active_mode != BASE_MODE and self.active_mode not in modes:
            raise UnknownMode(self.active_mode)

    def assignment(self) -> dict[str, Dimension]:
        out = dict(self.base)
        if self.active_mode != BASE_MODE:
            out.update(self.modes[self.active_mode])
        return out

    def dimension_of(self, variable: str) -> Dimension | None:
        if self.active_mode != BASE_MODE and variable in self.modes[self.active_mode]:
            return self.modes[self.active_mode][variable]
        return self.base.get(variable)

    def with_mode(self, mode: str) -> "DimensionMap":
        if mode != BASE_MODE and mode not in self.modes:
            raise UnknownMode(mode)
        return replace(self, active_mode=mode)


@dataclass(frozen=True)
class Reading:
    variable: str
    value: float
    tick: int
    source: str


@dataclass(frozen=True)
class Fact:
    variable: str
    predicted_value: float
    valid_at: int
    issued_at: int


@dataclass(frozen=True)
class DeviceDescriptor:
    id: str
    capabilities: tuple[str, ...] = ()
    battery: float = 100.0
    reachable: bool = True
    params: DConfig = field(default_factory=DConfig)

    def __post_init__(self):
        object.__setattr__(self, "capabilities", tuple(self.capabilities))
        if not isinstance(self.params, DConfig):
            object.__setattr__(self, "params", DConfig(self.params))


@dataclass(frozen=True)
class CurrentValue:
    value: float
    age: int
    stale: bool = False


@dataclass(frozen=True)
class EvaluationContext:
    now: int
    current: Mapping[str, CurrentValue]
    predicted: Mapping[str, float]
    feasible_devices: frozenset
    dimensions: Mapping[str, Dimension] = field(default_factory=dict)
    mode: str = BASE_MODE

    def to_payload(self) -> dict:
        return {
            "mode": self.mode,
            "dimensions": {v: d.value for v, d in sorted(self.dimensions.items())},
            "current": {
                v: {"value": c.value, "age": c.age, "stale": c.stale}
                for v, c in sorted(self.current.items())
            },
            "predicted": dict(sorted(self.predicted.items())),
            "feasible": sorted(self.feasible_devices),
        }


def _fact_rank(f: Fact):
    # nearest valid_at first; for the same target time the later issue wins
    return (f.valid_at, -f.issued_at, f.predicted_value)


class KnowledgeBase:
    """Single-writer store; mutated only from the loop's logical thread."""

    def __init__(
        self,
        dimension_map: DimensionMap,
        trace: Trace | None = None,
        battery_floor: float = DEFAULT_BATTERY_FLOOR,
    ):
        self.dimension_map = dimension_map
        self.trace = trace if trace is not None else Trace()
        self.battery_floor = battery_floor
        self.registry: dict[str, DeviceDescriptor] = {}
        self.facts: list[Fact] = []
        self.unmapped: set[str] = set()
        self._latest: dict[str, Reading] = {}
        self._source_ticks: dict[tuple[str, str], int] = {}

    # -- devices

    def register_device(self, descriptor: DeviceDescriptor) -> dict[str, DeviceDescriptor]:
        """Add or replace a device (last write wins)."""
        if not 0 <= descriptor.battery <= 100:
            raise RangeError(f"battery of {descriptor.id!r} out of range: {descriptor.battery}")
        self.registry[descriptor.id] = descriptor
        return self.registry

    def mark_unreachable(self, device_id: str) -> None:
        if device_id in self.registry:
            self.registry[device_id] = replace(self.registry[device_id], reachable=False)

    def feasible_devices(self) -> frozenset:
        return frozenset(
            d.id for d in self.registry.values() if d.reachable and d.battery > self.battery_floor
        )

    # -- monitoring input

    def ingest_reading(self, r: Reading) -> None:
        key = (r.variable, r.source)
        last = self._source_ticks.get(key)
        if last is not None and r.tick < last:
            self.trace.emit(
                r.tick,
                "Warning",
                {"warning": "StaleOutOfOrder", "variable": r.variable, "source": r.source, "latest": last},
            )
            raise StaleOutOfOrder(f"{r.variable} from {r.source} at {r.tick} precedes tick {last}")
        self._source_ticks[key] = r.tick
        payload = {"variable": r.variable, "value": r.value, "source": r.source}
        if self.dimension_map.dimension_of(r.variable) is None:
            self.unmapped.add(r.variable)
            payload["unmapped"] = True
        prev = self._latest.get(r.variable)
        if prev is None or r.tick >= prev.tick:
            self._latest[r.variable] = r
        self.trace.emit(r.tick, "Reading", payload)

    def latest(self, variable: str) -> Reading | None:
        return self._latest.get(variable)

    def ingest_fact(self, f: Fact) -> None:
        if f.valid_at < f.issued_at:
            raise InvalidFact(f"fact for {f.variable} valid at {f.valid_at} before issue at {f.issued_at}")
        self.facts.append(f)
        self.trace.emit(
            f.issued_at,
            "Fact",
            {"variable": f.variable, "value": f.predicted_value, "valid_at": f.valid_at},
        )

    def prune(self, now: int, horizon: int) -> None:
        """Forget facts whose validity ended more than ``horizon`` ago."""
        self.facts = [f for f in self.facts if f.valid_at + horizon >= now]

    def set_mode(self, mode: str, now: int) -> None:
        before = self.dimension_map.assignment()
        self.dimension_map = self.dimension_map.with_mode(mode)
        after = self.dimension_map.assignment()
        moved = {v: [before[v].value, after[v].value] for v in sorted(after) if before[v] != after[v]}
        self.trace.emit(now, "ModeSwitch", {"mode": mode, "moved": moved})

    # -- analysis input

    def snapshot(self, now: int, horizon: int, staleness_window: int) -> EvaluationContext:
        dims = self.dimension_map.assignment()
        current = {}
        for var, reading in self._latest.items():
            if dims.get(var) is not Dimension.CONTEXT:
                continue
            age = now - reading.tick
            current[var] = CurrentValue(reading.value, age, age > staleness_window)

        predicted = {v: c.value for v, c in current.items()}
        nearest: dict[str, Fact] = {}
        for f in self.facts:
            if dims.get(f.variable) not in (Dimension.CONTEXT, Dimension.ENVIRONMENT):
                continue
            if not now <= f.valid_at <= now + horizon:
                continue
            held = nearest.get(f.variable)
            if held is None or _fact_rank(f) < _fact_rank(held):
                nearest[f.variable] = f
        for var, f in nearest.items():
            predicted[var] = f.predicted_value

        return EvaluationContext(
            now=now,
            current=MappingProxyType(current),
            predicted=MappingProxyType(predicted),
            feasible_devices=self.feasible_devices(),
            dimensions=MappingProxyType(dims),
            mode=self.dimension_map.active_mode,
        )
