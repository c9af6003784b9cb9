"""Monitor-analyze-plan-execute over the knowledge base.

Goals are weighted piecewise-linear soft goals.  Each selection is scored on
the current view (what sensors report now) and on the predicted view (facts
within the horizon, shifted by the selection's declared effects); the blend of
the two drives planning.  Planning only happens when analysis reports a
violation, and a plan is only emitted when it beats the current configuration
by at least the hysteresis margin (or the current one can no longer be
realized).
"""

from __future__ import annotations

import itertools
import logging
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, NamedTuple

from fleetdspl.knowledge import EvaluationContext, KnowledgeBase
from fleetdspl.trace import Trace, TraceEvent
from fleetdspl.variability import (
    ChangeSet,
    FConfig,
    FeatureModel,
    ParamValue,
    Selection,
    UnsatisfiedCapability,
    derive_fconfig,
    diff_selections,
    enumerate_configurations,
)

log = logging.getLogger(__name__)

GOAL_KINDS = ("above", "below", "band", "feature_off")
TIE_TOLERANCE = 1e-9
_GAIN_SLACK = 1e-12


class NoFeasibleConfiguration(RuntimeError):
    pass


@dataclass(frozen=True)
class Goal:
    id: str
    kind: str
    weight: float = 1.0
    variable: str | None = None
    feature: str | None = None
    threshold: float | None = None
    lo: float | None = None
    hi: float | None = None
    ramp: float = 1.0

    def __post_init__(self):
        if self.kind not in GOAL_KINDS:
            raise ValueError(f"goal {self.id!r}: unknown kind {self.kind!r}")
        if self.weight < 0:
            raise ValueError(f"goal {self.id!r}: weight must be non-negative")
        if self.ramp <= 0:
            raise ValueError(f"goal {self.id!r}: ramp must be positive")
        if self.kind == "feature_off":
            if not self.feature:
                raise ValueError(f"goal {self.id!r}: feature_off needs a feature")
            return
        if not self.variable:
            raise ValueError(f"goal {self.id!r}: {self.kind} needs a variable")
        if self.kind == "band":
            if self.lo is None or self.hi is None or self.lo > self.hi:
                raise ValueError(f"goal {self.id!r}: band needs lo <= hi")
        elif self.threshold is None:
            raise ValueError(f"goal {self.id!r}: {self.kind} needs a threshold")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Goal":
        allowed = {"id", "weight", "kind", "variable", "feature", "threshold", "lo", "hi", "ramp"}
        unknown = sorted(set(data) - allowed)
        if unknown:
            raise ValueError(f"goal: unknown key {unknown[0]!r}")
        if "id" not in data or "kind" not in data:
            raise ValueError("goal: 'id' and 'kind' are required")
        return cls(**data)


@dataclass(frozen=True)
class LoopSettings:
    period: int = 5
    epsilon: float = 0.05
    alpha: float = 0.5
    horizon: int = 24
    staleness: int = 10
    violation_threshold: float = 0.6
    ack_timeout: int = 2
    battery_floor: float = 10.0

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.horizon < 0 or self.staleness < 0 or self.ack_timeout < 0:
            raise ValueError("horizon, staleness and ack_timeout must be >= 0")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LoopSettings":
        unknown = sorted(set(data) - set(cls.__dataclass_fields__))
        if unknown:
            raise ValueError(f"loop: unknown key {unknown[0]!r}")
        return cls(**data)


@dataclass(frozen=True)
class Projection:
    """How a selection and the forecasts shift the predicted view.

    ``effects[feature][variable]`` is added while the feature is selected;
    ``forecast_gains[source][variable]`` adds gain * predicted(source).
    """

    effects: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    forecast_gains: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    def apply(self, ec: EvaluationContext, sel: Iterable[str]) -> dict[str, float]:
        base = dict(ec.predicted)
        out = dict(base)
        for source in sorted(self.forecast_gains):
            if source not in base:
                continue
            for target, gain in sorted(self.forecast_gains[source].items()):
                if target in out:
                    out[target] += gain * base[source]
        for feature in sorted(set(sel) & set(self.effects)):
            for target, shift in sorted(self.effects[feature].items()):
                if target in out:
                    out[target] += shift
        return out


class GoalScore(NamedTuple):
    value: float
    flag: str | None = None  # "unknown" or "stale"


def _ramped(goal: Goal, v: float) -> float:
    if goal.kind == "above":
        gap = goal.threshold - v
    elif goal.kind == "below":
        gap = v - goal.threshold
    else:
        gap = max(goal.lo - v, v - goal.hi)
    if gap <= 0:
        return 1.0
    return max(0.0, 1.0 - gap / goal.ramp)


def evaluate_goal(
    goal: Goal,
    ec: EvaluationContext,
    view: str,
    sel: Iterable[str],
    predicted: Mapping[str, float] | None = None,
) -> GoalScore:
    """Satisfaction of one goal in one view.

    ``predicted`` overrides ``ec.predicted`` (used for projected views).
    """
    if goal.kind == "feature_off":
        return GoalScore(0.0 if goal.feature in frozenset(sel) else 1.0)
    if view == "current":
        cv = ec.current.get(goal.variable)
        if cv is None:
            return GoalScore(0.5, "unknown")
        if cv.stale:
            return GoalScore(0.0, "stale")
        return GoalScore(_ramped(goal, cv.value))
    if view != "predicted":
        raise ValueError(f"unknown view {view!r}")
    values = ec.predicted if predicted is None else predicted
    if goal.variable not in values:
        return GoalScore(0.5, "unknown")
    return GoalScore(_ramped(goal, values[goal.variable]))


class Scores(NamedTuple):
    total_current: float
    total_predicted: float
    effective: float


def _weighted(goals: Sequence[Goal], values: Sequence[float]) -> float:
    total_w = sum(g.weight for g in goals)
    if total_w == 0:
        return 1.0
    return sum(g.weight * s for g, s in zip(goals, values)) / total_w


def score(
    sel: Iterable[str],
    ec: EvaluationContext,
    goals: Sequence[Goal],
    alpha: float,
    projection: Projection | None = None,
) -> Scores:
    sel = frozenset(sel)
    predicted = projection.apply(ec, sel) if projection else None
    cur = _weighted(goals, [evaluate_goal(g, ec, "current", sel).value for g in goals])
    pred = _weighted(goals, [evaluate_goal(g, ec, "predicted", sel, predicted).value for g in goals])
    return Scores(cur, pred, alpha * cur + (1 - alpha) * pred)


@dataclass(frozen=True)
class SatisfactionReport:
    per_goal: Mapping[str, float]
    per_goal_predicted: Mapping[str, float]
    total_current: float
    total_predicted: float
    effective: float
    violations: tuple[dict, ...]
    context: EvaluationContext
    selection: Selection

    @property
    def infeasible(self) -> bool:
        return any(v["kind"] == "infeasibility" for v in self.violations)

    def to_payload(self) -> dict[str, Any]:
        payload = self.context.to_payload()
        payload.update(
            selection=sorted(self.selection),
            per_goal=dict(self.per_goal),
            per_goal_predicted=dict(self.per_goal_predicted),
            total_current=self.total_current,
            total_predicted=self.total_predicted,
            effective=self.effective,
            violations=list(self.violations),
        )
        return payload


def analyze(
    kb: KnowledgeBase,
    model: FeatureModel,
    goals: Sequence[Goal],
    current: FConfig,
    settings: LoopSettings,
    now: int,
    projection: Projection | None = None,
) -> SatisfactionReport:
    ec = kb.snapshot(now, settings.horizon, settings.staleness)
    sel = current.selection
    predicted = projection.apply(ec, sel) if projection else None
    per_goal, per_goal_pred = {}, {}
    goal_violations, stale_records = [], []
    for g in goals:
        cur = evaluate_goal(g, ec, "current", sel)
        per_goal[g.id] = cur.value
        per_goal_pred[g.id] = evaluate_goal(g, ec, "predicted", sel, predicted).value
        if cur.value < settings.violation_threshold:
            goal_violations.append({"kind": "goal", "goal": g.id, "satisfaction": cur.value})
        if cur.flag == "stale":
            stale_records.append({"kind": "staleness", "goal": g.id, "variable": g.variable})
    infeasible = [
        {"kind": "infeasibility", "feature": f, "device": d}
        for f, d in sorted(current.bindings.items())
        if d not in ec.feasible_devices
    ]
    cur_total = _weighted(goals, [per_goal[g.id] for g in goals])
    pred_total = _weighted(goals, [per_goal_pred[g.id] for g in goals])
    return SatisfactionReport(
        per_goal=per_goal,
        per_goal_predicted=per_goal_pred,
        total_current=cur_total,
        total_predicted=pred_total,
        effective=settings.alpha * cur_total + (1 - settings.alpha) * pred_total,
        violations=tuple(goal_violations + stale_records + infeasible),
        context=ec,
        selection=sel,
    )


@dataclass(frozen=True)
class Command:
    device: str
    op: str  # activate | deactivate | configure
    feature: str | None = None
    params: Mapping[str, ParamValue] = field(default_factory=dict)


@dataclass(frozen=True)
class Delta:
    changes: ChangeSet
    commands: tuple[Command, ...]


@dataclass(frozen=True)
class AdaptationPlan:
    target: FConfig
    delta: Delta
    reason: tuple[dict, ...]
    expected_gain: float
    effective: float

    def to_payload(self) -> dict[str, Any]:
        return {
            "status": "planned",
            "target": self.target.to_dict(),
            "added": sorted(self.delta.changes.added),
            "removed": sorted(self.delta.changes.removed),
            "commands": len(self.delta.commands),
            "expected_gain": self.expected_gain,
            "effective": self.effective,
            "reason": [v["kind"] for v in self.reason],
        }


@dataclass(frozen=True)
class NoChange:
    reason: str
    best_gain: float | None = None

    def to_payload(self) -> dict[str, Any]:
        out: dict[str, Any] = {"reason": self.reason}
        if self.best_gain is not None:
            out["best_gain"] = self.best_gain
        return out


def plan_commands(
    current: FConfig, target: FConfig, reachable: Iterable[str] | None = None
) -> tuple[Command, ...]:
    """Deactivations, then activations, then parameter changes on kept devices.

    Deactivations addressed to devices outside ``reachable`` are skipped: a
    dead device cannot acknowledge and is already out of service.
    """
    reachable = None if reachable is None else set(reachable)
    cmds: list[Command] = []
    for f, dev in sorted(current.bindings.items()):
        if target.bindings.get(f) != dev and (reachable is None or dev in reachable):
            cmds.append(Command(dev, "deactivate", f))
    activated = set()
    for f, dev in sorted(target.bindings.items()):
        if current.bindings.get(f) != dev:
            params = target.dconfigs[dev].params if dev in target.dconfigs else {}
            cmds.append(Command(dev, "activate", f, dict(params)))
            activated.add(dev)
    for dev, cfg in sorted(target.dconfigs.items()):
        if dev in activated:
            continue
        old = current.dconfigs.get(dev)
        if old is None or old != cfg:
            if old is None and not cfg.params:
                continue
            cmds.append(Command(dev, "configure", None, dict(cfg.params)))
    return tuple(cmds)


def _best(scored, current_sel: Selection):
    top = max(eff for _, _, eff in scored)
    tied = [item for item in scored if item[2] >= top - TIE_TOLERANCE]
    return min(tied, key=lambda item: (len(diff_selections(current_sel, item[0])), sorted(item[0])))


def plan(
    report: SatisfactionReport,
    model: FeatureModel,
    registry: Iterable,
    goals: Sequence[Goal],
    kb: KnowledgeBase,
    current: FConfig,
    settings: LoopSettings,
    projection: Projection | None = None,
    defaults: Mapping[str, Mapping[str, ParamValue]] | None = None,
    candidates: Sequence[Selection] | None = None,
) -> AdaptationPlan | NoChange:
    """Pick the best derivable configuration, gated on necessity and hysteresis."""
    if not report.violations:
        return NoChange("no-violations")
    ec = report.context
    feasible = [d for d in registry if d.id in ec.feasible_devices]
    if candidates is None:
        candidates = enumerate_configurations(model).selections

    scored = []
    for sel in candidates:
        try:
            fc = derive_fconfig(model, sel, feasible, defaults)
        except UnsatisfiedCapability:
            continue
        scored.append((sel, fc, score(sel, ec, goals, settings.alpha, projection).effective))
    if not scored:
        raise NoFeasibleConfiguration("no valid selection can be derived on the feasible devices")

    best_sel, best_fc, best_eff = _best(scored, current.selection)
    gain = best_eff - report.effective
    if best_fc == current:
        return NoChange("already-optimal", gain)
    if gain + _GAIN_SLACK < settings.epsilon and not report.infeasible:
        return NoChange("hysteresis", gain)
    delta = Delta(
        diff_selections(current.selection, best_sel),
        plan_commands(current, best_fc, _reachable(kb)),
    )
    return AdaptationPlan(best_fc, delta, report.violations, gain, best_eff)


def _reachable(kb: KnowledgeBase) -> set[str]:
    return {d.id for d in kb.registry.values() if d.reachable}


@dataclass(frozen=True)
class ExecutionResult:
    applied: bool
    fconfig: FConfig
    aborted: str | None = None


def execute(
    plan: AdaptationPlan,
    bus,
    current: FConfig,
    settings: LoopSettings,
    kb: KnowledgeBase,
    trace: Trace,
    now: int,
    ids: Iterator[int] | None = None,
) -> ExecutionResult:
    """Send the plan's commands one by one; abort on the first missing ack."""
    ids = ids if ids is not None else itertools.count(1)
    for cmd in plan.delta.commands:
        cid = next(ids)
        payload = {"id": cid, "device": cmd.device, "op": cmd.op, "feature": cmd.feature}
        if cmd.params:
            payload["params"] = dict(cmd.params)
        trace.emit(now, "Command", payload)
        bus.publish(f"cmd/{cmd.device}", payload, now)
        acks = [
            m for m in bus.drain(f"ack/{cmd.device}")
            if m.payload.get("id") == cid and m.tick <= now + settings.ack_timeout
        ]
        if not acks:
            kb.mark_unreachable(cmd.device)
            trace.emit(now, "Warning", {"warning": "AckTimeout", "device": cmd.device, "id": cid})
            log.warning("command %s to %s not acknowledged; plan aborted", cid, cmd.device)
            return ExecutionResult(False, current, cmd.device)
        trace.emit(now, "Ack", {"id": cid, "device": cmd.device, "latency": acks[0].tick - now})
    trace.emit(
        now,
        "Adapt",
        {
            "selection": sorted(plan.target.selection),
            "bindings": dict(sorted(plan.target.bindings.items())),
            "added": sorted(plan.delta.changes.added),
            "removed": sorted(plan.delta.changes.removed),
        },
    )
    return ExecutionResult(True, plan.target)


class AdaptationEngine:
    """One fleet's loop state: the model, goals, settings and current FConfig."""

    def __init__(
        self,
        model: FeatureModel,
        goals: Sequence[Goal],
        settings: LoopSettings,
        kb: KnowledgeBase,
        bus,
        current: FConfig,
        projection: Projection | None = None,
        defaults: Mapping[str, Mapping[str, ParamValue]] | None = None,
    ):
        self.model = model
        self.goals = tuple(goals)
        self.settings = settings
        self.kb = kb
        self.bus = bus
        self.current = current
        self.projection = projection or Projection()
        self.defaults = defaults or {}
        self.last_report: SatisfactionReport | None = None
        self.adaptations = 0
        self._ids = itertools.count(1)
        self._candidates = enumerate_configurations(model).selections

    @property
    def trace(self) -> Trace:
        return self.kb.trace

    def analyze(self, now: int) -> SatisfactionReport:
        return analyze(self.kb, self.model, self.goals, self.current, self.settings, now, self.projection)

    def run_loop_step(self, now: int) -> list[TraceEvent]:
        start = len(self.trace)
        report = self.analyze(now)
        self.last_report = report
        self.trace.emit(now, "Analyze", report.to_payload())
        try:
            decision = plan(
                report,
                self.model,
                list(self.kb.registry.values()),
                self.goals,
                self.kb,
                self.current,
                self.settings,
                self.projection,
                self.defaults,
                self._candidates,
            )
        except NoFeasibleConfiguration as exc:
            log.error("t=%s: %s", now, exc)
            self.trace.emit(
                now,
                "Plan",
                {"status": "failed", "error": "NoFeasibleConfiguration", "critical": True, "detail": str(exc)},
            )
            return self.trace.events[start:]

        if isinstance(decision, NoChange):
            self.trace.emit(now, "NoChange", decision.to_payload())
        else:
            self.trace.emit(now, "Plan", decision.to_payload())
            result = execute(decision, self.bus, self.current, self.settings, self.kb, self.trace, now, self._ids)
            if result.applied:
                self.current = result.fconfig
                self.adaptations += 1
        return self.trace.events[start:]
