"""Feature models, selection validity, product enumeration and device binding.

A feature model is a tree of features where each node carries zero or more
groups (mandatory, optional, alternative, or) plus cross-tree ``requires`` /
``excludes`` constraints.  Selections are plain frozensets of feature names.
"""

from __future__ import annotations

import itertools
import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import TYPE_CHECKING, Any, Union

if TYPE_CHECKING:
    from fleetdspl.knowledge import DeviceDescriptor

GROUP_KINDS = ("mandatory", "optional", "alternative", "or")
CONSTRAINT_KINDS = ("requires", "excludes")
MAX_ENUMERABLE_FEATURES = 20

ParamValue = Union[float, int, str, bool]
Selection = frozenset  # frozenset[str]; kept as a plain alias for readability


class ModelError(ValueError):
    """Base class for feature-model problems."""


class ModelSyntaxError(ModelError):
    """The model document is not well-formed."""

    def __init__(self, element: str, message: str):
        super().__init__(f"{element}: {message}")
        self.element = element


class SemanticError(ModelError):
    """The model document is well-formed but violates a model invariant.

    ``issues`` lists every offending element found; ``element`` is the first.
    """

    def __init__(self, issues: Sequence[tuple[str, str]]):
        self.issues = list(issues)
        self.element = self.issues[0][0]
        super().__init__("; ".join(f"{name}: {msg}" for name, msg in self.issues))


class UnknownFeature(ModelError):
    def __init__(self, names: Iterable[str]):
        self.names = sorted(names)
        super().__init__("unknown feature(s): " + ", ".join(self.names))


class ModelTooLarge(ModelError):
    pass


class InvalidSelection(ModelError):
    def __init__(self, verdict: "Verdict"):
        self.verdict = verdict
        super().__init__("invalid selection: " + "; ".join(str(v) for v in verdict.violations))


class UnsatisfiedCapability(ModelError):
    def __init__(self, feature: str, missing: Iterable[str]):
        self.feature = feature
        self.missing = sorted(missing)
        super().__init__(f"no reachable device provides {self.missing} for feature {feature!r}")


@dataclass(frozen=True)
class Group:
    kind: str
    children: tuple["FeatureNode", ...]


@dataclass(frozen=True)
class FeatureNode:
    name: str
    groups: tuple[Group, ...] = ()

    def walk(self):
        """Yield nodes in pre-order."""
        yield self
        for group in self.groups:
            for child in group.children:
                yield from child.walk()


@dataclass(frozen=True)
class CrossTreeConstraint:
    kind: str
    source: str
    target: str

    def __str__(self) -> str:
        return f"{self.kind} {self.source}→{self.target}"


@dataclass(frozen=True)
class FeatureModel:
    name: str
    root: FeatureNode
    constraints: tuple[CrossTreeConstraint, ...] = ()
    capabilities: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "capabilities", MappingProxyType(dict(self.capabilities)))
        issues = _model_issues(self)
        if issues:
            raise SemanticError(issues)

    @property
    def features(self) -> tuple[str, ...]:
        return tuple(node.name for node in self.root.walk())

    def needs(self, feature: str) -> tuple[str, ...]:
        return tuple(self.capabilities.get(feature, ()))

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "root": _node_to_dict(self.root),
            "constraints": [
                {"kind": c.kind, "from": c.source, "to": c.target} for c in self.constraints
            ],
            "capabilities": {k: list(v) for k, v in self.capabilities.items()},
        }


@dataclass(frozen=True)
class Violation:
    rule: str
    features: tuple[str, ...]

    def __str__(self) -> str:
        if self.rule in CONSTRAINT_KINDS:
            return f"{self.rule} {self.features[0]}→{self.features[1]}"
        return f"{self.rule} {','.join(self.features)}"


@dataclass(frozen=True)
class Verdict:
    violations: tuple[Violation, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.valid


@dataclass(frozen=True)
class Enumeration:
    selections: tuple[Selection, ...]
    total: int

    @property
    def truncated(self) -> bool:
        return len(self.selections) < self.total


@dataclass(frozen=True)
class DConfig:
    params: Mapping[str, ParamValue] = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.params.items():
            if not isinstance(name, str) or not name:
                raise ValueError("DConfig parameter names must be non-empty strings")
            if not isinstance(value, (int, float, str, bool)):
                raise ValueError(f"DConfig parameter {name!r} has unsupported value {value!r}")
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))

    def __eq__(self, other):
        if not isinstance(other, DConfig):
            return NotImplemented
        return dict(self.params) == dict(other.params)

    def __hash__(self):
        return hash(tuple(sorted(self.params.items())))


@dataclass(frozen=True)
class FConfig:
    selection: Selection
    bindings: Mapping[str, str] = field(default_factory=dict)
    dconfigs: Mapping[str, DConfig] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "selection", frozenset(self.selection))
        object.__setattr__(self, "bindings", MappingProxyType(dict(self.bindings)))
        object.__setattr__(self, "dconfigs", MappingProxyType(dict(self.dconfigs)))
        if not set(self.dconfigs) <= set(self.bindings.values()):
            raise ValueError("dconfigs may only name bound devices")

    def __eq__(self, other):
        if not isinstance(other, FConfig):
            return NotImplemented
        return (
            self.selection == other.selection
            and dict(self.bindings) == dict(other.bindings)
            and dict(self.dconfigs) == dict(other.dconfigs)
        )

    def __hash__(self):
        return hash((self.selection, tuple(sorted(self.bindings.items()))))

    def to_dict(self) -> dict[str, Any]:
        return {
            "selection": sorted(self.selection),
            "bindings": dict(sorted(self.bindings.items())),
            "dconfigs": {d: dict(sorted(c.params.items())) for d, c in sorted(self.dconfigs.items())},
        }


# -- parsing ---------------------------------------------------------------

_MODEL_KEYS = {"name", "root", "constraints", "capabilities"}
_NODE_KEYS = {"name", "groups"}
_GROUP_KEYS = {"kind", "children"}
_CONSTRAINT_KEYS = {"kind", "from", "to"}


def parse_model(text: str) -> FeatureModel:
    """Parse a JSON model document into a validated :class:`FeatureModel`."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelSyntaxError("document", f"invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return model_from_dict(data)


def model_from_dict(data: Any) -> FeatureModel:
    if not isinstance(data, dict):
        raise ModelSyntaxError("document", "top level must be an object")
    _reject_unknown(data, _MODEL_KEYS, "document")
    for key in ("name", "root"):
        if key not in data:
            raise ModelSyntaxError(key, "missing required key")
    if not isinstance(data["name"], str) or not data["name"]:
        raise ModelSyntaxError("name", "must be a non-empty string")

    root = _node_from_dict(data["root"], "root")

    raw_constraints = data.get("constraints", [])
    if not isinstance(raw_constraints, list):
        raise ModelSyntaxError("constraints", "must be a list")
    constraints = []
    for i, item in enumerate(raw_constraints):
        where = f"constraints[{i}]"
        if not isinstance(item, dict):
            raise ModelSyntaxError(where, "must be an object")
        _reject_unknown(item, _CONSTRAINT_KEYS, where)
        for key in _CONSTRAINT_KEYS:
            if not isinstance(item.get(key), str):
                raise ModelSyntaxError(f"{where}.{key}", "must be a string")
        constraints.append(CrossTreeConstraint(item["kind"], item["from"], item["to"]))

    raw_caps = data.get("capabilities", {})
    if not isinstance(raw_caps, dict):
        raise ModelSyntaxError("capabilities", "must be an object")
    capabilities = {}
    for feature, tags in raw_caps.items():
        if not isinstance(tags, list) or not all(isinstance(t, str) and t for t in tags):
            raise ModelSyntaxError(f"capabilities.{feature}", "must be a list of non-empty strings")
        capabilities[feature] = tuple(tags)

    return FeatureModel(data["name"], root, tuple(constraints), capabilities)


def _reject_unknown(obj: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ModelSyntaxError(f"{where}.{unknown[0]}", "unknown key")


def _node_from_dict(obj: Any, where: str) -> FeatureNode:
    if not isinstance(obj, dict):
        raise ModelSyntaxError(where, "feature node must be an object")
    _reject_unknown(obj, _NODE_KEYS, where)
    name = obj.get("name")
    if not isinstance(name, str) or not name:
        raise ModelSyntaxError(f"{where}.name", "must be a non-empty string")
    raw_groups = obj.get("groups", [])
    if not isinstance(raw_groups, list):
        raise ModelSyntaxError(f"{name}.groups", "must be a list")
    groups = []
    for i, g in enumerate(raw_groups):
        gwhere = f"{name}.groups[{i}]"
        if not isinstance(g, dict):
            raise ModelSyntaxError(gwhere, "group must be an object")
        _reject_unknown(g, _GROUP_KEYS, gwhere)
        if not isinstance(g.get("kind"), str):
            raise ModelSyntaxError(f"{gwhere}.kind", "must be a string")
        children = g.get("children", [])
        if not isinstance(children, list):
            raise ModelSyntaxError(f"{gwhere}.children", "must be a list")
        groups.append(Group(g["kind"], tuple(_node_from_dict(c, f"{name}/child") for c in children)))
    return FeatureNode(name, tuple(groups))


def _node_to_dict(node: FeatureNode) -> dict[str, Any]:
    out: dict[str, Any] = {"name": node.name}
    if node.groups:
        out["groups"] = [
            {"kind": g.kind, "children": [_node_to_dict(c) for c in g.children]} for g in node.groups
        ]
    return out


def _model_issues(model: FeatureModel) -> list[tuple[str, str]]:
    issues = []
    seen: set[str] = set()
    for node in model.root.walk():
        if node.name in seen:
            issues.append((node.name, "duplicate feature name"))
        seen.add(node.name)
        for group in node.groups:
            if group.kind not in GROUP_KINDS:
                issues.append((node.name, f"unknown group kind {group.kind!r}"))
            if not group.children:
                issues.append((node.name, f"empty {group.kind} group"))
    for c in model.constraints:
        if c.kind not in CONSTRAINT_KINDS:
            issues.append((str(c), f"unknown constraint kind {c.kind!r}"))
        for end in (c.source, c.target):
            if end not in seen:
                issues.append((end, "constraint names an undeclared feature"))
        if c.source == c.target:
            issues.append((c.source, "constraint endpoints must differ"))
    for feature in model.capabilities:
        if feature not in seen:
            issues.append((feature, "capabilities name an undeclared feature"))
    return issues


# -- selection semantics ---------------------------------------------------


def check_selection(model: FeatureModel, sel: Iterable[str]) -> Verdict:
    """Check a selection against root, group and cross-tree rules."""
    sel = frozenset(sel)
    unknown = sel - set(model.features)
    if unknown:
        raise UnknownFeature(unknown)

    found: list[Violation] = []
    if model.root.name not in sel:
        found.append(Violation("root", (model.root.name,)))
    for node in model.root.walk():
        parent_on = node.name in sel
        for group in node.groups:
            chosen = [c.name for c in group.children if c.name in sel]
            for name in chosen:
                if not parent_on:
                    found.append(Violation("parent", (name, node.name)))
            if not parent_on:
                continue
            if group.kind == "mandatory":
                for c in group.children:
                    if c.name not in sel:
                        found.append(Violation("mandatory", (node.name, c.name)))
            elif group.kind == "alternative" and len(chosen) != 1:
                found.append(Violation("alternative", (node.name, *chosen)))
            elif group.kind == "or" and not chosen:
                found.append(Violation("or", (node.name,)))
    for c in model.constraints:
        if c.source not in sel:
            continue
        if c.kind == "requires" and c.target not in sel:
            found.append(Violation("requires", (c.source, c.target)))
        elif c.kind == "excludes" and c.target in sel:
            found.append(Violation("excludes", (c.source, c.target)))
    return Verdict(tuple(found))


def selection_key(sel: Iterable[str]) -> list[str]:
    """Ordering key: lexicographic over the sorted feature-name list."""
    return sorted(sel)


def _subtree_products(node: FeatureNode) -> list[frozenset]:
    """All feature sets of ``node``'s subtree that are tree-valid with ``node`` selected."""
    per_group = []
    for group in node.groups:
        child_options = [_subtree_products(c) for c in group.children]
        if group.kind == "mandatory":
            options = [frozenset().union(*combo) for combo in itertools.product(*child_options)]
        elif group.kind == "optional":
            options = [
                frozenset().union(*combo)
                for combo in itertools.product(*[[frozenset()] + opts for opts in child_options])
            ]
        elif group.kind == "alternative":
            options = [opt for opts in child_options for opt in opts]
        else:  # or
            options = []
            for combo in itertools.product(*[[frozenset()] + opts for opts in child_options]):
                if any(combo):
                    options.append(frozenset().union(*combo))
        per_group.append(options)
    return [frozenset({node.name}).union(*combo) for combo in itertools.product(*per_group)]


def _satisfies_constraints(model: FeatureModel, sel: frozenset) -> bool:
    for c in model.constraints:
        if c.source in sel:
            if c.kind == "requires" and c.target not in sel:
                return False
            if c.kind == "excludes" and c.target in sel:
                return False
    return True


def enumerate_configurations(model: FeatureModel, limit: int | None = None) -> Enumeration:
    """Every valid selection, ordered by sorted feature-name list.

    Products are built group by group from the tree, so the tree rules hold by
    construction and only cross-tree constraints need filtering.
    """
    if len(model.features) > MAX_ENUMERABLE_FEATURES:
        raise ModelTooLarge(
            f"{len(model.features)} features exceed the exhaustive limit of {MAX_ENUMERABLE_FEATURES}"
        )
    if limit is not None and limit < 0:
        raise ValueError("limit must be non-negative")
    valid = [s for s in _subtree_products(model.root) if _satisfies_constraints(model, s)]
    valid.sort(key=selection_key)
    shown = valid if limit is None else valid[:limit]
    return Enumeration(tuple(shown), len(valid))


# -- derivation ------------------------------------------------------------


def derive_fconfig(
    model: FeatureModel,
    sel: Iterable[str],
    registry: Sequence["DeviceDescriptor"],
    defaults: Mapping[str, Mapping[str, ParamValue]] | None = None,
) -> FConfig:
    """Bind each selected feature with capability needs to a device.

    The eligible device with the smallest id wins.  A device's DConfig starts
    from its own params and is overlaid with the defaults of every feature bound
    to it, in feature-name order.
    """
    sel = frozenset(sel)
    verdict = check_selection(model, sel)
    if not verdict.valid:
        raise InvalidSelection(verdict)
    defaults = defaults or {}
    devices = sorted((d for d in registry if d.reachable), key=lambda d: d.id)

    bindings: dict[str, str] = {}
    for feature in sorted(sel):
        needs = set(model.needs(feature))
        if not needs:
            continue
        for device in devices:
            if needs <= set(device.capabilities):
                bindings[feature] = device.id
                break
        else:
            best = set().union(*(set(d.capabilities) for d in devices)) if devices else set()
            raise UnsatisfiedCapability(feature, needs - best or needs)

    by_id = {d.id: d for d in devices}
    dconfigs: dict[str, DConfig] = {}
    for feature, dev in sorted(bindings.items()):
        params = dict(dconfigs[dev].params) if dev in dconfigs else dict(by_id[dev].params.params)
        params.update(defaults.get(feature, {}))
        dconfigs[dev] = DConfig(params)
    return FConfig(sel, bindings, dconfigs)


@dataclass(frozen=True)
class ChangeSet:
    added: frozenset
    removed: frozenset

    def __bool__(self) -> bool:
        return bool(self.added or self.removed)

    def __len__(self) -> int:
        return len(self.added) + len(self.removed)

    def apply(self, sel: Iterable[str]) -> frozenset:
        return (frozenset(sel) - self.removed) | self.added


def diff_selections(a: Iterable[str], b: Iterable[str]) -> ChangeSet:
    a, b = frozenset(a), frozenset(b)
    return ChangeSet(added=b - a, removed=a - b)
