"""Validation kernel server: rulesets, full-report evaluation, sanitizing.

Every rule in a set is evaluated (no short-circuit) so the report lists
each violation as (field, rule, message). Predicate and pattern names
resolve at ruleset registration, not at validate time.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..errors import InvalidDescriptor, UnknownRuleSet


@dataclass(frozen=True)
class Failure:
    field: str
    rule: str
    message: str

    def to_json(self) -> dict:
        return {"field": self.field, "rule": self.rule, "message": self.message}


@dataclass(frozen=True)
class Rule:
    kind: str  # Required | Type | Format | Length | CrossField | Custom
    field: str
    type_kind: Optional[str] = None
    pattern: Optional[str] = None
    min_len: Optional[int] = None
    max_len: Optional[int] = None
    other_field: Optional[str] = None
    predicate: Optional[str] = None


def required(field_name: str) -> Rule:
    return Rule("Required", field_name)


def typed(field_name: str, kind: str) -> Rule:
    return Rule("Type", field_name, type_kind=kind)


def formatted(field_name: str, pattern: str) -> Rule:
    return Rule("Format", field_name, pattern=pattern)


def length(field_name: str, min_len: int, max_len: int) -> Rule:
    return Rule("Length", field_name, min_len=min_len, max_len=max_len)


def cross_field(field_name: str, predicate: str, other_field: str) -> Rule:
    return Rule("CrossField", field_name, predicate=predicate, other_field=other_field)


def custom(field_name: str, predicate: str) -> Rule:
    return Rule("Custom", field_name, predicate=predicate)


@dataclass
class RuleSet:
    name: str
    fields: tuple[str, ...]
    rules: tuple[Rule, ...]


TYPE_CHECKS = {
    "string": lambda v: isinstance(v, str),
    "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "bool": lambda v: isinstance(v, bool),
    "list": lambda v: isinstance(v, list),
    "map": lambda v: isinstance(v, dict),
}

BUILTIN_PATTERNS = {
    "email": r"^[^@\s]+@[^@\s]+\.[^@\s]+$",
    "date": r"^\d{4}-\d{2}-\d{2}$",
    "version": r"^\d+\.\d+(\.\d+)?$",
    "identifier": r"^[A-Za-z_][A-Za-z0-9_]*$",
}

BUILTIN_PREDICATES: dict[str, Callable] = {
    "gt": lambda a, b: a > b,
    "gte": lambda a, b: a >= b,
    "lt": lambda a, b: a < b,
    "lte": lambda a, b: a <= b,
    "eq": lambda a, b: a == b,
    "ne": lambda a, b: a != b,
    "non_empty": lambda a, b=None: bool(a),
}

_CONTROL = re.compile(r"[\x00-\x08\x0b-\x1f\x7f]")
# '&' not already starting one of the entities sanitize itself produces
_AMP = re.compile(r"&(?!(?:amp|lt|gt|quot|#39);)")


def sanitize(value: str) -> str:
    """HTML-escape & < > \" ' and strip control chars except tab/newline.

    Escaping skips already-escaped entities, which makes it idempotent.
    """
    value = _CONTROL.sub("", value)
    value = _AMP.sub("&amp;", value)
    return (value.replace("<", "&lt;").replace(">", "&gt;")
                 .replace('"', "&quot;").replace("'", "&#39;"))


class ValidationServer:
    def __init__(self):
        self._rulesets: dict[str, RuleSet] = {}
        self._predicates = dict(BUILTIN_PREDICATES)
        self._patterns = {name: re.compile(p) for name, p in BUILTIN_PATTERNS.items()}
        self._lock = threading.Lock()

    def register_predicate(self, name: str, fn: Callable) -> None:
        with self._lock:
            self._predicates[name] = fn

    def register_pattern(self, name: str, pattern: str) -> None:
        with self._lock:
            self._patterns[name] = re.compile(pattern)

    def register_ruleset(self, ruleset: RuleSet) -> None:
        declared = set(ruleset.fields)
        with self._lock:
            for rule in ruleset.rules:
                if rule.field not in declared:
                    raise InvalidDescriptor(
                        f"rule references undeclared field {rule.field!r}")
                if rule.other_field is not None and rule.other_field not in declared:
                    raise InvalidDescriptor(
                        f"rule references undeclared field {rule.other_field!r}")
                if rule.kind == "Format" and rule.pattern not in self._patterns:
                    raise InvalidDescriptor(f"unknown pattern {rule.pattern!r}")
                if rule.kind in ("CrossField", "Custom") \
                        and rule.predicate not in self._predicates:
                    raise InvalidDescriptor(f"unknown predicate {rule.predicate!r}")
                if rule.kind == "Type" and rule.type_kind not in TYPE_CHECKS:
                    raise InvalidDescriptor(f"unknown type kind {rule.type_kind!r}")
            self._rulesets[ruleset.name] = ruleset

    def validate(self, record: dict, ruleset_name: str) -> list[Failure]:
        with self._lock:
            ruleset = self._rulesets.get(ruleset_name)
            if ruleset is None:
                raise UnknownRuleSet(f"no ruleset {ruleset_name!r}")
        failures = []
        for rule in ruleset.rules:
            failure = self._apply(rule, record)
            if failure is not None:
                failures.append(failure)
        return failures

    def _apply(self, rule: Rule, record: dict) -> Optional[Failure]:
        value = record.get(rule.field)
        present = rule.field in record and value is not None and value != ""
        if rule.kind == "Required":
            if not present:
                return Failure(rule.field, "Required", f"{rule.field} is required")
            return None
        if not present:
            return None  # only Required complains about absence
        if rule.kind == "Type":
            if not TYPE_CHECKS[rule.type_kind](value):
                return Failure(rule.field, "Type",
                               f"{rule.field} must be of type {rule.type_kind}")
        elif rule.kind == "Format":
            if not isinstance(value, str) or not self._patterns[rule.pattern].match(value):
                return Failure(rule.field, "Format",
                               f"{rule.field} does not match format {rule.pattern}")
        elif rule.kind == "Length":
            try:
                n = len(value)
            except TypeError:
                return Failure(rule.field, "Length", f"{rule.field} has no length")
            if not rule.min_len <= n <= rule.max_len:
                return Failure(rule.field, "Length",
                               f"{rule.field} length {n} outside "
                               f"[{rule.min_len}, {rule.max_len}]")
        elif rule.kind == "CrossField":
            other = record.get(rule.other_field)
            if other is None or other == "":
                return None  # nothing to compare against
            try:
                ok = self._predicates[rule.predicate](value, other)
            except TypeError:
                ok = False
            if not ok:
                return Failure(rule.field, "CrossField",
                               f"{rule.field} must be {rule.predicate} "
                               f"{rule.other_field}")
        elif rule.kind == "Custom":
            try:
                ok = self._predicates[rule.predicate](value)
            except TypeError:
                ok = self._predicates[rule.predicate](value, None)
            if not ok:
                return Failure(rule.field, "Custom",
                               f"{rule.field} fails predicate {rule.predicate}")
        return None

    def isc_ops(self) -> dict:
        def _validate(args):
            failures = self.validate(args["record"], args["ruleset"])
            return {"valid": not failures,
                    "failures": [f.to_json() for f in failures]}

        return {
            "validate": _validate,
            "sanitize": lambda args: {"value": sanitize(args["value"])},
        }
