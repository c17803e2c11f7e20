"""Publication flattening, constraint evaluation and partition hashing.

Everything here is pure and side-effect free: the matcher service, the
load balancer and the tests all share these routines.

Attribute values are normalised to exactly four Python types after
flattening: ``str``, ``float``, ``bool`` and ``None``. JSON integers become
floats, so ``50`` and ``50.0`` compare equal.
"""
from __future__ import annotations

import enum
import json
import math
import re
import secrets
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

__all__ = [
    "Op", "Constraint", "Subscription", "SubscriptionPolicy", "FlatPublication",
    "MatchingError", "NotAnObject", "NaNValue", "KeyCollision", "MalformedConstraint",
    "flatten", "parse_json_object", "eval_constraint", "match_subscription",
    "compile_constraints", "permission_check", "canonicalize", "fnv1a_64",
    "partition_of", "parse_constraints", "constraints_to_json", "new_id",
    "is_hex_id", "is_auth_hash", "WILDCARD_GROUP",
]

WILDCARD_GROUP = "*"

FNV64_OFFSET = 14695981039346656037
FNV64_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1

_HEX32 = re.compile(r"[0-9a-f]{32}")
_HEX64 = re.compile(r"[0-9a-f]{64}")


class MatchingError(ValueError):
    """Base class for rejected publications and constraints."""


class NotAnObject(MatchingError):
    pass


class NaNValue(MatchingError):
    pass


class KeyCollision(MatchingError):
    pass


class MalformedConstraint(MatchingError):
    pass


class Op(str, enum.Enum):
    # values are the wire names
    EQ = "eq"
    NE = "ne"
    GT = "gt"
    GE = "ge"
    LT = "lt"
    LE = "le"

    @property
    def ordering(self) -> bool:
        return self in _ORDERING


_ORDERING = frozenset({Op.GT, Op.GE, Op.LT, Op.LE})


def _normalise(value: Any) -> Any:
    """Map a JSON scalar onto the four attribute kinds."""
    if value is None or isinstance(value, (bool, str)):
        return value
    if isinstance(value, (int, float)):
        try:
            x = float(value)
        except OverflowError:
            raise NaNValue(f"number out of range: {value!r}") from None
        if not math.isfinite(x):
            raise NaNValue(f"non-finite number: {value!r}")
        return x
    raise TypeError(f"not a primitive JSON value: {type(value).__name__}")


def _kind(value: Any) -> type:
    return type(value)


@dataclass(frozen=True, slots=True)
class Constraint:
    key: str
    op: Op
    val: Any

    def __post_init__(self):
        if not isinstance(self.key, str) or not self.key:
            raise MalformedConstraint("constraint key must be a non-empty string")
        try:
            op = Op(self.op)
        except ValueError:
            raise MalformedConstraint(f"unknown operator {self.op!r}") from None
        try:
            val = _normalise(self.val)
        except TypeError as exc:
            raise MalformedConstraint(str(exc)) from None
        if op.ordering and type(val) is not float:
            raise MalformedConstraint(f"operator {op.value} needs a numeric value")
        object.__setattr__(self, "op", op)
        object.__setattr__(self, "val", val)

    def to_json(self) -> dict:
        return {"key": self.key, "op": self.op.value, "val": self.val}


@dataclass(frozen=True, slots=True)
class Subscription:
    auth_hash: str
    sub_id: str
    constraints: tuple[Constraint, ...] = ()


@dataclass(frozen=True, slots=True)
class SubscriptionPolicy:
    policy_id: str
    owner: str
    pub_constraints: tuple[Constraint, ...]
    group: str = WILDCARD_GROUP


@dataclass(frozen=True, slots=True)
class FlatPublication:
    attrs: Mapping[str, Any]
    pub_id: str = field(default_factory=lambda: new_id())
    ingress_ts: int = field(default_factory=time.monotonic_ns)


def new_id() -> str:
    """Random 128-bit identifier as 32 lowercase hex chars."""
    return secrets.token_hex(16)


def is_hex_id(value: Any) -> bool:
    return isinstance(value, str) and _HEX32.fullmatch(value) is not None


def is_auth_hash(value: Any) -> bool:
    return isinstance(value, str) and _HEX64.fullmatch(value) is not None


def _reject_constant(name: str):
    raise NaNValue(f"non-finite number: {name}")


def _finite_float(text: str) -> float:
    x = float(text)
    if not math.isfinite(x):
        raise NaNValue(f"number out of range: {text}")
    return x


def parse_json_object(text: str | bytes) -> dict:
    """Decode a JSON document that must be an object without NaN/Infinity."""
    try:
        doc = json.loads(text, parse_constant=_reject_constant, parse_float=_finite_float)
    except NaNValue:
        raise
    except (ValueError, UnicodeDecodeError) as exc:
        raise NotAnObject(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise NotAnObject(f"expected a JSON object, got {type(doc).__name__}")
    return doc


def flatten(raw: Mapping[str, Any]) -> dict[str, Any]:
    """Flatten nested objects/arrays into dotted-path keys.

    Array elements use their index as a path segment. Empty containers
    contribute no keys. A flattened path that coincides with a literal key
    raises :class:`KeyCollision`.
    """
    if not isinstance(raw, Mapping):
        raise NotAnObject(f"expected a JSON object, got {type(raw).__name__}")
    out: dict[str, Any] = {}

    def walk(prefix: str, node: Any) -> None:
        if isinstance(node, Mapping):
            items: Iterable = node.items()
        elif isinstance(node, (list, tuple)):
            items = enumerate(node)
        else:
            if prefix in out:
                raise KeyCollision(f"flattened key {prefix!r} collides")
            try:
                out[prefix] = _normalise(node)
            except TypeError as exc:
                raise NotAnObject(str(exc)) from None
            return
        for k, v in items:
            walk(f"{prefix}.{k}" if prefix else str(k), v)

    for key, value in raw.items():
        if not isinstance(key, str) or not key:
            raise NotAnObject("publication keys must be non-empty strings")
        walk(key, value)
    return out


def eval_constraint(c: Constraint, attrs: Mapping[str, Any]) -> bool:
    """Total evaluation: a missing key or a kind mismatch never matches,
    except that NE across kinds holds when the key is present."""
    try:
        v = attrs[c.key]
    except KeyError:
        return False
    op = c.op
    if op is Op.EQ:
        return _kind(v) is _kind(c.val) and v == c.val
    if op is Op.NE:
        return _kind(v) is not _kind(c.val) or v != c.val
    if type(v) is not float:
        return False
    if op is Op.GT:
        return v > c.val
    if op is Op.GE:
        return v >= c.val
    if op is Op.LT:
        return v < c.val
    return v <= c.val


def match_subscription(constraints: Iterable[Constraint], attrs: Mapping[str, Any]) -> bool:
    for c in constraints:
        if not eval_constraint(c, attrs):
            return False
    return True


def _compile_one(c: Constraint) -> Callable[[Mapping[str, Any]], bool]:
    k, x, op = c.key, c.val, c.op
    t = type(x)
    if op is Op.GT:
        def f(a):
            v = a.get(k)
            return type(v) is float and v > x
    elif op is Op.GE:
        def f(a):
            v = a.get(k)
            return type(v) is float and v >= x
    elif op is Op.LT:
        def f(a):
            v = a.get(k)
            return type(v) is float and v < x
    elif op is Op.LE:
        def f(a):
            v = a.get(k)
            return type(v) is float and v <= x
    elif op is Op.EQ:
        if x is None:
            def f(a):
                return k in a and a[k] is None
        else:
            def f(a):
                v = a.get(k)
                return type(v) is t and v == x
    else:
        if x is None:
            def f(a):
                return k in a and a[k] is not None
        else:
            def f(a):
                if k not in a:
                    return False
                v = a[k]
                return type(v) is not t or v != x
    return f


def compile_constraints(constraints: Sequence[Constraint]) -> Callable[[Mapping[str, Any]], bool]:
    """Build a fast predicate equivalent to ``match_subscription``."""
    preds = tuple(_compile_one(c) for c in constraints)
    if not preds:
        return lambda a: True
    if len(preds) == 1:
        return preds[0]

    def match(a):
        for p in preds:
            if not p(a):
                return False
        return True
    return match


def permission_check(
    policies: Iterable[SubscriptionPolicy],
    attrs: Mapping[str, Any],
    subscriber_groups: Iterable[str] | frozenset,
) -> bool:
    """Second filter stage. Policies whose publication constraints match
    restrict delivery to their group; any one granting policy suffices."""
    restricted = False
    for pol in policies:
        if match_subscription(pol.pub_constraints, attrs):
            if pol.group == WILDCARD_GROUP or pol.group in subscriber_groups:
                return True
            restricted = True
    return not restricted


def _render(value: Any) -> str:
    if value is None:
        return "null"
    if value is True:
        return "true"
    if value is False:
        return "false"
    if type(value) is float:
        return repr(value)
    return value


def canonicalize(constraints: Iterable[Constraint]) -> bytes:
    rows = sorted((c.key, c.op.value, _render(c.val)) for c in constraints)
    return b"".join(f"{k}\x1f{o}\x1f{v}\x1e".encode("utf-8") for k, o, v in rows)


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV64_PRIME) & _MASK64
    return h


def partition_of(constraints: Iterable[Constraint], n: int) -> int:
    if n < 1:
        raise ValueError("partition count must be >= 1")
    return fnv1a_64(canonicalize(constraints)) % n


def parse_constraints(doc: Any) -> tuple[Constraint, ...]:
    """Validate the wire form ``[{"key":..,"op":..,"val":..}, ...]``."""
    if not isinstance(doc, list):
        raise MalformedConstraint("constraints must be a list")
    out = []
    for item in doc:
        if not isinstance(item, dict) or set(item) != {"key", "op", "val"}:
            raise MalformedConstraint(f"bad constraint entry: {item!r}")
        out.append(Constraint(item["key"], item["op"], item["val"]))
    return tuple(out)


def constraints_to_json(constraints: Iterable[Constraint]) -> list[dict]:
    return [c.to_json() for c in constraints]
