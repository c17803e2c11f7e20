"""Brute-force reference evaluator used to check recorded traces.

Deliberately shares no code with ``cbroker.matching``: constraints stay in
their wire form (plain dicts) and values are classified by explicit kind
tags, so a bug in the service's fast path cannot hide here.
"""
from __future__ import annotations

from collections import Counter
from typing import Any, Iterable, Mapping


_ORDERINGS = {
    "gt": lambda a, b: a > b,
    "ge": lambda a, b: a >= b,
    "lt": lambda a, b: a < b,
    "le": lambda a, b: a <= b,
}


def kind_of(value: Any) -> str:
    if value is None:
        return "null"
    if value is True or value is False:
        return "bool"
    if isinstance(value, (int, float)):
        return "num"
    if isinstance(value, str):
        return "text"
    return "other"


def leaves(doc: Mapping[str, Any]) -> dict[str, Any]:
    """Dotted-path view of a nested document (iterative, explicit stack)."""
    result: dict[str, Any] = {}
    stack: list[tuple[list[str], Any]] = [([k], v) for k, v in reversed(list(doc.items()))]
    while stack:
        path, node = stack.pop()
        if isinstance(node, dict):
            children = [(path + [str(k)], v) for k, v in node.items()]
        elif isinstance(node, list):
            children = [(path + [str(i)], v) for i, v in enumerate(node)]
        else:
            result[".".join(path)] = node
            continue
        stack.extend(reversed(children))
    return result


def holds(constraint: Mapping[str, Any], flat: Mapping[str, Any]) -> bool:
    key, op, want = constraint["key"], constraint["op"], constraint["val"]
    if key not in flat:
        return False
    have = flat[key]
    same_kind = kind_of(have) == kind_of(want)
    if op == "eq":
        return same_kind and have == want
    if op == "ne":
        return not (same_kind and have == want)
    if not (kind_of(have) == "num" and kind_of(want) == "num"):
        return False
    return _ORDERINGS[op](have, want)


def matches(constraints: Iterable[Mapping[str, Any]], flat: Mapping[str, Any]) -> bool:
    return all(holds(c, flat) for c in constraints)


def allowed(policies: Iterable[Mapping[str, Any]], flat: Mapping[str, Any],
            groups: Iterable[str]) -> bool:
    groups = set(groups)
    applicable = [p for p in policies if matches(p["pub_constraints"], flat)]
    if not applicable:
        return True
    return any(p["group"] == "*" or p["group"] in groups for p in applicable)


def expected_deliveries(trace: Mapping[str, Any]) -> set[tuple[str, str]]:
    """(sub_id, pub_id) pairs a correct cluster must deliver."""
    subs = trace["subscriptions"]
    policies = trace.get("policies", [])
    groups = trace.get("groups", {})
    filtering = trace.get("permission_filtering", True)
    out = set()
    for pub in trace["publications"]:
        accepted = set(pub.get("accepted_by", []))
        if not accepted:
            continue
        flat = leaves(pub["doc"])
        for sub in subs:
            if sub.get("matcher_id", 0) not in accepted:
                continue
            if not matches(sub["constraints"], flat):
                continue
            if filtering and not allowed(policies, flat, groups.get(sub["auth_hash"], [])):
                continue
            out.add((sub["sub_id"], pub["pub_id"]))
    return out


def verify(trace: Mapping[str, Any]) -> dict[str, int]:
    return compare(expected_deliveries(trace), trace.get("deliveries", []))


def compare(expected: set[tuple[str, str]], deliveries: Iterable) -> dict[str, int]:
    observed = Counter((d[0], d[1]) for d in deliveries)
    return {
        "expected_deliveries": len(expected),
        "observed_deliveries": sum(observed.values()),
        "missing": len(expected - observed.keys()),
        "duplicates": sum(n - 1 for n in observed.values() if n > 1),
        "extra": len(observed.keys() - expected),
    }
