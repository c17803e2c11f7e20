"""Seeded workload generation: subscriptions, policies, groups, publications.

Subscriptions are conjunctions of one-sided numeric thresholds (and
optionally eq/ne tests on categorical attributes). Each numeric threshold
passes a uniformly drawn attribute value with probability ``q``; ``q`` is
tuned by bisection on a sampled estimate until the fraction of matching
(publication, subscription) pairs is close to the requested selectivity.
"""
from __future__ import annotations

import hashlib
import json
import random
from dataclasses import asdict, dataclass, field
from typing import Any, Iterator

from ..matching import Constraint, compile_constraints, flatten

SELECTIVITY_TOLERANCE = 0.2
# calibration aims tighter than the contract to absorb sampling noise
_CALIBRATION_TOLERANCE = 0.1


class InfeasibleSelectivity(ValueError):
    pass


@dataclass
class WorkloadProfile:
    num_subscriptions: int = 256
    constraints_per_subscription: int = 40
    # draw each subscription's constraint count uniformly from [1, max]
    vary_constraints: bool = False
    num_attributes: int = 40
    value_range: tuple[float, float] = (0.0, 1000.0)
    text_attributes: dict[str, list[str]] = field(default_factory=dict)
    text_constraint_fraction: float = 0.0
    match_selectivity_target: float = 0.05
    num_policies: int = 0
    groups: list[str] = field(default_factory=list)
    group_membership_prob: float = 0.5
    wildcard_policy_fraction: float = 0.0
    num_entities: int = 16
    publication_rate: float = 50.0
    duration: float = 20.0
    seed: int = 0

    def __post_init__(self):
        self.value_range = tuple(self.value_range)
        if self.num_subscriptions < 0 or self.constraints_per_subscription < 0:
            raise ValueError("counts must be non-negative")
        if not 0 < self.match_selectivity_target <= 1:
            raise InfeasibleSelectivity("selectivity target must lie in (0, 1]")
        if self.constraints_per_subscription and self.num_attributes < 1 \
                and not self.text_attributes:
            raise ValueError("no attributes to constrain")
        if self.num_policies and self.num_policies > self.num_entities:
            raise ValueError("num_policies cannot exceed num_entities")

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "WorkloadProfile":
        return cls(**doc)

    def attribute_names(self) -> list[str]:
        width = max(2, len(str(self.num_attributes - 1)))
        return [f"attr{i:0{width}d}" for i in range(self.num_attributes)]


def identity(seed: int, label: str) -> str:
    """Deterministic stand-in for a certificate-derived auth hash."""
    return hashlib.sha256(f"bench:{seed}:{label}".encode()).hexdigest()


@dataclass
class _Skeleton:
    # structural choices fixed before calibration; only thresholds depend on q
    numeric: list[tuple[str, str, float]]   # (attr, op, jitter in [0,1))
    textual: list[tuple[str, str, str]]     # (attr, op, value)


def _skeletons(profile: WorkloadProfile, rng: random.Random) -> list[_Skeleton]:
    names = profile.attribute_names()
    text_names = sorted(profile.text_attributes)
    out = []
    for _ in range(profile.num_subscriptions):
        c = profile.constraints_per_subscription
        if profile.vary_constraints and c > 1:
            c = rng.randint(1, c)
        numeric, textual = [], []
        n_text = 0
        if text_names:
            n_text = sum(rng.random() < profile.text_constraint_fraction for _ in range(c))
        if not names:
            n_text = c
        n_num = c - n_text
        attrs = rng.sample(names, n_num) if n_num <= len(names) else \
            [rng.choice(names) for _ in range(n_num)]
        for a in attrs:
            numeric.append((a, rng.choice(("gt", "ge", "lt", "le")), rng.random()))
        for _ in range(n_text):
            a = rng.choice(text_names)
            textual.append((a, rng.choice(("eq", "ne")), rng.choice(profile.text_attributes[a])))
        out.append(_Skeleton(numeric, textual))
    return out


def _constraints(skel: _Skeleton, q: float, lo: float, hi: float) -> list[Constraint]:
    span = hi - lo
    out = []
    for attr, op, jitter in skel.numeric:
        # upper-tail ops pass when value > lo + (1-q)span; lower-tail when value < lo + q*span
        width = 0.001 * span * (jitter - 0.5)
        if op in ("gt", "ge"):
            val = lo + (1.0 - q) * span + width
        else:
            val = lo + q * span + width
        out.append(Constraint(attr, op, round(min(max(val, lo), hi), 6)))
    for attr, op, value in skel.textual:
        out.append(Constraint(attr, op, value))
    return out


def publication(spec: dict[str, Any], index: int) -> dict[str, Any]:
    """The ``index``-th publication of a stream; pure function of the spec."""
    rng = random.Random(f"{spec['seed']}:pub:{index}")
    lo, hi = spec["value_range"]
    doc: dict[str, Any] = {"id": f"truck-{rng.randrange(spec['num_entities']):03d}", "seq": index}
    for name in spec["attributes"]:
        doc[name] = round(rng.uniform(lo, hi), 3)
    for name, values in sorted(spec["text_attributes"].items()):
        doc[name] = rng.choice(values)
    return doc


def iter_publications(spec: dict[str, Any], count: int, start: int = 0) -> Iterator[dict[str, Any]]:
    for i in range(start, start + count):
        yield publication(spec, i)


def _sampled_selectivity(constraint_sets: list[list[Constraint]], docs: list[dict]) -> float:
    if not constraint_sets or not docs:
        return 1.0
    preds = [compile_constraints(cs) for cs in constraint_sets]
    flats = [flatten(d) for d in docs]
    hits = sum(p(f) for p in preds for f in flats)
    return hits / (len(preds) * len(flats))


def gen_workload(profile: WorkloadProfile) -> dict[str, Any]:
    rng = random.Random(profile.seed)
    lo, hi = profile.value_range
    skeletons = _skeletons(profile, rng)
    pub_spec = {
        "seed": profile.seed,
        "attributes": profile.attribute_names(),
        "value_range": [lo, hi],
        "text_attributes": {k: list(v) for k, v in sorted(profile.text_attributes.items())},
        "num_entities": profile.num_entities,
    }
    target = profile.match_selectivity_target

    expected_pairs = 1500
    n_sample = min(4000, max(200, int(expected_pairs / (target * max(1, len(skeletons))))))
    # calibration samples come from a disjoint index range of the same stream family
    sample_spec = dict(pub_spec, seed=f"{profile.seed}:calibration")
    sample_docs = list(iter_publications(sample_spec, n_sample))

    def achieved(q: float) -> float:
        return _sampled_selectivity([_constraints(s, q, lo, hi) for s in skeletons], sample_docs)

    def close_enough(s: float, tol: float) -> bool:
        return abs(s / target - 1.0) <= tol

    q = 1.0
    s = achieved(q)
    if not skeletons:
        # nothing to calibrate; selectivity is undefined without subscribers
        s = None
    elif s < target and not close_enough(s, _CALIBRATION_TOLERANCE):
        if not close_enough(s, SELECTIVITY_TOLERANCE):
            raise InfeasibleSelectivity(
                f"selectivity {target} unreachable: at most {s:.4f} with this attribute universe")
    elif not close_enough(s, _CALIBRATION_TOLERANCE):
        q_lo, q_hi = 0.0, 1.0
        best = (abs(s / target - 1.0), q, s)
        for _ in range(40):
            q = (q_lo + q_hi) / 2
            s = achieved(q)
            best = min(best, (abs(s / target - 1.0), q, s))
            if close_enough(s, _CALIBRATION_TOLERANCE):
                break
            if s > target:
                q_hi = q
            else:
                q_lo = q
        _, q, s = best
        if not close_enough(s, SELECTIVITY_TOLERANCE):
            raise InfeasibleSelectivity(
                f"could not calibrate selectivity {target}; closest {s:.4f}")

    subscriptions = []
    for i, skel in enumerate(skeletons):
        subscriptions.append({
            "auth_hash": identity(profile.seed, f"sub:{i}"),
            "sub_id": "%032x" % rng.getrandbits(128),
            "constraints": [c.to_json() for c in _constraints(skel, q, lo, hi)],
        })

    groups: dict[str, list[str]] = {}
    if profile.groups:
        for sub in subscriptions:
            mine = [g for g in profile.groups if rng.random() < profile.group_membership_prob]
            groups[sub["auth_hash"]] = mine

    publisher = identity(profile.seed, "publisher")
    entities = rng.sample(range(profile.num_entities), profile.num_policies)
    policies = []
    for k in entities:
        if not profile.groups or rng.random() < profile.wildcard_policy_fraction:
            group = "*"
        else:
            group = rng.choice(profile.groups)
        policies.append({
            "policy_id": "%032x" % rng.getrandbits(128),
            "owner": publisher,
            "pub_constraints": [{"key": "id", "op": "eq", "val": f"truck-{k:03d}"}],
            "group": group,
        })

    return {
        "profile": asdict(profile),
        "calibration": {"threshold_pass_probability": q, "sampled_selectivity": s,
                        "sample_publications": n_sample},
        "subscriptions": subscriptions,
        "groups": groups,
        "publisher": publisher,
        "policies": policies,
        "publication_spec": pub_spec,
    }


def dumps(workload: dict[str, Any]) -> str:
    return json.dumps(workload, sort_keys=True, indent=1)
