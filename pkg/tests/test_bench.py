import asyncio
import json
import random
import subprocess
import sys

import pytest

from cbroker.bench import oracle
from cbroker.bench.load import CSV_COLUMNS, BenchReport, LoadSession, percentiles, run_load
from cbroker.bench.sweep import SaturationSearch, find_saturation, summary_csv, sweep
from cbroker.bench.workload import (
    InfeasibleSelectivity, WorkloadProfile, dumps, gen_workload, iter_publications,
)

SMALL = dict(num_subscriptions=24, constraints_per_subscription=3, num_attributes=6,
             match_selectivity_target=0.2, num_entities=8)


def sampled_selectivity(workload, n=1500, start=10**6):
    subs = workload["subscriptions"]
    docs = list(iter_publications(workload["publication_spec"], n, start))
    hits = sum(oracle.matches(s["constraints"], oracle.leaves(d)) for s in subs for d in docs)
    return hits / (len(subs) * n)


def test_gen_is_deterministic():
    p = WorkloadProfile(**SMALL, num_policies=3, groups=["A", "B"], seed=11)
    assert dumps(gen_workload(p)) == dumps(gen_workload(WorkloadProfile(**SMALL, num_policies=3,
                                                                         groups=["A", "B"], seed=11)))
    assert dumps(gen_workload(p)) != dumps(gen_workload(WorkloadProfile(**SMALL, seed=12)))


def test_default_profile_shape_and_selectivity():
    w = gen_workload(WorkloadProfile(seed=3))
    assert len(w["subscriptions"]) == 256
    assert all(len(s["constraints"]) == 40 for s in w["subscriptions"])
    assert len({s["sub_id"] for s in w["subscriptions"]}) == 256
    # a fresh slice of the stream, never seen by the calibration step
    s = sampled_selectivity(w, n=600)
    assert abs(s / 0.05 - 1) <= 0.2, s


def test_full_selectivity_with_empty_constraints():
    w = gen_workload(WorkloadProfile(num_subscriptions=5, constraints_per_subscription=0,
                                     match_selectivity_target=1.0))
    assert all(s["constraints"] == [] for s in w["subscriptions"])
    assert sampled_selectivity(w, n=50) == 1.0


def test_infeasible_selectivity():
    with pytest.raises(InfeasibleSelectivity):
        WorkloadProfile(match_selectivity_target=0.0)
    with pytest.raises(InfeasibleSelectivity):
        gen_workload(WorkloadProfile(num_subscriptions=20, constraints_per_subscription=4,
                                     num_attributes=0, text_attributes={"c": ["r", "g", "b"]},
                                     text_constraint_fraction=1.0, match_selectivity_target=1.0))


def test_policies_and_groups():
    w = gen_workload(WorkloadProfile(**SMALL, num_policies=4, groups=["A", "B", "C"],
                                     wildcard_policy_fraction=0.0, seed=5))
    assert len(w["policies"]) == 4
    assert all(p["group"] in {"A", "B", "C"} for p in w["policies"])
    assert len({p["pub_constraints"][0]["val"] for p in w["policies"]}) == 4
    assert set(w["groups"]) == {s["auth_hash"] for s in w["subscriptions"]}


def test_percentiles():
    assert percentiles([]) == {"p50": None, "p90": None, "p99": None, "max": None}
    p = percentiles(list(range(1, 101)))
    assert p["p50"] == 50.5 and p["max"] == 100


def test_oracle_verify_detects_faults():
    trace = {
        "subscriptions": [{"sub_id": "s1", "auth_hash": "a", "matcher_id": 0,
                           "constraints": [{"key": "x", "op": "gt", "val": 1}]},
                          {"sub_id": "s2", "auth_hash": "b", "matcher_id": 1, "constraints": []}],
        "policies": [{"pub_constraints": [{"key": "id", "op": "eq", "val": "t"}], "group": "A"}],
        "groups": {"a": ["A"]},
        "publications": [{"pub_id": "p1", "doc": {"x": 2, "id": "t"}, "accepted_by": [0, 1]},
                         {"pub_id": "p2", "doc": {"x": 2}, "accepted_by": [1]}],
        "deliveries": [["s1", "p1", 0, 0], ["s2", "p2", 0, 0]],
    }
    ok = oracle.verify(trace)
    assert ok == {"expected_deliveries": 2, "observed_deliveries": 2, "missing": 0,
                  "duplicates": 0, "extra": 0}
    dropped = dict(trace, deliveries=trace["deliveries"][:1])
    assert oracle.verify(dropped)["missing"] == 1
    dup = dict(trace, deliveries=trace["deliveries"] * 2)
    assert oracle.verify(dup)["duplicates"] == 2
    extra = dict(trace, deliveries=trace["deliveries"] + [["s2", "p1", 0, 0]])
    assert oracle.verify(extra)["extra"] == 1
    unfiltered = dict(trace, permission_filtering=False, deliveries=[])
    assert oracle.verify(unfiltered)["expected_deliveries"] == 3


async def test_run_load_trace_and_fault_injection(local_cluster, tmp_path):
    w = gen_workload(WorkloadProfile(**SMALL, num_policies=4, groups=["A", "B"], seed=9))
    c = await local_cluster(2, groups=w["groups"])
    out = tmp_path / "trace.json"
    report = await run_load(w, c.lb_url, rate=40, duration=2, warmup=5, trace_out=str(out))
    assert report.correctness["missing"] == 0 and report.correctness["duplicates"] == 0
    assert report.correctness["expected_deliveries"] > 0
    assert report.matcher_stats[0]["policy_checked"] > 0
    trace = json.loads(out.read_text())
    assert oracle.verify(trace)["missing"] == 0
    # drop a handful of frames and the oracle must notice
    rng = random.Random(0)
    trace["deliveries"] = [d for d in trace["deliveries"] if rng.random() > 0.05]
    assert oracle.verify(trace)["missing"] > 0


async def test_group_b_blocked_agreement(local_cluster):
    w = gen_workload(WorkloadProfile(**dict(SMALL, match_selectivity_target=0.5), num_policies=8,
                                     groups=["A", "B"], group_membership_prob=0.5, seed=2))
    for p in w["policies"]:
        p["group"] = "A"
    c = await local_cluster(1, groups=w["groups"])
    async with LoadSession(w, c.lb_url) as session:
        report = await session.measure(50, 2)
        trace = session.trace.to_json()
    assert report.correctness["missing"] == 0 and report.correctness["extra"] == 0
    only_b = {s["sub_id"] for s in w["subscriptions"] if w["groups"][s["auth_hash"]] == ["B"]}
    assert only_b
    # every policy names one truck, and they cover all entities: B gets nothing
    assert not [d for d in trace["deliveries"] if d[0] in only_b]
    assert report.matcher_stats[0]["policy_blocked"] > 0


async def test_zero_subscriptions(local_cluster):
    w = gen_workload(WorkloadProfile(**dict(SMALL, num_subscriptions=0)))
    c = await local_cluster(1)
    report = await run_load(w, c.lb_url, rate=20, duration=1, warmup=2)
    assert report.subscriber_observed_match_rate == 0
    assert report.correctness == {"expected_deliveries": 0, "observed_deliveries": 0,
                                  "missing": 0, "duplicates": 0, "extra": 0}
    assert set(report.csv_row()) == set(CSV_COLUMNS)


async def test_rate_control(local_cluster):
    w = gen_workload(WorkloadProfile(**SMALL, seed=4))
    c = await local_cluster(1)
    report = await run_load(w, c.lb_url, rate=50, duration=20, warmup=5)
    assert abs(report.achieved_publish_rate / 50 - 1) <= 0.05, report.achieved_publish_rate
    assert report.publications_sent == 1000


class FakeSession:
    def __init__(self, capacity):
        self.capacity = capacity
        self.offered = []

    async def measure(self, rate, duration, **kw):
        self.offered.append(rate)
        return BenchReport(rate, duration, 0, 0, rate, min(rate, self.capacity), 0, {}, {})

    async def wait_idle(self):
        return True


async def test_saturation_search_plateau():
    s = FakeSession(100)
    best, report, reports = await find_saturation(s, SaturationSearch(start_rate=10, growth=2))
    assert best == 100 and report.offered_rate == 160
    # monotone offered rates, stops two steps after the plateau
    assert s.offered == [10, 20, 40, 80, 160, 320, 640]
    assert [r.offered_rate for r in reports] == s.offered


async def test_rate_sweep_against_running_cluster(local_cluster):
    c = await local_cluster(2)
    points = await sweep("rate", ["10", "20"], WorkloadProfile(**SMALL),
                         search=SaturationSearch(step_duration=1), lb_url=c.lb_url)
    assert [p.value for p in points] == [10.0, 20.0]
    assert all(p.best.correctness["missing"] == 0 for p in points)
    assert summary_csv(points).splitlines()[0] == "dimension_value,saturated_throughput,p50_ms,p99_ms"


def test_cli_gen_and_verify(tmp_path):
    prof = tmp_path / "p.json"
    prof.write_text(json.dumps(SMALL))
    out = tmp_path / "w.json"
    r = subprocess.run([sys.executable, "-m", "cbroker.bench.cli", "gen", "--profile", str(prof),
                        "--out", str(out)], capture_output=True, text=True, check=True)
    assert json.loads(r.stdout)["subscriptions"] == 24
    assert json.loads(out.read_text())["profile"]["num_subscriptions"] == 24
    trace = tmp_path / "t.json"
    trace.write_text(json.dumps({"subscriptions": [{"sub_id": "s", "auth_hash": "a", "constraints": []}],
                                 "publications": [{"pub_id": "p", "doc": {}, "accepted_by": [0]}],
                                 "deliveries": []}))
    r = subprocess.run([sys.executable, "-m", "cbroker.bench.cli", "verify", "--trace", str(trace)],
                       capture_output=True, text=True)
    assert r.returncode == 1 and json.loads(r.stdout)["missing"] == 1
