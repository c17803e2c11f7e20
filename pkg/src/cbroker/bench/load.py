"""Open-loop load generation and subscriber-side measurement.

Send instants are fixed on a grid (``t0 + i / rate``) and each publication
carries its *intended* send time, so latency includes any queueing in the
harness itself (no coordinated omission).
"""
from __future__ import annotations

import asyncio
import csv
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable

import aiohttp
import numpy as np
import psutil

from ..client import BrokerClient, SubscriptionHandle
from ..matcher import SEND_TS_HEADER
from . import oracle
from .workload import iter_publications

log = logging.getLogger(__name__)

CSV_COLUMNS = ["dimension_value", "offered_rate", "achieved_rate", "match_rate",
               "p50_ms", "p90_ms", "p99_ms", "missing", "duplicates"]


class WarmupFailed(RuntimeError):
    pass


@dataclass
class BenchReport:
    offered_rate: float
    duration_s: float
    publications_sent: int
    publications_accepted: int
    achieved_publish_rate: float
    subscriber_observed_match_rate: float
    processed_publication_rate: float
    latency_ms: dict[str, float | None]
    correctness: dict[str, int]
    matcher_stats: list[dict[str, Any]] = field(default_factory=list)
    cpu_note: str = ""
    dimension: str | None = None
    dimension_value: Any = None

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    def csv_row(self) -> dict[str, Any]:
        lat = self.latency_ms
        return {
            "dimension_value": self.dimension_value,
            "offered_rate": round(self.offered_rate, 3),
            "achieved_rate": round(self.achieved_publish_rate, 3),
            "match_rate": round(self.subscriber_observed_match_rate, 3),
            "p50_ms": lat.get("p50"),
            "p90_ms": lat.get("p90"),
            "p99_ms": lat.get("p99"),
            "missing": self.correctness.get("missing"),
            "duplicates": self.correctness.get("duplicates"),
        }


def reports_to_csv(reports: Iterable[BenchReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS)
    writer.writeheader()
    for r in reports:
        writer.writerow(r.csv_row())
    return buf.getvalue()


def percentiles(samples: list[float]) -> dict[str, float | None]:
    if not samples:
        return {"p50": None, "p90": None, "p99": None, "max": None}
    arr = np.asarray(samples, dtype=float)
    p50, p90, p99 = np.percentile(arr, [50, 90, 99])
    return {"p50": round(float(p50), 3), "p90": round(float(p90), 3),
            "p99": round(float(p99), 3), "max": round(float(arr.max()), 3)}


class Trace:
    """Append-only record of one run, in the format ``oracle.verify`` reads."""

    def __init__(self, workload: dict[str, Any], matcher_of: dict[str, int],
                 permission_filtering: bool = True):
        self.subscriptions = [dict(s, matcher_id=matcher_of.get(s["sub_id"], 0))
                              for s in workload["subscriptions"]]
        self.policies = list(workload.get("policies", []))
        self.groups = dict(workload.get("groups", {}))
        self.permission_filtering = permission_filtering
        self.publications: list[dict[str, Any]] = []
        # rows of [sub_id, pub_id, received_ms, send_ts_ms]
        self.deliveries: list[list[Any]] = []

    def to_json(self, pub_ids: set[str] | None = None) -> dict[str, Any]:
        pubs = self.publications
        dels = self.deliveries
        if pub_ids is not None:
            pubs = [p for p in pubs if p["pub_id"] in pub_ids]
            dels = [d for d in dels if d[1] in pub_ids]
        return {
            "subscriptions": self.subscriptions,
            "policies": self.policies,
            "groups": self.groups,
            "permission_filtering": self.permission_filtering,
            "publications": pubs,
            "deliveries": dels,
        }


class LoadSession:
    """Registered subscriptions with attached streams against one front end.

    Use ``setup()`` once, then any number of ``measure()`` steps; each step
    uses a fresh slice of the publication stream.
    """

    def __init__(self, workload: dict[str, Any], lb_url: str, *,
                 connection_limit: int = 128, request_timeout: float = 30.0,
                 permission_filtering: bool = True, cluster_pids: Iterable[int] = ()):
        self.workload = workload
        self.lb_url = lb_url.rstrip("/")
        self.connection_limit = connection_limit
        self.request_timeout = request_timeout
        self.permission_filtering = permission_filtering
        self.cluster_pids = list(cluster_pids)
        self.handles: dict[str, SubscriptionHandle] = {}
        self.clients: dict[str, BrokerClient] = {}
        self.trace: Trace | None = None
        self._session: aiohttp.ClientSession | None = None
        self._pub_session: aiohttp.ClientSession | None = None
        self._readers: list[asyncio.Task] = []
        self._next_index = 0
        self.publisher: BrokerClient | None = None

    async def __aenter__(self):
        await self.setup()
        return self

    async def __aexit__(self, *exc):
        await self.teardown()

    async def setup(self) -> None:
        self._session = aiohttp.ClientSession(
            connector=aiohttp.TCPConnector(limit=0),
            timeout=aiohttp.ClientTimeout(total=self.request_timeout))
        self._pub_session = aiohttp.ClientSession(
            connector=aiohttp.TCPConnector(limit=self.connection_limit),
            timeout=aiohttp.ClientTimeout(total=self.request_timeout))
        self.publisher = BrokerClient(self.lb_url, self.workload["publisher"],
                                      session=self._session)
        await self.publisher.set_permission_filtering(self.permission_filtering)
        sem = asyncio.Semaphore(32)
        matcher_of: dict[str, int] = {}

        async def register(sub):
            async with sem:
                client = BrokerClient(self.lb_url, sub["auth_hash"], session=self._session)
                handle = await client.subscribe(sub["constraints"], sub_id=sub["sub_id"])
                self.clients[sub["sub_id"]] = client
                self.handles[sub["sub_id"]] = handle
                matcher_of[sub["sub_id"]] = handle.matcher_id

        await asyncio.gather(*(register(s) for s in self.workload["subscriptions"]))
        for pol in self.workload.get("policies", []):
            await self.publisher.install_policy(pol["pub_constraints"], pol["group"],
                                                policy_id=pol["policy_id"])
        self.trace = Trace(self.workload, matcher_of, self.permission_filtering)
        for handle in self.handles.values():
            self._readers.append(asyncio.create_task(self._consume(handle)))

    async def _consume(self, handle: SubscriptionHandle) -> None:
        rows = self.trace.deliveries
        async for env in handle:
            rows.append([env.sub_id, env.pub_id, env.received_ms, env.send_ts_ms])

    async def teardown(self) -> None:
        for handle in self.handles.values():
            try:
                await handle.close(unsubscribe=True)
            except Exception as exc:
                log.debug("closing %s: %s", handle.sub_id, exc)
        for task in self._readers:
            task.cancel()
        if self.publisher is not None:
            for pol in self.workload.get("policies", []):
                try:
                    await self.publisher.remove_policy(pol["policy_id"])
                except Exception as exc:
                    log.debug("removing policy: %s", exc)
        for s in (self._session, self._pub_session):
            if s is not None:
                await s.close()

    async def _publish_one(self, index: int, doc: dict, send_ts_ms: int) -> dict[str, Any]:
        body = json.dumps(doc)
        headers = {"Content-Type": "application/json", SEND_TS_HEADER: str(send_ts_ms)}
        record: dict[str, Any] = {"index": index, "doc": doc, "send_ts_ms": send_ts_ms,
                                  "pub_id": None, "status": None, "accepted_by": []}
        try:
            async with self._pub_session.post(self.lb_url + "/publications", data=body,
                                               headers=headers) as resp:
                payload = await resp.json(content_type=None)
                record["status"] = resp.status
        except (aiohttp.ClientError, asyncio.TimeoutError, ValueError) as exc:
            record["status"] = f"error: {exc.__class__.__name__}"
            return record
        if isinstance(payload, dict):
            record["pub_id"] = payload.get("pub_id")
            record["accepted_by"] = [m["matcher_id"] for m in payload.get("multicast", [])
                                     if m["status"] == "ok"]
        record["done_ms"] = time.time() * 1000
        return record

    async def publish_sequential(self, count: int) -> list[dict[str, Any]]:
        spec = self.workload["publication_spec"]
        out = []
        for doc in iter_publications(spec, count, self._next_index):
            rec = await self._publish_one(self._next_index, doc, int(time.time() * 1000))
            self._next_index += 1
            out.append(rec)
            if rec["pub_id"]:
                self.trace.publications.append(rec)
        return out

    async def warmup(self, count: int = 20, max_reject: float = 0.01, settle: float = 5.0) -> None:
        records = await self.publish_sequential(count)
        rejected = sum(r["status"] != 202 for r in records)
        if rejected > max_reject * count:
            raise WarmupFailed(f"{rejected}/{count} warm-up publications rejected")
        ids = {r["pub_id"] for r in records}
        await self.wait_for_deliveries(ids, settle, self.expected_for(ids))

    def expected_for(self, pub_ids: set[str]) -> set[tuple[str, str]]:
        return oracle.expected_deliveries(self.trace.to_json(pub_ids))

    async def wait_for_deliveries(self, pub_ids: set[str], timeout: float,
                                  expected: set[tuple[str, str]] | None = None,
                                  quiet: float = 1.0) -> None:
        """Block until every expected delivery arrived, or ``timeout`` passed.

        Without an expected set, return once no delivery arrived for ``quiet``
        seconds.
        """
        deadline = time.monotonic() + timeout
        seen = 0
        got: set[tuple[str, str]] = set()
        last_change = time.monotonic()
        while time.monotonic() < deadline:
            rows = self.trace.deliveries
            if len(rows) != seen:
                got.update((d[0], d[1]) for d in rows[seen:] if d[1] in pub_ids)
                seen = len(rows)
                last_change = time.monotonic()
            if expected is not None:
                if expected <= got:
                    return
            elif time.monotonic() - last_change > quiet:
                return
            await asyncio.sleep(0.05)

    async def matcher_stats(self) -> list[dict[str, Any]]:
        try:
            return (await self.publisher.stats())["matchers"]
        except Exception as exc:
            return [{"error": str(exc)}]

    async def wait_idle(self, timeout: float = 60.0) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            stats = await self.matcher_stats()
            if all(s.get("queue_depth", 0) == 0 for s in stats):
                return True
            await asyncio.sleep(0.2)
        return False

    def _cpu_times(self) -> dict[int, float]:
        out = {}
        for pid in [os.getpid(), *self.cluster_pids]:
            try:
                t = psutil.Process(pid).cpu_times()
                out[pid] = t.user + t.system
            except psutil.Error:
                pass
        return out

    async def measure(self, rate: float, duration: float, *, drain_timeout: float | None = None,
                      verify: bool = True) -> BenchReport:
        if rate <= 0 or duration <= 0:
            raise ValueError("rate and duration must be positive")
        spec = self.workload["publication_spec"]
        total = max(1, int(round(rate * duration)))
        start_index = self._next_index
        self._next_index += total
        docs = list(iter_publications(spec, total, start_index))
        loop = asyncio.get_running_loop()
        cpu0 = self._cpu_times()

        lead = 0.05
        t0 = loop.time() + lead
        wall0 = time.time() + lead
        tasks = []
        for i, doc in enumerate(docs):
            delay = t0 + i / rate - loop.time()
            if delay > 0:
                await asyncio.sleep(delay)
            intended_ms = int((wall0 + i / rate) * 1000)
            tasks.append(asyncio.create_task(self._publish_one(start_index + i, doc, intended_ms)))
        records = await asyncio.gather(*tasks)

        accepted = [r for r in records if r["pub_id"] and r["accepted_by"]]
        self.trace.publications.extend(accepted)
        pub_ids = {r["pub_id"] for r in accepted}
        window_end_ms = (wall0 + duration) * 1000
        if drain_timeout is None:
            drain_timeout = max(5.0, duration)
        expected = self.expected_for(pub_ids) if verify else None
        await self.wait_for_deliveries(pub_ids, drain_timeout, expected)

        mine = [d for d in self.trace.deliveries if d[1] in pub_ids]
        in_window = [d for d in mine if d[2] <= window_end_ms]
        full = [r for r in accepted if r["status"] == 202]
        last_done = max((r.get("done_ms", 0) for r in accepted), default=wall0 * 1000)
        elapsed = max(duration, (last_done / 1000) - wall0)
        processed = len({d[1] for d in in_window})
        latencies = [d[2] - d[3] for d in mine if d[3] is not None]

        correctness: dict[str, int] = {}
        if expected is not None:
            correctness = oracle.compare(expected, mine)
        cpu1 = self._cpu_times()
        cpu_note = "cpu seconds during step: " + ", ".join(
            f"pid {pid}: {cpu1[pid] - cpu0.get(pid, 0):.2f}" for pid in cpu1)
        return BenchReport(
            offered_rate=rate,
            duration_s=duration,
            publications_sent=len(records),
            publications_accepted=len(full),
            achieved_publish_rate=len(full) / elapsed,
            subscriber_observed_match_rate=len(in_window) / duration,
            processed_publication_rate=processed / duration,
            latency_ms=percentiles(latencies),
            correctness=correctness,
            matcher_stats=await self.matcher_stats(),
            cpu_note=cpu_note,
        )


async def run_load(workload: dict[str, Any], lb_url: str, rate: float, duration: float, *,
                   warmup: int = 20, permission_filtering: bool = True,
                   cluster_pids: Iterable[int] = (), trace_out: str | None = None) -> BenchReport:
    async with LoadSession(workload, lb_url, permission_filtering=permission_filtering,
                           cluster_pids=cluster_pids) as session:
        if warmup:
            await session.warmup(warmup)
        report = await session.measure(rate, duration)
        if trace_out:
            with open(trace_out, "w") as fh:
                json.dump(session.trace.to_json(), fh)
        return report
