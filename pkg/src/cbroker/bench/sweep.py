"""Parameter sweeps and saturation search over local clusters."""
from __future__ import annotations

import asyncio
import copy
import csv
import io
import json
import logging
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

from ..cluster import Cluster, ClusterSpec
from .load import BenchReport, LoadSession
from .workload import WorkloadProfile, gen_workload

log = logging.getLogger(__name__)

DIMENSIONS = ("matchers", "subscriptions", "workers", "permission_filtering", "rate")
SUMMARY_COLUMNS = ["dimension_value", "saturated_throughput", "p50_ms", "p99_ms"]


@dataclass
class SaturationSearch:
    start_rate: float = 20.0
    growth: float = 1.5
    step_duration: float = 5.0
    max_steps: int = 12
    # stop once the match rate failed to improve by this much for `patience` steps
    plateau_gain: float = 0.05
    patience: int = 2
    verify: bool = True
    max_rate: float | None = None


@dataclass
class SweepPoint:
    dimension: str
    value: Any
    saturated_throughput: float
    best: BenchReport | None
    reports: list[BenchReport] = field(default_factory=list)
    error: str | None = None

    def summary_row(self) -> dict[str, Any]:
        lat = self.best.latency_ms if self.best else {}
        return {"dimension_value": self.value,
                "saturated_throughput": round(self.saturated_throughput, 3),
                "p50_ms": lat.get("p50"), "p99_ms": lat.get("p99")}


async def find_saturation(session: LoadSession, search: SaturationSearch) -> tuple[float, BenchReport, list[BenchReport]]:
    """Raise the offered rate geometrically until the subscriber-side match
    rate plateaus; returns (best match rate, its report, all reports)."""
    reports: list[BenchReport] = []
    best_rate, best_report, stale = 0.0, None, 0
    rate = search.start_rate
    for _ in range(search.max_steps):
        report = await session.measure(rate, search.step_duration, verify=search.verify,
                                       drain_timeout=2 * search.step_duration)
        reports.append(report)
        observed = report.subscriber_observed_match_rate
        log.info("offered %.1f/s -> %.1f matches/s", rate, observed)
        if observed > best_rate * (1 + search.plateau_gain) or best_report is None:
            best_rate, best_report, stale = observed, report, 0
        else:
            stale += 1
            if observed > best_rate:
                best_rate, best_report = observed, report
        if stale >= search.patience:
            break
        await session.wait_idle()
        rate *= search.growth
        if search.max_rate is not None and rate > search.max_rate:
            break
    return best_rate, best_report, reports


def _write_groups(workload: dict[str, Any], workdir: Path) -> str | None:
    if not workload.get("groups"):
        return None
    path = workdir / "groups.json"
    path.write_text(json.dumps(workload["groups"]))
    return str(path)


async def measure_point(workload: dict[str, Any], spec: ClusterSpec, search: SaturationSearch,
                        *, permission_filtering: bool = True, warmup: int = 20) -> tuple[float, BenchReport, list[BenchReport]]:
    """Start a fresh cluster, load the workload and search for saturation."""
    with tempfile.TemporaryDirectory(prefix="cbroker-sweep-") as tmp:
        spec = replace(spec, groups_file=_write_groups(workload, Path(tmp)))
        cluster = Cluster(spec)
        await asyncio.get_running_loop().run_in_executor(None, cluster.start)
        try:
            async with LoadSession(workload, cluster.lb_url, cluster_pids=cluster.pids,
                                   permission_filtering=permission_filtering) as session:
                if warmup:
                    await session.warmup(warmup)
                return await find_saturation(session, search)
        finally:
            cluster.stop()


def _parse_value(dimension: str, raw: str) -> Any:
    if dimension == "permission_filtering":
        lowered = raw.strip().lower()
        if lowered in ("on", "true", "1", "yes"):
            return True
        if lowered in ("off", "false", "0", "no"):
            return False
        raise ValueError(f"bad permission_filtering value {raw!r}")
    if dimension == "rate":
        return float(raw)
    return int(raw)


async def sweep(dimension: str, values: Iterable[Any], profile: WorkloadProfile, *,
                spec: ClusterSpec | None = None, search: SaturationSearch | None = None,
                lb_url: str | None = None) -> list[SweepPoint]:
    """One measurement point per value. For ``rate`` the values are offered
    rates against one cluster (an existing ``lb_url`` if given); every other
    dimension gets a fresh local cluster per value and a saturation search."""
    if dimension not in DIMENSIONS:
        raise ValueError(f"dimension must be one of {DIMENSIONS}")
    spec = spec or ClusterSpec()
    search = search or SaturationSearch()
    values = [_parse_value(dimension, str(v)) if isinstance(v, str) else v for v in values]
    points: list[SweepPoint] = []

    if dimension == "rate":
        workload = gen_workload(profile)
        cluster = None
        if lb_url is None:
            tmp = tempfile.TemporaryDirectory(prefix="cbroker-sweep-")
            cluster = Cluster(replace(spec, groups_file=_write_groups(workload, Path(tmp.name))))
            await asyncio.get_running_loop().run_in_executor(None, cluster.start)
            lb_url = cluster.lb_url
        try:
            async with LoadSession(workload, lb_url,
                                   cluster_pids=cluster.pids if cluster else ()) as session:
                await session.warmup(20)
                for rate in values:
                    try:
                        report = await session.measure(rate, search.step_duration,
                                                       verify=search.verify)
                    except Exception as exc:  # keep sweeping
                        points.append(SweepPoint(dimension, rate, 0.0, None, error=repr(exc)))
                        continue
                    report.dimension, report.dimension_value = dimension, rate
                    points.append(SweepPoint(dimension, rate,
                                             report.subscriber_observed_match_rate, report, [report]))
                    await session.wait_idle()
        finally:
            if cluster is not None:
                cluster.stop()
                tmp.cleanup()
        return points

    for value in values:
        point_spec = copy.deepcopy(spec)
        point_profile = copy.deepcopy(profile)
        filtering = True
        if dimension == "matchers":
            point_spec.matchers = value
        elif dimension == "workers":
            point_spec.worker_count = value
        elif dimension == "subscriptions":
            point_profile.num_subscriptions = value
        elif dimension == "permission_filtering":
            filtering = value
        workload = gen_workload(point_profile)
        try:
            best, best_report, reports = await measure_point(
                workload, point_spec, search, permission_filtering=filtering)
        except Exception as exc:
            log.exception("sweep point %s=%s failed", dimension, value)
            points.append(SweepPoint(dimension, value, 0.0, None, error=repr(exc)))
            continue
        for r in reports:
            r.dimension, r.dimension_value = dimension, value
        points.append(SweepPoint(dimension, value, best, best_report, reports))
    return points


def summary_csv(points: Iterable[SweepPoint]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS)
    writer.writeheader()
    for p in points:
        writer.writerow(p.summary_row())
    return buf.getvalue()
