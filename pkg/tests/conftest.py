import asyncio
import hashlib
from dataclasses import dataclass, field

import pytest

from cbroker.config import FrontendConfig, MatcherConfig
from cbroker.frontend import start_frontend
from cbroker.matcher import start_matcher


def ident(label: str) -> str:
    return hashlib.sha256(label.encode()).hexdigest()


@dataclass
class LocalCluster:
    services: list = field(default_factory=list)
    runners: list = field(default_factory=list)
    urls: list = field(default_factory=list)
    frontend: object = None
    fe_runner: object = None
    lb_url: str = ""

    async def stop_matcher(self, i: int) -> None:
        if self.runners[i] is not None:
            await self.runners[i].cleanup()
            self.runners[i] = None

    async def close(self) -> None:
        if self.fe_runner is not None:
            await self.fe_runner.cleanup()
        for i in range(len(self.runners)):
            await self.stop_matcher(i)


async def start_local(n: int = 1, *, timeout_ms: int = 2000, matcher_urls=None, **matcher_kw) -> LocalCluster:
    c = LocalCluster()
    for i in range(n):
        svc, runner, url = await start_matcher(MatcherConfig(matcher_id=i, **matcher_kw))
        c.services.append(svc)
        c.runners.append(runner)
        c.urls.append(url)
    fe, runner, url = await start_frontend(
        FrontendConfig(matchers=list(matcher_urls or c.urls), timeout_ms=timeout_ms))
    c.frontend, c.fe_runner, c.lb_url = fe, runner, url
    return c


@pytest.fixture
async def local_cluster():
    made = []

    async def factory(n=1, **kw):
        c = await start_local(n, **kw)
        made.append(c)
        return c

    yield factory
    for c in made:
        await c.close()


async def eventually(pred, timeout=5.0, step=0.02):
    deadline = asyncio.get_running_loop().time() + timeout
    while True:
        if pred():
            return True
        if asyncio.get_running_loop().time() > deadline:
            return False
        await asyncio.sleep(step)


ACCEPTANCE_LINES: list[str] = []


def criterion(number: int, ok: bool, detail: str) -> None:
    """Record and print one acceptance verdict; fails the calling test on FAIL."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
