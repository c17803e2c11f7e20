"""Single-host cluster launcher: N matcher processes behind one front end."""
from __future__ import annotations

import argparse
import json
import os
import signal
import socket
import subprocess
import sys
import tempfile
import time
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket() as s:
        s.bind((host, 0))
        return s.getsockname()[1]


@dataclass
class ClusterSpec:
    matchers: int = 1
    worker_count: int = 1
    queue_capacity: int = 4096
    conn_buffer: int = 1024
    permission_filtering: bool = True
    groups_file: str | None = None
    timeout_ms: int = 2000
    host: str = "127.0.0.1"
    lb_port: int = 0
    matcher_ports: list[int] = field(default_factory=list)

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "ClusterSpec":
        return cls(**doc)


class Cluster:
    """Spawns ``python -m cbroker.matcher`` / ``cbroker.frontend`` processes.

    Usable as a context manager; ``lb_url`` and ``partition_map`` are valid
    after ``start()``.
    """

    def __init__(self, spec: ClusterSpec | None = None, workdir: str | None = None, **overrides):
        spec = spec or ClusterSpec()
        for k, v in overrides.items():
            setattr(spec, k, v)
        self.spec = spec
        self._tmp = None if workdir else tempfile.TemporaryDirectory(prefix="cbroker-")
        self.workdir = Path(workdir or self._tmp.name)
        self.procs: list[subprocess.Popen] = []
        self.matcher_urls: list[str] = []
        self.lb_url = ""

    @property
    def pids(self) -> list[int]:
        return [p.pid for p in self.procs]

    @property
    def partition_map(self) -> dict[str, Any]:
        return {"count": len(self.matcher_urls), "lb": self.lb_url,
                "matchers": [{"id": i, "address": a} for i, a in enumerate(self.matcher_urls)]}

    def _spawn(self, module: str, config: dict[str, Any], name: str) -> None:
        path = self.workdir / f"{name}.json"
        path.write_text(json.dumps(config, indent=1))
        log = open(self.workdir / f"{name}.log", "w")
        env = dict(os.environ, PYTHONUNBUFFERED="1")
        self.procs.append(subprocess.Popen(
            [sys.executable, "-m", module, "--config", str(path)],
            stdout=log, stderr=subprocess.STDOUT, env=env))

    def start(self, timeout: float = 30.0) -> dict[str, Any]:
        s = self.spec
        ports = list(s.matcher_ports) or [free_port(s.host) for _ in range(s.matchers)]
        if len(ports) != s.matchers:
            raise ValueError("matcher_ports must list one port per matcher")
        for i, port in enumerate(ports):
            self._spawn("cbroker.matcher", {
                "matcher_id": i, "host": s.host, "port": port,
                "worker_count": s.worker_count, "queue_capacity": s.queue_capacity,
                "conn_buffer": s.conn_buffer, "permission_filtering": s.permission_filtering,
                "groups_file": s.groups_file,
            }, f"matcher-{i}")
            self.matcher_urls.append(f"http://{s.host}:{port}")
        lb_port = s.lb_port or free_port(s.host)
        self._spawn("cbroker.frontend", {
            "matchers": self.matcher_urls, "host": s.host, "port": lb_port,
            "timeout_ms": s.timeout_ms,
        }, "frontend")
        self.lb_url = f"http://{s.host}:{lb_port}"
        try:
            for url in [*self.matcher_urls, self.lb_url]:
                self._wait_ready(url, timeout)
        except Exception:
            self.stop()
            raise
        return self.partition_map

    def _wait_ready(self, url: str, timeout: float) -> None:
        path = "/cluster" if url == self.lb_url else "/stats"
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            for p in self.procs:
                if p.poll() is not None:
                    raise RuntimeError(f"cluster process exited early; logs in {self.workdir}")
            try:
                with urllib.request.urlopen(url + path, timeout=1) as resp:
                    if resp.status == 200:
                        return
            except (urllib.error.URLError, ConnectionError, OSError):
                time.sleep(0.1)
        raise TimeoutError(f"{url} not ready after {timeout}s")

    def stop(self) -> None:
        for p in self.procs:
            if p.poll() is None:
                p.send_signal(signal.SIGINT)
        for p in self.procs:
            try:
                p.wait(timeout=10)
            except subprocess.TimeoutExpired:
                p.kill()
                p.wait()
        self.procs.clear()
        self.matcher_urls.clear()

    def kill_matcher(self, index: int) -> None:
        """Fault injection: hard-stop one matcher process."""
        p = self.procs[index]
        p.kill()
        p.wait()

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()
        if self._tmp is not None:
            self._tmp.cleanup()


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(prog="cluster", description="local cluster launcher")
    sub = parser.add_subparsers(dest="command", required=True)
    up = sub.add_parser("up", help="start LB + N matchers and print the partition map")
    up.add_argument("--matchers", type=int, default=1)
    up.add_argument("--config", help="JSON with ClusterSpec fields (worker_count, ...)")
    up.add_argument("--workers", type=int)
    up.add_argument("--groups-file")
    up.add_argument("--lb-port", type=int)
    up.add_argument("--workdir")
    args = parser.parse_args(argv)

    spec = ClusterSpec.from_json(json.loads(Path(args.config).read_text())) if args.config \
        else ClusterSpec()
    spec.matchers = args.matchers
    if args.workers:
        spec.worker_count = args.workers
    if args.groups_file:
        spec.groups_file = args.groups_file
    if args.lb_port:
        spec.lb_port = args.lb_port
    cluster = Cluster(spec, workdir=args.workdir)
    with cluster:
        print(json.dumps(dict(cluster.partition_map, spec=asdict(spec)), indent=1), flush=True)
        signal.pthread_sigmask(signal.SIG_BLOCK, {signal.SIGINT, signal.SIGTERM})
        signal.sigwait({signal.SIGINT, signal.SIGTERM})


if __name__ == "__main__":
    main()
