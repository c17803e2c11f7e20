"""Service configuration documents (one JSON object per process)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any


@dataclass
class TLSConfig:
    certfile: str
    keyfile: str
    cafile: str | None = None


@dataclass
class MatcherConfig:
    matcher_id: int = 0
    host: str = "127.0.0.1"
    port: int = 0
    worker_count: int = 1
    queue_capacity: int = 4096
    conn_buffer: int = 1024
    permission_filtering: bool = True
    groups_file: str | None = None
    # inline alternative to groups_file, handy for in-process tests
    groups: dict[str, list[str]] | None = None
    auth_mode: str = "header"
    tls: TLSConfig | None = None
    max_subscriptions: int | None = None

    def __post_init__(self):
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if self.queue_capacity < 1 or self.conn_buffer < 1:
            raise ValueError("queue_capacity and conn_buffer must be >= 1")
        if self.auth_mode not in ("header", "mtls"):
            raise ValueError(f"unknown auth_mode {self.auth_mode!r}")
        if self.auth_mode == "mtls" and self.tls is None:
            raise ValueError("mtls auth requires a tls section")
        if isinstance(self.tls, dict):
            self.tls = TLSConfig(**self.tls)


@dataclass
class FrontendConfig:
    matchers: list[str] = field(default_factory=list)
    host: str = "127.0.0.1"
    port: int = 0
    timeout_ms: int = 2000
    auth_mode: str = "header"
    tls: TLSConfig | None = None
    # client-side TLS material for the LB -> matcher channel
    upstream_tls: TLSConfig | None = None

    def __post_init__(self):
        if not self.matchers:
            raise ValueError("at least one matcher address is required")
        if self.auth_mode not in ("header", "mtls"):
            raise ValueError(f"unknown auth_mode {self.auth_mode!r}")
        if self.auth_mode == "mtls" and self.tls is None:
            raise ValueError("mtls auth requires a tls section")
        if isinstance(self.tls, dict):
            self.tls = TLSConfig(**self.tls)
        if isinstance(self.upstream_tls, dict):
            self.upstream_tls = TLSConfig(**self.upstream_tls)


def load_config(cls, source: str | Path | dict[str, Any]):
    data = source if isinstance(source, dict) else json.loads(Path(source).read_text())
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def dump_config(cfg) -> dict[str, Any]:
    return asdict(cfg)
