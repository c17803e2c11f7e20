"""A single matcher instance.

Publications are accepted over HTTP, queued, and matched by a pool of
worker threads against a snapshot of the subscription store. Matches that
survive permission filtering are streamed to attached websockets.
"""
from __future__ import annotations

import argparse
import asyncio
import collections
import json
import logging
import queue
import threading
import time
from dataclasses import dataclass
from typing import Any

from aiohttp import WSCloseCode, WSMsgType, web

from . import auth as authmod
from .config import MatcherConfig, load_config
from .matching import (
    MatchingError, Subscription, SubscriptionPolicy, WILDCARD_GROUP, flatten,
    is_hex_id, new_id, parse_constraints, parse_json_object, permission_check,
)
from .store import CapacityExceeded, SubscriptionStore

log = logging.getLogger(__name__)

CLOSE_DISPLACED = 4000
PUB_ID_HEADER = "X-Pub-Id"
SEND_TS_HEADER = "X-Send-Ts-Ms"

_COUNTERS = (
    "received_pubs", "matched_pairs", "delivered", "dropped_no_connection",
    "dropped_buffer_overflow", "rejected", "policy_checked", "policy_blocked",
)


class Counters:
    def __init__(self):
        self._lock = threading.Lock()
        self._values = dict.fromkeys(_COUNTERS, 0)

    def add(self, **deltas: int) -> None:
        with self._lock:
            for k, v in deltas.items():
                self._values[k] += v

    def __getitem__(self, name: str) -> int:
        return self._values[name]

    def as_dict(self) -> dict[str, int]:
        with self._lock:
            return dict(self._values)


@dataclass(slots=True)
class QueuedPublication:
    pub_id: str
    body: str
    doc: dict
    send_ts_ms: int | None
    ingress_ts: int


def render_envelope(sub_id: str, pub_id: str, body: str, matched_ts: int,
                    send_ts_ms: int | None) -> str:
    # the publication is spliced in verbatim so subscribers see the exact bytes
    send = "null" if send_ts_ms is None else str(send_ts_ms)
    return (f'{{"sub_id":"{sub_id}","pub_id":"{pub_id}","publication":{body},'
            f'"matched_ts":{matched_ts},"send_ts_ms":{send}}}')


class Connection:
    """One attached websocket with a bounded drop-oldest outbound buffer."""

    def __init__(self, ws: web.WebSocketResponse, maxlen: int, counters: Counters):
        self.ws = ws
        self.maxlen = maxlen
        self.counters = counters
        self.buffer: collections.deque[str] = collections.deque()
        self._wakeup = asyncio.Event()
        self._task = asyncio.get_running_loop().create_task(self._pump())

    def push(self, frame: str) -> None:
        if len(self.buffer) >= self.maxlen:
            self.buffer.popleft()
            self.counters.add(dropped_buffer_overflow=1)
        self.buffer.append(frame)
        self._wakeup.set()

    async def _pump(self) -> None:
        buf = self.buffer
        frame = None
        try:
            while True:
                if not buf:
                    self._wakeup.clear()
                    await self._wakeup.wait()
                    continue
                frame = buf.popleft()
                try:
                    await self.ws.send_str(frame)
                except (ConnectionError, RuntimeError):
                    self.counters.add(dropped_no_connection=1)
                    break
                frame = None
                self.counters.add(delivered=1)
        except asyncio.CancelledError:
            if frame is not None:
                self.counters.add(dropped_no_connection=1)

    async def close(self, code: int = WSCloseCode.OK, message: bytes = b"") -> None:
        self._task.cancel()
        if self.buffer:
            self.counters.add(dropped_no_connection=len(self.buffer))
            self.buffer.clear()
        if not self.ws.closed:
            await self.ws.close(code=code, message=message)


class ConnectionRegistry:
    """Maps (auth_hash, sub_id) to the live connection. Event-loop only."""

    def __init__(self, maxlen: int, counters: Counters):
        self.maxlen = maxlen
        self.counters = counters
        self._conns: dict[tuple[str, str], Connection] = {}

    def __len__(self) -> int:
        return len(self._conns)

    async def attach(self, key: tuple[str, str], ws: web.WebSocketResponse) -> Connection:
        old = self._conns.get(key)
        conn = Connection(ws, self.maxlen, self.counters)
        self._conns[key] = conn
        if old is not None:
            await old.close(code=CLOSE_DISPLACED, message=b"displaced by new attach")
        return conn

    async def detach(self, key: tuple[str, str], conn: Connection, code: int = WSCloseCode.OK) -> None:
        if self._conns.get(key) is conn:
            del self._conns[key]
        await conn.close(code=code)

    def get(self, key: tuple[str, str]) -> Connection | None:
        return self._conns.get(key)

    def dispatch(self, frames: list[tuple[tuple[str, str], str]]) -> None:
        missing = 0
        for key, frame in frames:
            conn = self._conns.get(key)
            if conn is None:
                missing += 1
            else:
                conn.push(frame)
        if missing:
            self.counters.add(dropped_no_connection=missing)

    async def close_all(self) -> None:
        for key, conn in list(self._conns.items()):
            await self.detach(key, conn, code=WSCloseCode.GOING_AWAY)


class MatcherService:
    def __init__(self, config: MatcherConfig):
        self.config = config
        self.store = SubscriptionStore(config.max_subscriptions)
        self.counters = Counters()
        self.groups = authmod.load_groups(config.groups_file)
        if config.groups:
            self.groups.update(authmod.load_groups(config.groups))
        self.permission_filtering = config.permission_filtering
        self.queue: queue.Queue[QueuedPublication | None] = queue.Queue(config.queue_capacity)
        self.registry = ConnectionRegistry(config.conn_buffer, self.counters)
        self._workers: list[threading.Thread] = []
        self._loop: asyncio.AbstractEventLoop | None = None
        self.app = self._build_app()

    # -- worker pool -------------------------------------------------------

    def start_workers(self) -> None:
        self._loop = asyncio.get_running_loop()
        for i in range(self.config.worker_count):
            t = threading.Thread(target=self.worker_loop, name=f"matcher-worker-{i}", daemon=True)
            t.start()
            self._workers.append(t)

    def stop_workers(self) -> None:
        for _ in self._workers:
            self.queue.put(None)
        for t in self._workers:
            t.join(timeout=5)
        self._workers.clear()

    def worker_loop(self) -> None:
        while True:
            item = self.queue.get()
            if item is None:
                return
            try:
                frames = self.process(item)
            except Exception:
                log.exception("worker failed on publication %s", item.pub_id)
                continue
            if frames:
                self._loop.call_soon_threadsafe(self.registry.dispatch, frames)

    def process(self, item: QueuedPublication) -> list[tuple[tuple[str, str], str]]:
        """Both filter stages for one publication; returns frames to deliver."""
        try:
            attrs = flatten(item.doc)
        except MatchingError as exc:
            log.warning("rejecting publication %s: %s", item.pub_id, exc)
            self.counters.add(rejected=1)
            return []
        snap = self.store.snapshot()
        pairs = snap.match_all(attrs)
        if not pairs:
            return []
        checked = blocked = 0
        if self.permission_filtering:
            policies = snap.policies
            verdicts: dict[frozenset, bool] = {}
            allowed = []
            for pair in pairs:
                groups = self.groups.get(pair[0], frozenset())
                ok = verdicts.get(groups)
                if ok is None:
                    ok = verdicts[groups] = permission_check(policies, attrs, groups)
                checked += 1
                if ok:
                    allowed.append(pair)
                else:
                    blocked += 1
        else:
            allowed = pairs
        self.counters.add(matched_pairs=len(pairs), policy_checked=checked, policy_blocked=blocked)
        matched_ts = int(time.time() * 1000)
        return [
            (pair, render_envelope(pair[1], item.pub_id, item.body, matched_ts, item.send_ts_ms))
            for pair in allowed
        ]

    # -- HTTP --------------------------------------------------------------

    def _build_app(self) -> web.Application:
        app = web.Application(client_max_size=16 * 1024 * 1024)
        app.add_routes([
            web.post("/subscriptions", self.handle_subscribe),
            web.delete("/subscriptions/{sub_id}", self.handle_unsubscribe),
            web.post("/publications", self.handle_publish),
            web.post("/policies", self.handle_install_policy),
            web.delete("/policies/{policy_id}", self.handle_remove_policy),
            web.get("/stats", self.handle_stats),
            web.post("/admin/permission-filtering", self.handle_toggle_permissions),
            web.get("/ws", self.handle_ws_attach),
        ])
        app.on_startup.append(self._on_startup)
        app.on_shutdown.append(self._on_shutdown)
        app.on_cleanup.append(self._on_cleanup)
        return app

    async def _on_startup(self, app):
        self.start_workers()

    async def _on_shutdown(self, app):
        await self.registry.close_all()

    async def _on_cleanup(self, app):
        await asyncio.get_running_loop().run_in_executor(None, self.stop_workers)

    def _auth(self, request: web.Request) -> str:
        try:
            return authmod.request_auth_hash(request, self.config.auth_mode)
        except authmod.AuthError as exc:
            raise web.HTTPUnauthorized(text=json.dumps({"error": str(exc)}),
                                       content_type="application/json")

    @staticmethod
    async def _json_body(request: web.Request) -> Any:
        try:
            return json.loads(await request.text())
        except ValueError as exc:
            raise _bad_request(f"invalid JSON: {exc}")

    async def handle_subscribe(self, request: web.Request) -> web.Response:
        auth = self._auth(request)
        body = await self._json_body(request)
        if not isinstance(body, dict):
            raise _bad_request("expected a JSON object")
        sub_id = body.get("sub_id") or new_id()
        if not is_hex_id(sub_id):
            raise _bad_request("sub_id must be 32 lowercase hex chars")
        try:
            constraints = parse_constraints(body.get("constraints"))
        except MatchingError as exc:
            raise _bad_request(str(exc))
        try:
            outcome = self.store.register(Subscription(auth, sub_id, constraints))
        except CapacityExceeded as exc:
            raise web.HTTPServiceUnavailable(text=json.dumps({"error": str(exc)}),
                                             content_type="application/json")
        return web.json_response({"sub_id": sub_id, "matcher_id": self.config.matcher_id,
                                  "outcome": outcome.value})

    async def handle_unsubscribe(self, request: web.Request) -> web.Response:
        auth = self._auth(request)
        sub_id = request.match_info["sub_id"]
        removed = self.store.remove(auth, sub_id)
        if removed:
            conn = self.registry.get((auth, sub_id))
            if conn is not None:
                await self.registry.detach((auth, sub_id), conn)
        return web.json_response({"removed": removed})

    async def handle_publish(self, request: web.Request) -> web.Response:
        text = await request.text()
        try:
            doc = parse_json_object(text)
        except MatchingError as exc:
            raise _bad_request(str(exc))
        pub_id = request.headers.get(PUB_ID_HEADER)
        if not is_hex_id(pub_id):
            pub_id = new_id()
        send_ts = request.headers.get(SEND_TS_HEADER)
        try:
            send_ts_ms = int(send_ts) if send_ts is not None else None
        except ValueError:
            raise _bad_request(f"{SEND_TS_HEADER} must be an integer")
        item = QueuedPublication(pub_id, text, doc, send_ts_ms, time.monotonic_ns())
        try:
            self.queue.put_nowait(item)
        except queue.Full:
            raise web.HTTPServiceUnavailable(text=json.dumps({"error": "queue full"}),
                                             content_type="application/json")
        self.counters.add(received_pubs=1)
        return web.json_response({"pub_id": pub_id}, status=202)

    async def handle_install_policy(self, request: web.Request) -> web.Response:
        owner = self._auth(request)
        body = await self._json_body(request)
        if not isinstance(body, dict):
            raise _bad_request("expected a JSON object")
        policy_id = body.get("policy_id") or new_id()
        group = body.get("group", WILDCARD_GROUP)
        if not is_hex_id(policy_id):
            raise _bad_request("policy_id must be 32 lowercase hex chars")
        if not isinstance(group, str) or not group:
            raise _bad_request("group must be a non-empty string")
        try:
            constraints = parse_constraints(body.get("pub_constraints"))
        except MatchingError as exc:
            raise _bad_request(str(exc))
        try:
            outcome = self.store.install_policy(
                SubscriptionPolicy(policy_id, owner, constraints, group))
        except PermissionError as exc:
            raise web.HTTPForbidden(text=json.dumps({"error": str(exc)}),
                                    content_type="application/json")
        return web.json_response({"policy_id": policy_id, "outcome": outcome.value})

    async def handle_remove_policy(self, request: web.Request) -> web.Response:
        owner = self._auth(request)
        removed = self.store.remove_policy(owner, request.match_info["policy_id"])
        return web.json_response({"removed": removed})

    async def handle_toggle_permissions(self, request: web.Request) -> web.Response:
        body = await self._json_body(request)
        if not isinstance(body, dict) or not isinstance(body.get("enabled"), bool):
            raise _bad_request('expected {"enabled": bool}')
        self.permission_filtering = body["enabled"]
        return web.json_response({"permission_filtering": self.permission_filtering})

    def stats(self) -> dict[str, Any]:
        doc: dict[str, Any] = self.counters.as_dict()
        doc.update(
            matcher_id=self.config.matcher_id,
            queue_depth=self.queue.qsize(),
            worker_count=self.config.worker_count,
            generation=self.store.generation,
            subscriptions=self.store.total_count,
            policies=self.store.policy_count,
            connections=len(self.registry),
            permission_filtering=self.permission_filtering,
        )
        return doc

    async def handle_stats(self, request: web.Request) -> web.Response:
        return web.json_response(self.stats())

    async def handle_ws_attach(self, request: web.Request) -> web.StreamResponse:
        auth = self._auth(request)
        sub_id = request.query.get("sub", "")
        if self.store.get(auth, sub_id) is None:
            if self.store.owners_of(sub_id):
                raise web.HTTPUnauthorized(text='{"error": "subscription owned by another identity"}',
                                           content_type="application/json")
            raise web.HTTPNotFound(text='{"error": "unknown subscription"}',
                                   content_type="application/json")
        ws = web.WebSocketResponse(heartbeat=30)
        await ws.prepare(request)
        key = (auth, sub_id)
        conn = await self.registry.attach(key, ws)
        try:
            async for msg in ws:
                if msg.type == WSMsgType.ERROR:
                    break
        finally:
            await self.registry.detach(key, conn)
        return ws


def _bad_request(message: str) -> web.HTTPBadRequest:
    return web.HTTPBadRequest(text=json.dumps({"error": message}), content_type="application/json")


def ssl_context_for(config) -> Any:
    if config.tls is None:
        return None
    return authmod.server_ssl_context(config.tls.certfile, config.tls.keyfile, config.tls.cafile,
                                      require_client_cert=config.auth_mode == "mtls")


async def start_matcher(config: MatcherConfig) -> tuple[MatcherService, web.AppRunner, str]:
    """Run a matcher inside the current event loop; returns its base URL."""
    service = MatcherService(config)
    runner = web.AppRunner(service.app, access_log=None)
    await runner.setup()
    site = web.TCPSite(runner, config.host, config.port, ssl_context=ssl_context_for(config),
                       reuse_address=True)
    await site.start()
    port = site._server.sockets[0].getsockname()[1]
    scheme = "https" if config.tls else "http"
    return service, runner, f"{scheme}://{config.host}:{port}"


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(description="run one matcher instance")
    parser.add_argument("--config", required=True)
    parser.add_argument("--log-level", default="WARNING")
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level)
    config = load_config(MatcherConfig, args.config)
    service = MatcherService(config)
    web.run_app(service.app, host=config.host, port=config.port,
                ssl_context=ssl_context_for(config), access_log=None, print=None)


if __name__ == "__main__":
    main()
