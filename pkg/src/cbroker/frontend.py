"""Client-facing load balancer.

Subscriptions go to exactly one matcher (hash partitioning); publications,
policies and unsubscribes are multicast to every matcher. Subscriber
websockets are relayed from the owning matcher.
"""
from __future__ import annotations

import argparse
import asyncio
import enum
import json
import logging
import time
import weakref
from dataclasses import dataclass
from typing import Any

import aiohttp
from aiohttp import WSMsgType, web

from . import auth as authmod
from .config import FrontendConfig, load_config
from .matcher import PUB_ID_HEADER, SEND_TS_HEADER, ssl_context_for
from .matching import (
    MatchingError, is_hex_id, new_id, parse_constraints, parse_json_object, partition_of,
)

log = logging.getLogger(__name__)


class Status(str, enum.Enum):
    OK = "ok"
    TIMEOUT = "timeout"
    REFUSED = "refused"
    QUEUE_FULL = "queue_full"
    ERROR = "error"


@dataclass
class MatcherOutcome:
    matcher_id: int
    status: Status
    latency_ms: float
    http_status: int | None = None
    body: Any = None

    def summary(self) -> dict[str, Any]:
        return {"matcher_id": self.matcher_id, "status": self.status.value,
                "latency_ms": round(self.latency_ms, 3)}


def _json_error(cls, message: str):
    return cls(text=json.dumps({"error": message}), content_type="application/json")


class Frontend:
    def __init__(self, config: FrontendConfig):
        self.config = config
        self.matchers = [m.rstrip("/") for m in config.matchers]
        self.timeout = aiohttp.ClientTimeout(total=config.timeout_ms / 1000)
        self._upstream_ssl = None
        if config.upstream_tls is not None:
            t = config.upstream_tls
            self._upstream_ssl = authmod.client_ssl_context(t.cafile, t.certfile, t.keyfile)
        self.session: aiohttp.ClientSession | None = None
        self._downstream: weakref.WeakSet[web.WebSocketResponse] = weakref.WeakSet()
        self.app = self._build_app()

    @property
    def n(self) -> int:
        return len(self.matchers)

    def _build_app(self) -> web.Application:
        app = web.Application(client_max_size=16 * 1024 * 1024)
        app.add_routes([
            web.post("/subscriptions", self.handle_subscribe),
            web.delete("/subscriptions/{sub_id}", self.handle_unsubscribe),
            web.post("/publications", self.handle_publish),
            web.post("/policies", self.handle_install_policy),
            web.delete("/policies/{policy_id}", self.handle_remove_policy),
            web.post("/admin/permission-filtering", self.handle_toggle_permissions),
            web.get("/ws", self.handle_ws_proxy),
            web.get("/cluster", self.handle_cluster),
            web.get("/stats", self.handle_stats),
        ])
        app.on_startup.append(self._on_startup)
        app.on_shutdown.append(self._on_shutdown)
        app.on_cleanup.append(self._on_cleanup)
        return app

    async def _on_startup(self, app):
        connector = aiohttp.TCPConnector(limit=0, limit_per_host=256, ssl=self._upstream_ssl)
        self.session = aiohttp.ClientSession(connector=connector, timeout=self.timeout)
        # relayed websockets are long-lived; keep them out of the request pool
        self.ws_session = aiohttp.ClientSession(
            connector=aiohttp.TCPConnector(limit=0, ssl=self._upstream_ssl),
            timeout=aiohttp.ClientTimeout(total=None, connect=self.config.timeout_ms / 1000))

    async def _on_shutdown(self, app):
        for ws in list(self._downstream):
            await ws.close(code=aiohttp.WSCloseCode.GOING_AWAY, message=b"shutting down")

    async def _on_cleanup(self, app):
        await self.session.close()
        await self.ws_session.close()

    def _auth(self, request: web.Request) -> str:
        try:
            return authmod.request_auth_hash(request, self.config.auth_mode)
        except authmod.AuthError as exc:
            raise _json_error(web.HTTPUnauthorized, str(exc))

    # -- fan-out -----------------------------------------------------------

    async def _call(self, matcher_id: int, method: str, path: str, *, data: Any = None,
                    headers: dict[str, str] | None = None) -> MatcherOutcome:
        url = self.matchers[matcher_id] + path
        t0 = time.perf_counter()
        try:
            async with self.session.request(method, url, data=data, headers=headers) as resp:
                body = await resp.read()
                ms = (time.perf_counter() - t0) * 1000
                try:
                    parsed = json.loads(body) if body else None
                except ValueError:
                    parsed = body.decode("utf-8", "replace")
                if resp.status < 300:
                    status = Status.OK
                elif resp.status == 503:
                    status = Status.QUEUE_FULL
                else:
                    status = Status.ERROR
                return MatcherOutcome(matcher_id, status, ms, resp.status, parsed)
        except asyncio.TimeoutError:
            return MatcherOutcome(matcher_id, Status.TIMEOUT, (time.perf_counter() - t0) * 1000)
        except aiohttp.ClientError:
            return MatcherOutcome(matcher_id, Status.REFUSED, (time.perf_counter() - t0) * 1000)

    async def multicast(self, method: str, path: str, **kwargs) -> list[MatcherOutcome]:
        return list(await asyncio.gather(
            *(self._call(i, method, path, **kwargs) for i in range(self.n))))

    @staticmethod
    def _fanout_response(outcomes: list[MatcherOutcome], payload: dict, ok_status: int) -> web.Response:
        ok = sum(o.status is Status.OK for o in outcomes)
        payload["multicast"] = [o.summary() for o in outcomes]
        if ok == len(outcomes):
            status = ok_status
        elif ok == 0:
            status = 503
        else:
            status = 207
        return web.json_response(payload, status=status)

    # -- handlers ----------------------------------------------------------

    async def handle_subscribe(self, request: web.Request) -> web.Response:
        auth = self._auth(request)
        try:
            body = json.loads(await request.text())
        except ValueError as exc:
            raise _json_error(web.HTTPBadRequest, f"invalid JSON: {exc}")
        if not isinstance(body, dict):
            raise _json_error(web.HTTPBadRequest, "expected a JSON object")
        sub_id = body.get("sub_id") or new_id()
        if not is_hex_id(sub_id):
            raise _json_error(web.HTTPBadRequest, "sub_id must be 32 lowercase hex chars")
        try:
            constraints = parse_constraints(body.get("constraints"))
        except MatchingError as exc:
            raise _json_error(web.HTTPBadRequest, str(exc))
        matcher_id = partition_of(constraints, self.n)
        out = await self._call(
            matcher_id, "POST", "/subscriptions",
            data=json.dumps({"sub_id": sub_id, "constraints": body["constraints"]}),
            headers={authmod.AUTH_HEADER: auth, "Content-Type": "application/json"})
        if out.status is Status.OK:
            return web.json_response({"sub_id": sub_id, "matcher_id": matcher_id,
                                      "outcome": (out.body or {}).get("outcome")})
        if out.http_status is not None:
            return web.json_response(out.body, status=out.http_status)
        raise _json_error(web.HTTPBadGateway, f"matcher {matcher_id} {out.status.value}")

    async def handle_unsubscribe(self, request: web.Request) -> web.Response:
        auth = self._auth(request)
        sub_id = request.match_info["sub_id"]
        outcomes = await self.multicast("DELETE", f"/subscriptions/{sub_id}",
                                        headers={authmod.AUTH_HEADER: auth})
        removed = any(o.status is Status.OK and o.body.get("removed") for o in outcomes)
        if not removed and any(o.status is not Status.OK for o in outcomes):
            raise _json_error(web.HTTPBadGateway, "some matchers unreachable")
        return web.json_response({"removed": removed})

    async def handle_publish(self, request: web.Request) -> web.Response:
        raw = await request.read()
        try:
            parse_json_object(raw)
        except MatchingError as exc:
            raise _json_error(web.HTTPBadRequest, str(exc))
        pub_id = new_id()
        headers = {PUB_ID_HEADER: pub_id, "Content-Type": "application/json"}
        send_ts = request.headers.get(SEND_TS_HEADER)
        if send_ts is not None:
            headers[SEND_TS_HEADER] = send_ts
        outcomes = await self.multicast("POST", "/publications", data=raw, headers=headers)
        return self._fanout_response(outcomes, {"pub_id": pub_id}, 202)

    async def handle_install_policy(self, request: web.Request) -> web.Response:
        auth = self._auth(request)
        try:
            body = json.loads(await request.text())
        except ValueError as exc:
            raise _json_error(web.HTTPBadRequest, f"invalid JSON: {exc}")
        if not isinstance(body, dict):
            raise _json_error(web.HTTPBadRequest, "expected a JSON object")
        body.setdefault("policy_id", new_id())
        try:
            parse_constraints(body.get("pub_constraints"))
        except MatchingError as exc:
            raise _json_error(web.HTTPBadRequest, str(exc))
        outcomes = await self.multicast(
            "POST", "/policies", data=json.dumps(body),
            headers={authmod.AUTH_HEADER: auth, "Content-Type": "application/json"})
        if all(o.http_status == 400 for o in outcomes):
            return web.json_response(outcomes[0].body, status=400)
        return self._fanout_response(outcomes, {"policy_id": body["policy_id"]}, 200)

    async def handle_remove_policy(self, request: web.Request) -> web.Response:
        auth = self._auth(request)
        outcomes = await self.multicast("DELETE", f"/policies/{request.match_info['policy_id']}",
                                        headers={authmod.AUTH_HEADER: auth})
        removed = any(o.status is Status.OK and o.body.get("removed") for o in outcomes)
        return self._fanout_response(outcomes, {"removed": removed}, 200)

    async def handle_toggle_permissions(self, request: web.Request) -> web.Response:
        data = await request.read()
        outcomes = await self.multicast("POST", "/admin/permission-filtering", data=data,
                                        headers={"Content-Type": "application/json"})
        if all(o.http_status == 400 for o in outcomes):
            return web.json_response(outcomes[0].body, status=400)
        return self._fanout_response(outcomes, {}, 200)

    async def handle_cluster(self, request: web.Request) -> web.Response:
        return web.json_response(self.partition_map())

    def partition_map(self) -> dict[str, Any]:
        return {"count": self.n,
                "matchers": [{"id": i, "address": a} for i, a in enumerate(self.matchers)]}

    async def handle_stats(self, request: web.Request) -> web.Response:
        outcomes = await self.multicast("GET", "/stats")
        return web.json_response({"matchers": [
            o.body if o.status is Status.OK else {"matcher_id": o.matcher_id, "error": o.status.value}
            for o in outcomes]})

    async def handle_ws_proxy(self, request: web.Request) -> web.StreamResponse:
        auth = self._auth(request)
        sub_id = request.query.get("sub", "")
        try:
            matcher_id = int(request.query.get("matcher", ""))
        except ValueError:
            raise _json_error(web.HTTPBadRequest, "matcher must be an integer")
        if not 0 <= matcher_id < self.n:
            raise _json_error(web.HTTPBadRequest, f"matcher must be in [0, {self.n})")
        url = self.matchers[matcher_id].replace("http", "ws", 1) + "/ws"
        try:
            upstream = await self.ws_session.ws_connect(
                url, params={"sub": sub_id}, headers={authmod.AUTH_HEADER: auth},
                autoping=True, heartbeat=None)
        except aiohttp.WSServerHandshakeError as exc:
            raise _json_error(_status_class(exc.status), exc.message)
        except (aiohttp.ClientError, asyncio.TimeoutError) as exc:
            raise _json_error(web.HTTPBadGateway, f"upstream connect failed: {exc}")

        downstream = web.WebSocketResponse(heartbeat=30)
        try:
            await downstream.prepare(request)
        except Exception:
            await upstream.close()
            raise
        self._downstream.add(downstream)

        async def pump_up():
            # client -> matcher (only control traffic is expected)
            async for msg in downstream:
                if msg.type == WSMsgType.TEXT:
                    await upstream.send_str(msg.data)
                elif msg.type == WSMsgType.BINARY:
                    await upstream.send_bytes(msg.data)
            await upstream.close()

        up_task = asyncio.create_task(pump_up())
        try:
            async for msg in upstream:
                if msg.type == WSMsgType.TEXT:
                    await downstream.send_str(msg.data)
                elif msg.type == WSMsgType.BINARY:
                    await downstream.send_bytes(msg.data)
                elif msg.type == WSMsgType.ERROR:
                    break
        except (ConnectionError, RuntimeError):
            pass
        finally:
            up_task.cancel()
            code = upstream.close_code or aiohttp.WSCloseCode.GOING_AWAY
            if not downstream.closed:
                await downstream.close(code=code)
            if not upstream.closed:
                await upstream.close()
        return downstream


def _status_class(status: int):
    return {400: web.HTTPBadRequest, 401: web.HTTPUnauthorized, 403: web.HTTPForbidden,
            404: web.HTTPNotFound}.get(status, web.HTTPBadGateway)


async def start_frontend(config: FrontendConfig) -> tuple[Frontend, web.AppRunner, str]:
    fe = Frontend(config)
    runner = web.AppRunner(fe.app, access_log=None)
    await runner.setup()
    site = web.TCPSite(runner, config.host, config.port, ssl_context=ssl_context_for(config),
                       reuse_address=True)
    await site.start()
    port = site._server.sockets[0].getsockname()[1]
    scheme = "https" if config.tls else "http"
    return fe, runner, f"{scheme}://{config.host}:{port}"


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(description="run the load-balancer front end")
    parser.add_argument("--config", required=True)
    parser.add_argument("--log-level", default="WARNING")
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level)
    config = load_config(FrontendConfig, args.config)
    fe = Frontend(config)
    web.run_app(fe.app, host=config.host, port=config.port, ssl_context=ssl_context_for(config),
                access_log=None, print=None)


if __name__ == "__main__":
    main()
