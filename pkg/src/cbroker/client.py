"""Async publisher/subscriber client for the load-balancer endpoint.

Example::

    async with BrokerClient("http://127.0.0.1:8000", auth_hash=h) as client:
        handle = await client.subscribe([Constraint("lat", Op.GT, 50.0)])
        await client.publish({"id": "truck-abc", "lat": 51.0504})
        envelope = await handle.receive(timeout=5)
"""
from __future__ import annotations

import asyncio
import json
import logging
import ssl
import time
from dataclasses import dataclass
from typing import Any, Iterable, Mapping

import aiohttp

from . import auth as authmod
from .matcher import CLOSE_DISPLACED, SEND_TS_HEADER
from .matching import Constraint, is_auth_hash

log = logging.getLogger(__name__)

_RAW_PREFIX_LEN = len('{"sub_id":"","pub_id":"","publication":') + 64
_RAW_SUFFIX = ',"matched_ts":'


class BrokerError(Exception):
    def __init__(self, message: str, status: int | None = None, detail: Any = None):
        super().__init__(message)
        self.status = status
        self.detail = detail


class Unauthenticated(BrokerError):
    pass


class Malformed(BrokerError):
    pass


class Unavailable(BrokerError):
    pass


class PartialDelivery(BrokerError):
    """Some matchers did not accept the request; ``detail`` lists them."""

    def __init__(self, message: str, pub_id: str | None, status: int, detail: Any):
        super().__init__(message, status, detail)
        self.pub_id = pub_id


@dataclass
class Envelope:
    sub_id: str
    pub_id: str
    publication: dict
    matched_ts: int
    send_ts_ms: int | None
    received_ms: float
    frame: str

    @classmethod
    def from_frame(cls, frame: str) -> "Envelope":
        doc = json.loads(frame)
        return cls(doc["sub_id"], doc["pub_id"], doc["publication"], doc["matched_ts"],
                   doc.get("send_ts_ms"), time.time() * 1000, frame)

    @property
    def publication_raw(self) -> str:
        """The publication exactly as the publisher sent it."""
        return self.frame[_RAW_PREFIX_LEN:self.frame.rindex(_RAW_SUFFIX)]


def _raise_for(status: int, body: Any) -> None:
    msg = body.get("error", str(body)) if isinstance(body, dict) else str(body)
    if status == 401:
        raise Unauthenticated(msg, status, body)
    if status in (400, 404, 413):
        raise Malformed(msg, status, body)
    raise Unavailable(msg, status, body)


class BrokerClient:
    """Talks to the front end. Safe to share across tasks of one event loop."""

    def __init__(self, base_url: str, auth_hash: str | None = None, *,
                 ssl_context: ssl.SSLContext | None = None,
                 timeout: float = 10.0, session: aiohttp.ClientSession | None = None):
        self.base_url = base_url.rstrip("/")
        if auth_hash is not None and not is_auth_hash(auth_hash):
            raise ValueError("auth_hash must be 64 lowercase hex chars")
        self.auth_hash = auth_hash
        self._ssl = ssl_context
        self._timeout = aiohttp.ClientTimeout(total=timeout)
        self._own_session = session is None
        self._session = session

    @classmethod
    def from_certificate(cls, base_url: str, certfile: str, keyfile: str,
                         cafile: str | None = None, **kwargs) -> "BrokerClient":
        ctx = authmod.client_ssl_context(cafile, certfile, keyfile)
        client = cls(base_url, ssl_context=ctx, **kwargs)
        # informational; the server derives the same value from the handshake
        client.auth_hash = authmod.auth_hash_from_cert_file(certfile)
        client._send_auth_header = False
        return client

    _send_auth_header = True

    @property
    def session(self) -> aiohttp.ClientSession:
        if self._session is None:
            connector = aiohttp.TCPConnector(limit=0, ssl=self._ssl if self._ssl else None)
            self._session = aiohttp.ClientSession(connector=connector, timeout=self._timeout)
        return self._session

    def _headers(self, extra: Mapping[str, str] | None = None) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.auth_hash and self._send_auth_header:
            headers[authmod.AUTH_HEADER] = self.auth_hash
        if extra:
            headers.update(extra)
        return headers

    async def close(self) -> None:
        if self._own_session and self._session is not None:
            await self._session.close()
            self._session = None

    async def __aenter__(self):
        return self

    async def __aexit__(self, *exc):
        await self.close()

    async def _request(self, method: str, path: str, data: Any = None,
                       extra_headers: Mapping[str, str] | None = None) -> tuple[int, Any]:
        try:
            async with self.session.request(method, self.base_url + path, data=data,
                                            headers=self._headers(extra_headers)) as resp:
                text = await resp.text()
                try:
                    body = json.loads(text) if text else None
                except ValueError:
                    body = text
                return resp.status, body
        except (aiohttp.ClientError, asyncio.TimeoutError) as exc:
            raise Unavailable(f"{method} {path} failed: {exc}") from exc

    # -- subscriptions -----------------------------------------------------

    async def subscribe(self, constraints: Iterable[Constraint | Mapping], *,
                        sub_id: str | None = None, attach: bool = True,
                        buffer: int = 0) -> "SubscriptionHandle":
        wire = [c.to_json() if isinstance(c, Constraint) else dict(c) for c in constraints]
        payload: dict[str, Any] = {"constraints": wire}
        if sub_id:
            payload["sub_id"] = sub_id
        status, body = await self._request("POST", "/subscriptions", json.dumps(payload))
        if status != 200:
            _raise_for(status, body)
        handle = SubscriptionHandle(self, body["sub_id"], body["matcher_id"], buffer)
        if attach:
            await handle.attach()
        return handle

    async def unsubscribe(self, sub_id: str) -> bool:
        status, body = await self._request("DELETE", f"/subscriptions/{sub_id}")
        if status != 200:
            _raise_for(status, body)
        return bool(body["removed"])

    # -- publications ------------------------------------------------------

    async def publish(self, document: Mapping[str, Any] | str | bytes, *,
                      send_ts_ms: int | None = None) -> str:
        if isinstance(document, (str, bytes)):
            data = document
        else:
            data = json.dumps(document, allow_nan=False)
        if send_ts_ms is None:
            send_ts_ms = int(time.time() * 1000)
        status, body = await self._request("POST", "/publications", data,
                                           {SEND_TS_HEADER: str(send_ts_ms)})
        if status == 202:
            return body["pub_id"]
        if status == 207:
            raise PartialDelivery("publication reached only some matchers",
                                  body.get("pub_id"), status, body.get("multicast"))
        _raise_for(status, body)

    # -- policies ----------------------------------------------------------

    async def install_policy(self, pub_constraints: Iterable[Constraint | Mapping], group: str,
                             policy_id: str | None = None) -> str:
        wire = [c.to_json() if isinstance(c, Constraint) else dict(c) for c in pub_constraints]
        payload: dict[str, Any] = {"pub_constraints": wire, "group": group}
        if policy_id:
            payload["policy_id"] = policy_id
        status, body = await self._request("POST", "/policies", json.dumps(payload))
        if status == 200:
            return body["policy_id"]
        if status == 207:
            raise PartialDelivery("policy reached only some matchers", None, status,
                                  body.get("multicast"))
        _raise_for(status, body)

    async def remove_policy(self, policy_id: str) -> bool:
        status, body = await self._request("DELETE", f"/policies/{policy_id}")
        if status == 200:
            return bool(body["removed"])
        if status == 207:
            raise PartialDelivery("policy removal reached only some matchers", None, status,
                                  body.get("multicast"))
        _raise_for(status, body)

    async def set_permission_filtering(self, enabled: bool) -> None:
        status, body = await self._request("POST", "/admin/permission-filtering",
                                           json.dumps({"enabled": enabled}))
        if status != 200:
            _raise_for(status, body)

    async def cluster(self) -> dict:
        status, body = await self._request("GET", "/cluster")
        if status != 200:
            _raise_for(status, body)
        return body

    async def stats(self) -> dict:
        status, body = await self._request("GET", "/stats")
        if status != 200:
            _raise_for(status, body)
        return body


class SubscriptionHandle:
    """A registered subscription plus its websocket stream.

    Frames are yielded in arrival order. If the stream drops for any reason
    other than an explicit close or displacement, it is re-attached with
    exponential backoff (100 ms doubling up to 5 s); publications matched
    while detached are lost.
    """

    backoff_base = 0.1
    backoff_cap = 5.0

    def __init__(self, client: BrokerClient, sub_id: str, matcher_id: int, buffer: int = 0):
        self.client = client
        self.sub_id = sub_id
        self.matcher_id = matcher_id
        self.queue: asyncio.Queue[Envelope | None] = asyncio.Queue(buffer)
        self.reconnects = 0
        self.close_code: int | None = None
        self._ws: aiohttp.ClientWebSocketResponse | None = None
        self._reader: asyncio.Task | None = None
        self._closing = False
        self._attached = asyncio.Event()

    def _ws_url(self) -> str:
        base = self.client.base_url.replace("http", "ws", 1)
        return f"{base}/ws?sub={self.sub_id}&matcher={self.matcher_id}"

    async def _connect(self) -> aiohttp.ClientWebSocketResponse:
        try:
            return await self.client.session.ws_connect(
                self._ws_url(), headers=self.client._headers(), heartbeat=None)
        except aiohttp.WSServerHandshakeError as exc:
            _raise_for(exc.status, {"error": exc.message})
        except (aiohttp.ClientError, asyncio.TimeoutError) as exc:
            raise Unavailable(f"websocket attach failed: {exc}") from exc

    async def attach(self) -> None:
        self._ws = await self._connect()
        self._attached.set()
        if self._reader is None or self._reader.done():
            self._reader = asyncio.create_task(self._read_loop())

    async def _read_loop(self) -> None:
        delay = self.backoff_base
        while True:
            ws = self._ws
            async for msg in ws:
                if msg.type == aiohttp.WSMsgType.TEXT:
                    await self.queue.put(Envelope.from_frame(msg.data))
                elif msg.type == aiohttp.WSMsgType.ERROR:
                    break
            self.close_code = ws.close_code
            self._attached.clear()
            if self._closing or ws.close_code in (CLOSE_DISPLACED, aiohttp.WSCloseCode.OK):
                break
            # unexpected drop: re-attach with backoff
            while not self._closing:
                await asyncio.sleep(delay)
                delay = min(delay * 2, self.backoff_cap)
                try:
                    self._ws = await self._connect()
                except Malformed:
                    # subscription gone server-side; nothing to resume
                    self._closing = True
                    break
                except (Unavailable, Unauthenticated) as exc:
                    log.debug("re-attach of %s failed: %s", self.sub_id, exc)
                    continue
                self.reconnects += 1
                self._attached.set()
                delay = self.backoff_base
                break
            if self._closing:
                break
        await self.queue.put(None)

    async def wait_attached(self, timeout: float | None = None) -> None:
        await asyncio.wait_for(self._attached.wait(), timeout)

    async def receive(self, timeout: float | None = None) -> Envelope:
        """Next envelope; raises ``asyncio.TimeoutError`` or ``EOFError``."""
        env = await asyncio.wait_for(self.queue.get(), timeout)
        if env is None:
            self.queue.put_nowait(None)
            raise EOFError("subscription stream closed")
        return env

    def __aiter__(self):
        return self

    async def __anext__(self) -> Envelope:
        try:
            return await self.receive()
        except EOFError:
            raise StopAsyncIteration from None

    async def detach(self) -> None:
        self._closing = True
        if self._ws is not None:
            await self._ws.close()
        if self._reader is not None:
            try:
                await asyncio.wait_for(self._reader, 5)
            except asyncio.TimeoutError:
                self._reader.cancel()

    async def close(self, unsubscribe: bool = True) -> bool | None:
        await self.detach()
        if unsubscribe:
            return await self.client.unsubscribe(self.sub_id)
        return None
