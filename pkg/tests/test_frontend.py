import asyncio
import json

import aiohttp
import pytest
from aiohttp import web

from cbroker.auth import AUTH_HEADER
from cbroker.config import FrontendConfig
from cbroker.frontend import start_frontend
from cbroker.matcher import CLOSE_DISPLACED
from cbroker.matching import Constraint, Op, new_id, partition_of

from conftest import ident

ALICE, BOB = ident("alice"), ident("bob")
LAT_RANGE = [{"key": "lat", "op": "gt", "val": 50.0}, {"key": "lat", "op": "lt", "val": 60.0}]
GPS = '{"id": "truck-abc", "lat": 51.0504, "lon": 13.7373}'


@pytest.fixture
async def http():
    async with aiohttp.ClientSession() as s:
        yield s


async def post(http, url, path, body, auth=ALICE):
    data = body if isinstance(body, str) else json.dumps(body)
    async with http.post(url + path, data=data, headers={AUTH_HEADER: auth}) as r:
        return r.status, await r.json()


async def ws_via_lb(http, lb, auth, sub_id, matcher_id):
    return await http.ws_connect(f"{lb.replace('http', 'ws', 1)}/ws?sub={sub_id}&matcher={matcher_id}",
                                 headers={AUTH_HEADER: auth})


def spread_constraints(n):
    """One constraint list per partition of an n-matcher cluster."""
    found, v = {}, 0.0
    while len(found) < n:
        cs = [{"key": "lat", "op": "gt", "val": v}]
        found.setdefault(partition_of([Constraint("lat", Op.GT, v)], n), cs)
        v += 1.0
    return [found[i] for i in range(n)]


async def test_single_matcher_routing(local_cluster, http):
    c = await local_cluster(1)
    status, body = await post(http, c.lb_url, "/subscriptions", {"constraints": LAT_RANGE})
    assert status == 200 and body["matcher_id"] == 0 and len(body["sub_id"]) == 32
    async with http.get(c.lb_url + "/cluster") as r:
        doc = await r.json()
    assert doc == {"count": 1, "matchers": [{"id": 0, "address": c.urls[0]}]}


async def test_routing_is_deterministic_and_matches_oracle(local_cluster, http):
    c = await local_cluster(8)
    ids = []
    for auth in (ALICE, BOB, ALICE):
        status, body = await post(http, c.lb_url, "/subscriptions",
                                  {"constraints": list(reversed(LAT_RANGE))}, auth)
        assert status == 200
        ids.append(body)
    assert {b["matcher_id"] for b in ids} == {3}
    assert len({b["sub_id"] for b in ids}) == 3
    assert c.services[3].store.total_count == 3
    assert sum(s.store.total_count for s in c.services) == 3


async def test_subscribe_validation_passthrough(local_cluster, http):
    c = await local_cluster(2)
    status, _ = await post(http, c.lb_url, "/subscriptions",
                           {"constraints": [{"key": "a", "op": "between", "val": 1}]})
    assert status == 400
    async with http.post(c.lb_url + "/subscriptions", json={"constraints": []}) as r:
        assert r.status == 401


async def test_subscribe_unreachable_matcher_is_502(local_cluster, http):
    c = await local_cluster(1, timeout_ms=500)
    await c.stop_matcher(0)
    status, _ = await post(http, c.lb_url, "/subscriptions", {"constraints": LAT_RANGE})
    assert status == 502


async def test_unsubscribe_broadcast(local_cluster, http):
    c = await local_cluster(4)
    _, body = await post(http, c.lb_url, "/subscriptions", {"constraints": LAT_RANGE})
    sid = body["sub_id"]
    for auth, expected in ((BOB, False), (ALICE, True), (ALICE, False)):
        async with http.delete(c.lb_url + f"/subscriptions/{sid}", headers={AUTH_HEADER: auth}) as r:
            assert r.status == 200 and (await r.json())["removed"] is expected
    async with http.delete(c.lb_url + f"/subscriptions/{new_id()}", headers={AUTH_HEADER: ALICE}) as r:
        assert (await r.json())["removed"] is False


async def test_publish_multicast_and_pub_id(local_cluster, http):
    c = await local_cluster(4)
    sockets = []
    for i, cs in enumerate(spread_constraints(4)):
        auth = ident(f"s{i}")
        _, body = await post(http, c.lb_url, "/subscriptions", {"constraints": cs}, auth)
        assert body["matcher_id"] == i
        sockets.append(await ws_via_lb(http, c.lb_url, auth, body["sub_id"], i))
    status, body = await post(http, c.lb_url, "/publications", '{"lat": 1000.0}')
    assert status == 202
    assert [m["matcher_id"] for m in body["multicast"]] == [0, 1, 2, 3]
    assert {m["status"] for m in body["multicast"]} == {"ok"}
    ids = {json.loads((await ws.receive(timeout=5)).data)["pub_id"] for ws in sockets}
    assert ids == {body["pub_id"]}
    assert all(s.counters["received_pubs"] == 1 for s in c.services)
    for ws in sockets:
        await ws.close()


async def test_publish_rejects_non_object(local_cluster, http):
    c = await local_cluster(2)
    for bad in ("[1]", '{"a": NaN}', "{"):
        status, _ = await post(http, c.lb_url, "/publications", bad)
        assert status == 400


async def _silent_server():
    """Accepts TCP connections and never answers."""
    conns = []

    async def on_conn(reader, writer):
        conns.append(writer)
        await reader.read()

    server = await asyncio.start_server(on_conn, "127.0.0.1", 0)
    return server, f"http://127.0.0.1:{server.sockets[0].getsockname()[1]}"


async def test_partial_multicast_timeout(local_cluster, http):
    server, hung = await _silent_server()
    base = await local_cluster(3)
    urls = base.urls[:2] + [hung] + base.urls[2:]
    fe, runner, lb = await start_frontend(FrontendConfig(matchers=urls, timeout_ms=300))
    try:
        # partition 0 lives on a healthy matcher
        _, sub = await post(http, lb, "/subscriptions", {"constraints": spread_constraints(4)[0]})
        assert sub["matcher_id"] == 0
        ws = await ws_via_lb(http, lb, ALICE, sub["sub_id"], sub["matcher_id"])
        status, body = await post(http, lb, "/publications", '{"lat": 1000.0}')
        assert status == 207
        by_id = {m["matcher_id"]: m["status"] for m in body["multicast"]}
        assert by_id == {0: "ok", 1: "ok", 2: "timeout", 3: "ok"}
        env = json.loads((await ws.receive(timeout=5)).data)
        assert env["pub_id"] == body["pub_id"]
        await ws.close()
    finally:
        await runner.cleanup()
        server.close()


async def test_partial_and_total_refusal(local_cluster, http):
    c = await local_cluster(2, timeout_ms=500)
    await c.stop_matcher(1)
    status, body = await post(http, c.lb_url, "/publications", GPS)
    assert status == 207
    assert [m["status"] for m in body["multicast"]] == ["ok", "refused"]
    await c.stop_matcher(0)
    status, body = await post(http, c.lb_url, "/publications", GPS)
    assert status == 503
    async with http.get(c.lb_url + "/stats") as r:
        assert [m.get("error") for m in (await r.json())["matchers"]] == ["refused", "refused"]


async def test_policy_broadcast(local_cluster, http):
    c = await local_cluster(4)
    publisher = ident("publisher")
    policy = {"pub_constraints": [{"key": "id", "op": "eq", "val": "truck-bcd"}], "group": "A"}
    status, body = await post(http, c.lb_url, "/policies", policy, publisher)
    assert status == 200
    assert all(s.store.policy_count == 1 for s in c.services)
    async with http.get(c.lb_url + "/stats") as r:
        assert [m["policies"] for m in (await r.json())["matchers"]] == [1, 1, 1, 1]
    status, _ = await post(http, c.lb_url, "/policies", {"pub_constraints": [{"key": "id"}], "group": "A"})
    assert status == 400
    async with http.delete(c.lb_url + f"/policies/{body['policy_id']}", headers={AUTH_HEADER: BOB}) as r:
        assert (await r.json())["removed"] is False
    async with http.delete(c.lb_url + f"/policies/{body['policy_id']}",
                           headers={AUTH_HEADER: publisher}) as r:
        assert r.status == 200 and (await r.json())["removed"] is True
    assert all(s.store.policy_count == 0 for s in c.services)


async def test_toggle_broadcast(local_cluster, http):
    c = await local_cluster(3)
    status, _ = await post(http, c.lb_url, "/admin/permission-filtering", {"enabled": False})
    assert status == 200
    assert not any(s.permission_filtering for s in c.services)
    status, _ = await post(http, c.lb_url, "/admin/permission-filtering", {"enabled": 1})
    assert status == 400


async def test_ws_proxy_errors(local_cluster, http):
    c = await local_cluster(2)
    cs = spread_constraints(2)
    _, sub = await post(http, c.lb_url, "/subscriptions", {"constraints": cs[0]})
    assert sub["matcher_id"] == 0
    for auth, matcher, code in ((ALICE, 1, 404), (BOB, 0, 401), (ALICE, 7, 400), (ALICE, "x", 400)):
        with pytest.raises(aiohttp.WSServerHandshakeError) as e:
            await ws_via_lb(http, c.lb_url, auth, sub["sub_id"], matcher)
        assert e.value.status == code
    await c.stop_matcher(0)
    with pytest.raises(aiohttp.WSServerHandshakeError) as e:
        await ws_via_lb(http, c.lb_url, ALICE, sub["sub_id"], 0)
    assert e.value.status == 502


async def test_ws_close_code_propagates(local_cluster, http):
    c = await local_cluster(1)
    _, sub = await post(http, c.lb_url, "/subscriptions", {"constraints": LAT_RANGE})
    first = await ws_via_lb(http, c.lb_url, ALICE, sub["sub_id"], 0)
    second = await ws_via_lb(http, c.lb_url, ALICE, sub["sub_id"], 0)
    msg = await first.receive(timeout=5)
    assert msg.type in (aiohttp.WSMsgType.CLOSE, aiohttp.WSMsgType.CLOSED)
    assert first.close_code == CLOSE_DISPLACED
    await second.close()


async def _frame_source(count):
    """Stand-in matcher whose /ws emits numbered frames."""
    async def handler(request):
        ws = web.WebSocketResponse()
        await ws.prepare(request)
        for i in range(count):
            await ws.send_str(json.dumps({"seq": i, "pad": "x" * (i % 37)}))
        await ws.close()
        return ws

    app = web.Application()
    app.router.add_get("/ws", handler)
    runner = web.AppRunner(app, access_log=None)
    await runner.setup()
    site = web.TCPSite(runner, "127.0.0.1", 0)
    await site.start()
    return runner, f"http://127.0.0.1:{site._server.sockets[0].getsockname()[1]}"


async def _collect(ws):
    out = []
    async for msg in ws:
        out.append(msg.data)
    return out


async def test_relay_order_and_transparency(http):
    runner, url = await _frame_source(10_000)
    fe, fe_runner, lb = await start_frontend(FrontendConfig(matchers=[url]))
    try:
        direct = await _collect(await http.ws_connect(url.replace("http", "ws") + "/ws"))
        relayed = await _collect(await ws_via_lb(http, lb, ALICE, new_id(), 0))
        assert [json.loads(f)["seq"] for f in relayed] == list(range(10_000))
        assert relayed == direct
    finally:
        await fe_runner.cleanup()
        await runner.cleanup()
