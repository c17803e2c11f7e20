import asyncio
import json

import pytest

from cbroker.client import (
    BrokerClient, Envelope, Malformed, PartialDelivery, Unauthenticated, Unavailable,
)
from cbroker.config import FrontendConfig
from cbroker.frontend import start_frontend
from cbroker.matching import Constraint, Op

from conftest import eventually, ident

LAT_RANGE = [Constraint("lat", Op.GT, 50.0), Constraint("lat", Op.LT, 60.0)]
GPS = {"id": "truck-bcd", "lat": 51.0504, "lon": 13.7373}


@pytest.fixture
async def clients():
    made = []

    def make(url, label):
        c = BrokerClient(url, ident(label), timeout=5)
        made.append(c)
        return c

    yield make
    for c in made:
        await c.close()


async def test_smoke_and_close(local_cluster, clients):
    c = await local_cluster(2)
    sub, pub = clients(c.lb_url, "sub"), clients(c.lb_url, "pub")
    h = await sub.subscribe(LAT_RANGE)
    assert h.matcher_id in (0, 1)
    raw = '{"id":"truck-abc",  "lat":51.0504,"lon":13.7373}'
    pid = await pub.publish(raw)
    env = await h.receive(timeout=5)
    assert (env.sub_id, env.pub_id) == (h.sub_id, pid)
    assert env.publication_raw == raw
    assert env.send_ts_ms is not None and env.received_ms >= env.send_ts_ms
    assert await h.close() is True
    await pub.publish(GPS)
    with pytest.raises(EOFError):
        await h.receive(timeout=1)
    assert await sub.unsubscribe(h.sub_id) is False


async def test_publish_errors(local_cluster, clients):
    c = await local_cluster(1)
    pub = clients(c.lb_url, "pub")
    with pytest.raises(Malformed):
        await pub.publish("[1, 2, 3]")
    with pytest.raises(Malformed):
        await pub.subscribe([{"key": "a", "op": "between", "val": 1}])
    anon = BrokerClient(c.lb_url)
    with pytest.raises(Unauthenticated):
        await anon.subscribe(LAT_RANGE)
    await anon.close()
    with pytest.raises(ValueError):
        BrokerClient(c.lb_url, "XYZ")
    down = BrokerClient("http://127.0.0.1:9", ident("x"), timeout=1)
    with pytest.raises(Unavailable):
        await down.publish(GPS)
    await down.close()


async def test_partial_delivery(local_cluster, clients):
    c = await local_cluster(2, timeout_ms=500)
    await c.stop_matcher(1)
    with pytest.raises(PartialDelivery) as e:
        await clients(c.lb_url, "pub").publish(GPS)
    assert len(e.value.pub_id) == 32
    assert [m["status"] for m in e.value.detail] == ["ok", "refused"]


async def test_distinct_pub_ids(local_cluster, clients):
    c = await local_cluster(1)
    pub = clients(c.lb_url, "pub")
    ids = [await pub.publish({"n": i}) for i in range(1000)]
    assert len(set(ids)) == 1000


async def test_policy_scenarios(local_cluster, clients):
    # group-B subscriber, plus one with no groups at all
    c = await local_cluster(2, groups={ident("b"): ["B"], ident("a"): ["A"]})
    pub = clients(c.lb_url, "publisher")
    handles = {}
    for label in ("a", "b", "anon"):
        handles[label] = await clients(c.lb_url, label).subscribe(LAT_RANGE)

    async def round_trip():
        pid = await pub.publish(GPS)
        got = set()
        for label, h in handles.items():
            try:
                env = await h.receive(timeout=0.5)
                assert env.pub_id == pid
                got.add(label)
            except asyncio.TimeoutError:
                pass
        return got

    assert await round_trip() == {"a", "b", "anon"}
    wildcard = await pub.install_policy([Constraint("id", Op.EQ, "truck-bcd")], "*")
    assert await round_trip() == {"a", "b", "anon"}
    assert await pub.remove_policy(wildcard)
    group_a = await pub.install_policy([Constraint("id", Op.EQ, "truck-bcd")], "A")
    assert await round_trip() == {"a"}
    assert await clients(c.lb_url, "b").remove_policy(group_a) is False
    assert await pub.remove_policy(group_a)
    assert await round_trip() == {"a", "b", "anon"}
    await pub.set_permission_filtering(False)
    assert (await pub.stats())["matchers"][0]["permission_filtering"] is False
    assert (await pub.cluster())["count"] == 2


async def test_reconnect_after_frontend_restart(local_cluster, clients):
    c = await local_cluster(1)
    sub, pub = clients(c.lb_url, "sub"), clients(c.lb_url, "pub")
    h = await sub.subscribe(LAT_RANGE)
    h.backoff_base = 0.05
    await pub.publish(GPS)
    await h.receive(timeout=5)

    port = int(c.lb_url.rsplit(":", 1)[1])
    await c.fe_runner.cleanup()
    c.fe_runner = None
    assert await eventually(lambda: not h._attached.is_set())
    _, c.fe_runner, url = await start_frontend(FrontendConfig(matchers=c.urls, port=port))
    assert url == c.lb_url
    await h.wait_attached(timeout=10)
    assert h.reconnects == 1
    # the matcher side re-registers the relay before the handshake completes
    assert await eventually(lambda: len(c.services[0].registry) == 1)
    pid = await pub.publish(GPS)
    env = await h.receive(timeout=5)
    assert env.pub_id == pid and env.sub_id == h.sub_id
    await h.close()


async def test_displaced_handle_does_not_reconnect(local_cluster, clients):
    c = await local_cluster(1)
    sub = clients(c.lb_url, "sub")
    h = await sub.subscribe(LAT_RANGE)
    other = await sub.subscribe(LAT_RANGE, sub_id=h.sub_id)
    with pytest.raises(EOFError):
        await h.receive(timeout=5)
    assert h.close_code == 4000 and h.reconnects == 0
    await other.close()


async def test_async_iteration_order(local_cluster, clients):
    c = await local_cluster(1)
    sub, pub = clients(c.lb_url, "sub"), clients(c.lb_url, "pub")
    h = await sub.subscribe([Constraint("n", Op.GE, 0)])
    for i in range(50):
        await pub.publish({"n": i})
    seen = []
    async for env in h:
        seen.append(env.publication["n"])
        if len(seen) == 50:
            break
    assert seen == list(range(50))
    await h.close()


def test_envelope_raw_slice():
    raw = '{"a": "\\"matched_ts\\":", "b": [1,2]}'
    frame = ('{"sub_id":"%s","pub_id":"%s","publication":%s,"matched_ts":5,"send_ts_ms":null}'
             % ("a" * 32, "b" * 32, raw))
    env = Envelope.from_frame(frame)
    assert env.publication_raw == raw
    assert env.publication == json.loads(raw) and env.send_ts_ms is None


async def test_or_by_registration(local_cluster, clients):
    # two subscriptions together receive exactly the union of what each matches
    c = await local_cluster(2)
    sub, pub = clients(c.lb_url, "sub"), clients(c.lb_url, "pub")
    low = await sub.subscribe([Constraint("v", Op.LT, 3.0)])
    high = await sub.subscribe([Constraint("v", Op.GT, 6.0)])
    sent = {}
    for v in range(10):
        sent[await pub.publish({"v": v})] = v
    got = set()
    for h, n in ((low, 3), (high, 3)):
        for _ in range(n):
            got.add(sent[(await h.receive(timeout=5)).pub_id])
    assert got == {0, 1, 2, 7, 8, 9}
    for h in (low, high):
        with pytest.raises(asyncio.TimeoutError):
            await h.receive(timeout=0.2)
        await h.close()
