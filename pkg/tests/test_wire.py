from __future__ import annotations

import base64
import json
import socket

import pytest

from flowforge.broker import Broker
from flowforge.errors import QueueFull, UnknownQueue
from flowforge.wire import BrokerClient, BrokerServer


@pytest.fixture
def server():
    broker = Broker()
    broker.declare_queue("q", capacity=4)
    srv = BrokerServer(broker, port=0)
    srv.start()
    yield srv
    srv.stop()
    broker.close()


def _raw_request(addr: str, lines: list[dict]) -> list[dict]:
    host, _, port = addr.rpartition(":")
    out = []
    with socket.create_connection((host, int(port)), timeout=5) as s:
        f = s.makefile("rwb")
        for req in lines:
            f.write(json.dumps(req).encode() + b"\n")
            f.flush()
            out.append(json.loads(f.readline()))
    return out


def test_publish_consume_ack_over_wire(server):
    payload = base64.b64encode(b"hello").decode()
    resps = _raw_request(server.addr, [
        {"op": "publish", "queue": "q", "payload_b64": payload, "headers": {"run_id": "r"}},
        {"op": "consume", "queue": "q", "lease_s": 30},
        {"op": "depths"},
    ])
    assert resps[0]["ok"] and "msg_id" in resps[0]
    msg = resps[1]["message"]
    assert base64.b64decode(msg["payload_b64"]) == b"hello"
    assert msg["attempt"] == 1
    assert resps[2]["depths"]["q"] == {"ready": 0, "in_flight": 1}
    ack = _raw_request(server.addr, [{"op": "ack", "msg_id": msg["msg_id"]}])
    assert ack[0]["ok"]


def test_error_envelope(server):
    resps = _raw_request(server.addr, [
        {"op": "publish", "queue": "ghost", "payload_b64": ""},
        {"op": "bogus"},
        {"op": "ack", "msg_id": "never-leased"},
    ])
    assert resps[0] == {"ok": False, "error": "UNKNOWN_QUEUE", "detail": "ghost"}
    assert resps[1]["error"] == "UNKNOWN_OP"
    assert resps[2]["error"] == "UNKNOWN_MESSAGE"


def test_client_roundtrip_and_errors(server):
    c = BrokerClient(server.addr)
    c.declare_queue("w", capacity=2)
    c.publish("w", b"x", {"k": "v"})
    m = c.consume("w", lease_s=30)
    assert m.payload == b"x" and m.headers == {"k": "v"}
    c.nack(m.msg_id, requeue=True)
    m2 = c.consume("w", lease_s=30)
    assert m2.attempt == 2
    c.ack(m2.msg_id)
    assert c.consume("w", lease_s=1) is None
    assert c.queue_depths()["w"] == (0, 0)
    with pytest.raises(UnknownQueue):
        c.publish("ghost", b"x")
    c.publish("w", b"1")
    c.publish("w", b"2")
    with pytest.raises(QueueFull):
        c.publish("w", b"3")
    c.close()


def test_many_concurrent_connections(server):
    clients = [BrokerClient(server.addr) for _ in range(10)]
    for i, c in enumerate(clients):
        c.publish("q", str(i).encode())
        if i >= 4 - 1:  # capacity 4: drain as we go
            m = c.consume("q", lease_s=5)
            if m:
                c.ack(m.msg_id)
    for c in clients:
        c.close()
