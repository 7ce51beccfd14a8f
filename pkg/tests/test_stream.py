import json
import socket
import threading
import time

import pytest

from helpers import HEADER, write_csv
from twinsync.errors import (
    BrokerClosed,
    DuplicateTopic,
    EmptyInput,
    InvalidInput,
    SinkError,
    UnknownTopic,
    UnsortedInput,
)
from twinsync.stream import (
    DEFAULT_TOPIC,
    PANEL_FILES,
    Broker,
    ReplayConfig,
    StreamMessage,
    TcpSink,
    Topic,
    build_panel_export,
    create_broker,
    load_annotated_messages,
    read_ndjson,
    replay_dataset,
    run_consumer_loop,
    tee,
    write_ndjson,
)


def msg(ts=0.0, vid="V1", **kw):
    return StreamMessage(ts=ts, vehicle_id=vid, lat=41.0 + ts * 1e-4, lon=29.0, **kw)


def full(ts):
    return msg(ts, pred_svr_lat=41.1, pred_svr_lon=29.1, pred_dnn_lat=41.2, pred_dnn_lon=29.2)


# --- broker -----------------------------------------------------------------

def test_publish_poll_round_trip():
    b = create_broker()
    b.create_topic()
    c = b.subscribe(DEFAULT_TOPIC)
    b.publish(DEFAULT_TOPIC, msg(1.5))
    got = c.poll(1.0)
    assert got.ts == 1.5 and got.seq == 1


def test_unknown_and_duplicate_topics():
    b = Broker()
    with pytest.raises(UnknownTopic):
        b.publish("nope", msg())
    with pytest.raises(UnknownTopic):
        b.subscribe("nope")
    b.create_topic("a")
    with pytest.raises(DuplicateTopic):
        b.create_topic("a")


def test_topics_are_isolated():
    b = Broker()
    b.create_topic("a")
    b.create_topic("b")
    ca, cb = b.subscribe("a"), b.subscribe("b")
    b.publish("a", msg(1))
    assert ca.poll(0.1).ts == 1
    assert cb.poll(0.01) is None


def test_sequence_numbers_and_fifo():
    t = Topic("t")
    c = t.subscribe()
    assert [t.publish(msg(k)) for k in range(3)] == [1, 2, 3]
    assert [c.poll(0).ts for _ in range(3)] == [0, 1, 2]


def test_backpressure_blocks_until_poll():
    t = Topic("t", capacity=1)
    c = t.subscribe()
    t.publish(msg(0))
    done = threading.Event()

    def second():
        t.publish(msg(1))
        done.set()

    th = threading.Thread(target=second)
    th.start()
    assert not done.wait(0.1)
    assert c.poll(1).ts == 0
    assert done.wait(1.0)
    th.join()
    assert c.poll(1).ts == 1
    assert t.high_water == 1


def test_publish_timeout_when_full():
    t = Topic("t", capacity=1)
    t.subscribe()
    t.publish(msg(0))
    with pytest.raises(TimeoutError):
        t.publish(msg(1), timeout=0.02)


def test_publish_after_close():
    b = Broker()
    t = b.create_topic("x")
    t.close()
    with pytest.raises(BrokerClosed):
        t.publish(msg())
    b.close()
    with pytest.raises(BrokerClosed):
        b.publish("x", msg())
    with pytest.raises(BrokerClosed):
        b.create_topic("y")


def test_closed_topic_drains_then_raises():
    t = Topic("t")
    c = t.subscribe()
    t.publish(msg(0))
    t.close()
    assert c.poll(0).ts == 0
    with pytest.raises(BrokerClosed):
        c.poll(0)


def test_poll_timeout():
    c = Topic("t").subscribe()
    start = time.monotonic()
    assert c.poll(0.01) is None
    assert time.monotonic() - start >= 0.01


def test_fan_out_and_late_subscriber():
    t = Topic("t")
    a, b = t.subscribe(), t.subscribe()
    for k in range(5):
        t.publish(msg(k))
    assert [a.poll(0).seq for _ in range(5)] == [1, 2, 3, 4, 5]
    assert [b.poll(0).seq for _ in range(5)] == [1, 2, 3, 4, 5]
    # fully consumed messages move to the retained history
    assert len(t) == 0 and len(t.retained) == 5


def test_closed_consumer_releases_backlog():
    t = Topic("t", capacity=2)
    fast, slow = t.subscribe(), t.subscribe()
    t.publish(msg(0))
    t.publish(msg(1))
    fast.poll(0), fast.poll(0)
    slow.close()
    t.publish(msg(2), timeout=0.5)
    with pytest.raises(BrokerClosed):
        slow.poll(0)


def test_invalid_capacity():
    with pytest.raises(InvalidInput):
        Topic("t", capacity=0)


# --- replay -----------------------------------------------------------------

def test_replay_preserves_gaps():
    t = Topic("t")
    t.subscribe()
    summary = replay_dataset(t, [msg(0), msg(1), msg(3)], ReplayConfig(time_scale=0.05))
    g = summary.gaps()
    assert g[0] == pytest.approx(0.05, abs=0.01)
    assert g[1] == pytest.approx(0.10, abs=0.01)
    assert t.closed


@pytest.mark.slow
def test_replay_real_time_waits():
    t = Topic("t")
    t.subscribe()
    g = replay_dataset(t, [msg(0), msg(1), msg(3)], ReplayConfig(time_scale=1.0)).gaps()
    assert g[0] == pytest.approx(1.0, abs=0.01)
    assert g[1] == pytest.approx(2.0, abs=0.01)


def test_replay_fast_mode_delivers_all():
    t = Topic("t", capacity=64)
    c = t.subscribe()
    got = []
    th = threading.Thread(target=lambda: run_consumer_loop(c, got.append))
    th.start()
    start = time.monotonic()
    summary = replay_dataset(t, [msg(k * 0.5) for k in range(1000)], ReplayConfig(time_scale=0))
    th.join(5)
    assert time.monotonic() - start < 1.0
    assert summary.count == 1000
    assert [m.seq for m in got] == list(range(1, 1001))


def test_replay_rejects_unsorted():
    t = Topic("t")
    with pytest.raises(UnsortedInput):
        replay_dataset(t, [msg(5), msg(2)], ReplayConfig(time_scale=0))
    assert not t.closed


def test_replay_max_messages():
    t = Topic("t")
    c = t.subscribe()
    s = replay_dataset(t, [msg(k) for k in range(10)], ReplayConfig(0, max_messages=4))
    assert s.count == 4
    assert run_consumer_loop(c, lambda m: None) == 4


@pytest.mark.parametrize("kwargs", [{"time_scale": -1}, {"time_scale": float("inf")},
                                    {"max_messages": -1}])
def test_replay_config_validation(kwargs):
    with pytest.raises(InvalidInput):
        ReplayConfig(**kwargs)


# --- consumer loop ----------------------------------------------------------

def test_consumer_loop_counts():
    t = Topic("t")
    c = t.subscribe()
    for k in range(5):
        t.publish(msg(k))
    t.close()
    assert run_consumer_loop(c, lambda m: None) == 5


def test_consumer_loop_fail_fast():
    t = Topic("t")
    c = t.subscribe()
    for k in range(5):
        t.publish(msg(k))
    t.close()
    seen = []

    def sink(m):
        if m.seq == 3:
            raise RuntimeError("boom")
        seen.append(m.seq)

    with pytest.raises(SinkError) as exc:
        run_consumer_loop(c, sink)
    assert exc.value.seq == 3
    assert "3" in str(exc.value)
    assert seen == [1, 2]


def test_consumer_loop_closed_empty():
    t = Topic("t")
    c = t.subscribe()
    t.close()
    assert run_consumer_loop(c, lambda m: None) == 0


def test_tee_feeds_every_sink():
    a, b = [], []
    tee(a.append, b.append)(msg(1))
    assert len(a) == len(b) == 1


def test_tcp_sink_sends_ndjson():
    server = socket.socket()
    server.bind(("127.0.0.1", 0))
    server.listen(1)
    port = server.getsockname()[1]
    received = []

    def serve():
        conn, _ = server.accept()
        with conn:
            buf = b""
            while chunk := conn.recv(4096):
                buf += chunk
            received.extend(buf.decode().splitlines())

    th = threading.Thread(target=serve)
    th.start()
    sink = TcpSink.from_spec(f"127.0.0.1:{port}")
    sink(msg(1, seq=1))
    sink(msg(2, seq=2))
    sink.close()
    th.join(2)
    server.close()
    assert [json.loads(line)["seq"] for line in received] == [1, 2]


@pytest.mark.parametrize("spec", ["localhost", ":80", "host:abc"])
def test_tcp_sink_bad_spec(spec):
    with pytest.raises(InvalidInput):
        TcpSink.from_spec(spec)


# --- panels and files -------------------------------------------------------

def test_panels_full_messages(tmp_path):
    export = build_panel_export([full(k) for k in range(3)])
    for panel in PANEL_FILES:
        assert len(getattr(export, panel)) == 3
    assert {row[2] for row in export.geomap_points} == {"actual+svr+dnn"}
    paths = export.write(tmp_path)
    for panel, (fname, header) in PANEL_FILES.items():
        lines = paths[panel].read_text().splitlines()
        assert lines[0] == ",".join(header)
        assert len(lines) == 4


def test_panels_skip_missing_predictions():
    msgs = [full(0), msg(1, pred_svr_lat=41.1, pred_svr_lon=29.1), full(2)]
    export = build_panel_export(msgs)
    assert len(export.dnn_track) == 2
    assert len(export.svr_track) == 3
    assert [row[2] for row in export.geomap_points] == ["actual+svr+dnn", "actual+svr",
                                                        "actual+svr+dnn"]


def test_panels_empty():
    with pytest.raises(EmptyInput):
        build_panel_export([])


def test_message_json_round_trip_with_nulls():
    m = msg(3.25, seq=9, pred_svr_lat=41.5, pred_svr_lon=29.5)
    doc = json.loads(m.to_json())
    assert doc["pred_dnn_lat"] is None
    assert StreamMessage.from_json(m.to_json()) == m


def test_message_missing_field():
    with pytest.raises(InvalidInput):
        StreamMessage.from_dict({"ts": 1, "lat": 2, "lon": 3})


def test_ndjson_file_round_trip(tmp_path):
    msgs = [full(0), msg(1), msg(2, pred_dnn_lat=1.0, pred_dnn_lon=2.0)]
    write_ndjson(msgs, tmp_path / "s.ndjson")
    assert read_ndjson(tmp_path / "s.ndjson") == msgs


def test_load_annotated_messages_orders_by_ts(tmp_path):
    header = HEADER + ",pred_svr_lat,pred_svr_lon"
    rows = [
        "V2,20.0,10,5,0,41.0,29.0,41.0,29.0,41.01,29.01",
        "V1,10.0,10,5,0,41.0,29.0,41.0,29.0,,",
    ]
    path = write_csv(tmp_path / "a.csv", rows, header)
    got = load_annotated_messages(path)
    assert [m.vehicle_id for m in got] == ["V1", "V2"]
    assert got[0].pred_svr_lat is None and got[1].pred_svr_lat == 41.01
    assert got[0].pred_dnn_lat is None
