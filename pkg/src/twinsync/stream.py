"""In-process topic broker plus the replay producer and consumer loop.

Each topic is a bounded log. Every subscribed consumer has its own cursor and
sees every message exactly once, in publish order (broadcast semantics). A
message leaves the log once all current subscribers have read it; publishing
blocks while the log is full, so a slow consumer throttles the producer.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional

from .errors import (
    BrokerClosed,
    DuplicateTopic,
    EmptyInput,
    InvalidInput,
    SinkError,
    UnknownTopic,
    UnsortedInput,
)
from .geo_data import read_csv_rows

DEFAULT_TOPIC = "my-stream"
PREDICTION_COLUMNS = ("pred_svr_lat", "pred_svr_lon", "pred_dnn_lat", "pred_dnn_lon")
MESSAGE_FIELDS = ("ts", "vehicle_id", "lat", "lon", *PREDICTION_COLUMNS, "seq")


@dataclass(frozen=True)
class StreamMessage:
    ts: float
    vehicle_id: str
    lat: float
    lon: float
    pred_svr_lat: Optional[float] = None
    pred_svr_lon: Optional[float] = None
    pred_dnn_lat: Optional[float] = None
    pred_dnn_lon: Optional[float] = None
    seq: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in MESSAGE_FIELDS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "StreamMessage":
        missing = [k for k in ("ts", "vehicle_id", "lat", "lon") if k not in d]
        if missing:
            raise InvalidInput(f"message lacks fields {missing}")

        def opt(key):
            v = d.get(key)
            return None if v is None else float(v)

        return cls(ts=float(d["ts"]), vehicle_id=str(d["vehicle_id"]),
                   lat=float(d["lat"]), lon=float(d["lon"]),
                   pred_svr_lat=opt("pred_svr_lat"), pred_svr_lon=opt("pred_svr_lon"),
                   pred_dnn_lat=opt("pred_dnn_lat"), pred_dnn_lon=opt("pred_dnn_lon"),
                   seq=int(d.get("seq", 0)))

    @classmethod
    def from_json(cls, line: str) -> "StreamMessage":
        return cls.from_dict(json.loads(line))


class Topic:
    def __init__(self, name: str, capacity: int = 1024, retain: int = 10_000):
        if capacity < 1:
            raise InvalidInput(f"topic capacity must be >= 1, got {capacity}")
        self.name = name
        self.capacity = capacity
        self.retained = deque(maxlen=retain)
        self.high_water = 0
        self._cond = threading.Condition()
        self._log = deque()
        self._base = 0  # offset of _log[0]
        self._cursors = {}
        self._next_seq = 1
        self._ids = itertools.count(1)
        self._closed = False

    @property
    def closed(self) -> bool:
        return self._closed

    def __len__(self):
        return len(self._log)

    def publish(self, msg: StreamMessage, timeout: float | None = None) -> int:
        """Append ``msg`` with the next sequence number, blocking while full."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while len(self._log) >= self.capacity and not self._closed:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise TimeoutError(f"topic {self.name!r} stayed full for {timeout}s")
                self._cond.wait(remaining)
            if self._closed:
                raise BrokerClosed(f"topic {self.name!r} is closed")
            seq = self._next_seq
            self._next_seq += 1
            self._log.append(replace(msg, seq=seq))
            self.high_water = max(self.high_water, len(self._log))
            self._trim()
            self._cond.notify_all()
            return seq

    def subscribe(self) -> "Consumer":
        with self._cond:
            if self._closed and not self._log:
                raise BrokerClosed(f"topic {self.name!r} is closed")
            cid = next(self._ids)
            # new subscribers start at the oldest message still held
            self._cursors[cid] = self._base
            return Consumer(self, cid)

    def _unsubscribe(self, cid: int) -> None:
        with self._cond:
            self._cursors.pop(cid, None)
            self._trim()
            self._cond.notify_all()

    def _trim(self) -> None:
        if not self._cursors:
            return
        low = min(self._cursors.values())
        while self._base < low and self._log:
            self.retained.append(self._log.popleft())
            self._base += 1

    def _poll(self, cid: int, timeout: float | None) -> StreamMessage | None:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                if cid not in self._cursors:
                    raise BrokerClosed("consumer is closed")
                pos = self._cursors[cid]
                if pos < self._base + len(self._log):
                    msg = self._log[pos - self._base]
                    self._cursors[cid] = pos + 1
                    self._trim()
                    self._cond.notify_all()
                    return msg
                if self._closed:
                    raise BrokerClosed(f"topic {self.name!r} is closed and drained")
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._cond.wait(remaining)

    def close(self) -> None:
        """Stop accepting messages; consumers may still drain what is buffered."""
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class Consumer:
    def __init__(self, topic: Topic, cid: int):
        self.topic = topic
        self.id = cid

    def poll(self, timeout: float | None = None) -> StreamMessage | None:
        return self.topic._poll(self.id, timeout)

    def close(self) -> None:
        self.topic._unsubscribe(self.id)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class Broker:
    def __init__(self, default_capacity: int = 1024, retain: int = 10_000):
        self.default_capacity = default_capacity
        self.retain = retain
        self._topics: dict[str, Topic] = {}
        self._lock = threading.Lock()
        self._closed = False

    def create_topic(self, name: str = DEFAULT_TOPIC, capacity: int | None = None) -> Topic:
        with self._lock:
            if self._closed:
                raise BrokerClosed("broker is closed")
            if name in self._topics:
                raise DuplicateTopic(f"topic {name!r} already exists")
            topic = Topic(name, capacity or self.default_capacity, self.retain)
            self._topics[name] = topic
            return topic

    def topic(self, name: str) -> Topic:
        with self._lock:
            try:
                return self._topics[name]
            except KeyError:
                raise UnknownTopic(f"no topic named {name!r}") from None

    def publish(self, name: str, msg: StreamMessage, timeout: float | None = None) -> int:
        if self._closed:
            raise BrokerClosed("broker is closed")
        return self.topic(name).publish(msg, timeout)

    def subscribe(self, name: str) -> Consumer:
        if self._closed:
            raise BrokerClosed("broker is closed")
        return self.topic(name).subscribe()

    def close(self) -> None:
        with self._lock:
            self._closed = True
            topics = list(self._topics.values())
        for t in topics:
            t.close()


def create_broker(default_capacity: int = 1024, retain: int = 10_000) -> Broker:
    return Broker(default_capacity, retain)


@dataclass(frozen=True)
class ReplayConfig:
    time_scale: float = 1.0
    max_messages: int | None = None

    def __post_init__(self):
        if not (self.time_scale >= 0 and math.isfinite(self.time_scale)):
            raise InvalidInput(f"time_scale must be >= 0, got {self.time_scale}")
        if self.max_messages is not None and self.max_messages < 0:
            raise InvalidInput("max_messages must be >= 0")


@dataclass
class ReplaySummary:
    count: int
    wall_time_s: float
    publish_times: list = field(default_factory=list)

    def gaps(self) -> list:
        t = self.publish_times
        return [b - a for a, b in zip(t, t[1:])]


def replay_dataset(topic: Topic, messages: Iterable[StreamMessage],
                   cfg: ReplayConfig = ReplayConfig(), close: bool = True,
                   clock: Callable[[], float] = time.monotonic) -> ReplaySummary:
    """Publish ``messages`` spaced by their original timestamp gaps.

    Message k+1 goes out no earlier than ``(ts[k+1] - ts[k]) * time_scale``
    seconds after message k was published. Record timestamps are never used as
    wall-clock targets.
    """
    msgs = list(messages)
    if cfg.max_messages is not None:
        msgs = msgs[:cfg.max_messages]
    for k in range(1, len(msgs)):
        if msgs[k].ts < msgs[k - 1].ts:
            raise UnsortedInput(
                f"message {k} has ts {msgs[k].ts} before previous ts {msgs[k - 1].ts}")
    start = clock()
    times = []
    try:
        for k, msg in enumerate(msgs):
            if k and cfg.time_scale > 0:
                target = times[-1] + (msg.ts - msgs[k - 1].ts) * cfg.time_scale
                while True:
                    remaining = target - clock()
                    if remaining <= 0:
                        break
                    # sleep most of the way, then spin briefly for accuracy
                    time.sleep(remaining - 0.001 if remaining > 0.002 else 0)
            times.append(clock())
            topic.publish(msg)
    finally:
        if close:
            topic.close()
    return ReplaySummary(count=len(msgs), wall_time_s=clock() - start, publish_times=times)


def run_consumer_loop(consumer: Consumer, sink: Callable[[StreamMessage], object],
                      poll_timeout: float = 0.05) -> int:
    """Feed every message to ``sink`` until the topic is closed and drained."""
    count = 0
    while True:
        try:
            msg = consumer.poll(poll_timeout)
        except BrokerClosed:
            return count
        if msg is None:
            continue
        try:
            sink(msg)
        except Exception as exc:
            raise SinkError(msg.seq, exc) from exc
        count += 1


class TcpSink:
    """Forward each message as one NDJSON line over TCP."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.address = (host, int(port))
        self.timeout = timeout
        self._sock = None

    @classmethod
    def from_spec(cls, spec: str) -> "TcpSink":
        host, _, port = spec.rpartition(":")
        if not host or not port.isdigit():
            raise InvalidInput(f"expected HOST:PORT, got {spec!r}")
        return cls(host, int(port))

    def __call__(self, msg: StreamMessage) -> None:
        if self._sock is None:
            self._sock = socket.create_connection(self.address, timeout=self.timeout)
        self._sock.sendall((msg.to_json() + "\n").encode("utf-8"))

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None


def tee(*sinks):
    def fan(msg):
        for s in sinks:
            s(msg)
    return fan


# --- panels -----------------------------------------------------------------

PANEL_FILES = {
    "actual_track": ("panel_actual.csv", ("ts", "vehicle_id", "lat", "lon")),
    "svr_track": ("panel_svr.csv", ("ts", "vehicle_id", "lat", "lon")),
    "dnn_track": ("panel_dnn.csv", ("ts", "vehicle_id", "lat", "lon")),
    "geomap_points": ("panel_geomap.csv", ("ts", "vehicle_id", "label", "lat", "lon",
                                           "svr_lat", "svr_lon", "dnn_lat", "dnn_lon")),
    "timestamp_series": ("panel_timestamps.csv", ("seq", "ts")),
}


@dataclass
class PanelExport:
    actual_track: list
    svr_track: list
    dnn_track: list
    geomap_points: list
    timestamp_series: list

    def write(self, directory) -> dict:
        """Write the five panel CSVs; returns ``{panel: path}``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        paths = {}
        for panel, (fname, header) in PANEL_FILES.items():
            path = out / fname
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                for row in getattr(self, panel):
                    w.writerow(["" if v is None else v for v in row])
            paths[panel] = path
        return paths


def _label(m: StreamMessage) -> str:
    parts = ["actual"]
    if m.pred_svr_lat is not None and m.pred_svr_lon is not None:
        parts.append("svr")
    if m.pred_dnn_lat is not None and m.pred_dnn_lon is not None:
        parts.append("dnn")
    return "+".join(parts)


def build_panel_export(messages) -> PanelExport:
    msgs = list(messages)
    if not msgs:
        raise EmptyInput("no messages to export")
    actual, svr, dnn, geo, stamps = [], [], [], [], []
    for m in msgs:
        actual.append((m.ts, m.vehicle_id, m.lat, m.lon))
        if m.pred_svr_lat is not None and m.pred_svr_lon is not None:
            svr.append((m.ts, m.vehicle_id, m.pred_svr_lat, m.pred_svr_lon))
        if m.pred_dnn_lat is not None and m.pred_dnn_lon is not None:
            dnn.append((m.ts, m.vehicle_id, m.pred_dnn_lat, m.pred_dnn_lon))
        geo.append((m.ts, m.vehicle_id, _label(m), m.lat, m.lon, m.pred_svr_lat,
                    m.pred_svr_lon, m.pred_dnn_lat, m.pred_dnn_lon))
        stamps.append((m.seq, m.ts))
    return PanelExport(actual, svr, dnn, geo, stamps)


# --- files ------------------------------------------------------------------

def write_ndjson(messages, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in messages:
            fh.write(m.to_json() + "\n")


def read_ndjson(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [StreamMessage.from_json(line) for line in fh if line.strip()]


def load_annotated_messages(path) -> list:
    """Read an annotated trajectory CSV into messages ordered by timestamp.

    Prediction columns are optional; blank cells become ``None``.
    """
    msgs = []
    for _, row in read_csv_rows(path):
        preds = {}
        for col in PREDICTION_COLUMNS:
            raw = (row.get(col) or "").strip()
            preds[col] = float(raw) if raw else None
        msgs.append(StreamMessage(ts=float(row["timestamp"]), vehicle_id=row["vehicle_id"],
                                  lat=float(row["lat"]), lon=float(row["lon"]), **preds))
    # stable: equal timestamps keep file order
    msgs.sort(key=lambda m: m.ts)
    return msgs
