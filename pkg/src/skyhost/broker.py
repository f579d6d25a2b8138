"""Embedded partitioned log broker.

Topics hold one append-only log per partition with dense offsets from 0 and
per-group committed offsets. Persistence is one log file per partition
(records framed as key_len u32 / key / value_len u32 / value, key_len
0xFFFFFFFF = null) plus an atomically rewritten commits sidecar. The broker
speaks a minimal length-prefixed TCP protocol: CREATE_TOPIC, METADATA,
PRODUCE, FETCH, COMMIT. PRODUCE carries a list of records and METADATA
optionally returns a group's committed offsets.

This is a stand-in for an external streaming cluster; operators talk to it
through the BrokerClient interface so a real-broker adapter can slot in.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import (
    BrokerError,
    ConnectivityError,
    MessageTooLarge,
    OffsetOutOfRange,
    PartitionOutOfRange,
    TopicExists,
    UnknownTopic,
)
from .units import MB

log = logging.getLogger(__name__)

DEFAULT_MAX_MESSAGE_BYTES = 8 * MB
NULL_KEY = 0xFFFFFFFF

_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_I64 = struct.Struct(">q")


@dataclass(frozen=True)
class TopicMetadata:
    name: str
    partitions: int
    end_offsets: tuple[int, ...]
    committed: tuple[int, ...]  # -1 where the group has no commit


class _Partition:
    """One append-only log; offsets are list indices."""

    def __init__(self, log_path: Optional[Path]) -> None:
        self.lock = threading.Lock()
        self.records: list[tuple[Optional[bytes], bytes]] = []
        self._log_path = log_path
        self._file = None
        if log_path is not None:
            self._load(log_path)
            self._file = open(log_path, "ab")

    def _load(self, path: Path) -> None:
        if not path.exists():
            path.touch()
            return
        with open(path, "rb") as fh:
            data = fh.read()
        pos = 0
        valid_end = 0
        n = len(data)
        while pos + 4 <= n:
            (key_len,) = _U32.unpack_from(data, pos)
            pos += 4
            if key_len == NULL_KEY:
                key = None
            else:
                if pos + key_len > n:
                    break
                key = data[pos : pos + key_len]
                pos += key_len
            if pos + 4 > n:
                break
            (value_len,) = _U32.unpack_from(data, pos)
            pos += 4
            if pos + value_len > n:
                break
            self.records.append((key, data[pos : pos + value_len]))
            pos += value_len
            valid_end = pos
        if valid_end < n:
            # torn tail write from an unclean shutdown: drop it before appending
            with open(path, "r+b") as fh:
                fh.truncate(valid_end)

    def append(self, key: Optional[bytes], value: bytes) -> int:
        with self.lock:
            offset = len(self.records)
            self.records.append((key, value))
            if self._file is not None:
                parts = []
                if key is None:
                    parts.append(_U32.pack(NULL_KEY))
                else:
                    parts.append(_U32.pack(len(key)))
                    parts.append(key)
                parts.append(_U32.pack(len(value)))
                parts.append(value)
                self._file.write(b"".join(parts))
                self._file.flush()
            return offset

    def read(self, from_offset: int, max_bytes: int) -> list[tuple[int, Optional[bytes], bytes]]:
        with self.lock:
            end = len(self.records)
            if from_offset > end:
                raise OffsetOutOfRange(f"offset {from_offset} beyond end {end}")
            out = []
            total = 0
            for offset in range(from_offset, end):
                key, value = self.records[offset]
                if out and total + len(value) > max_bytes:
                    break
                out.append((offset, key, value))
                total += len(value)
                if total >= max_bytes:
                    break
            return out

    @property
    def end_offset(self) -> int:
        with self.lock:
            return len(self.records)

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None


class Broker:
    """Thread-safe topic/partition/commit state, optionally persistent."""

    def __init__(
        self,
        data_dir: Optional[str] = None,
        max_message_bytes: int = DEFAULT_MAX_MESSAGE_BYTES,
    ) -> None:
        self.max_message_bytes = max_message_bytes
        self._data_dir = Path(data_dir) if data_dir else None
        self._lock = threading.Lock()
        self._topics: dict[str, list[_Partition]] = {}
        self._commits: dict[tuple[str, str, int], int] = {}
        self._commits_lock = threading.Lock()
        if self._data_dir:
            self._data_dir.mkdir(parents=True, exist_ok=True)
            self._load()

    # persistence --------------------------------------------------------

    def _commits_path(self) -> Path:
        return self._data_dir / "commits.json"

    def _load(self) -> None:
        for topic_dir in sorted(self._data_dir.iterdir()):
            if not topic_dir.is_dir():
                continue
            logs = sorted(topic_dir.glob("*.log"))
            if not logs:
                continue
            partitions = [
                _Partition(topic_dir / f"{index}.log") for index in range(len(logs))
            ]
            self._topics[topic_dir.name] = partitions
        commits_path = self._commits_path()
        if commits_path.exists():
            raw = json.loads(commits_path.read_text())
            for group, topics in raw.items():
                for topic, offsets in topics.items():
                    for partition, offset in offsets.items():
                        self._commits[(group, topic, int(partition))] = offset

    def _persist_commits(self) -> None:
        if self._data_dir is None:
            return
        tree: dict = {}
        for (group, topic, partition), offset in self._commits.items():
            tree.setdefault(group, {}).setdefault(topic, {})[str(partition)] = offset
        tmp = self._commits_path().with_suffix(".tmp")
        tmp.write_text(json.dumps(tree, indent=0, sort_keys=True))
        os.replace(tmp, self._commits_path())

    # topic management ----------------------------------------------------

    def create_topic(self, name: str, partitions: int) -> None:
        if partitions < 1:
            raise BrokerError("partitions must be >= 1")
        if not name or "/" in name or name.startswith("."):
            raise BrokerError(f"invalid topic name {name!r}")
        with self._lock:
            existing = self._topics.get(name)
            if existing is not None:
                if len(existing) == partitions:
                    return  # idempotent create
                raise TopicExists(
                    f"topic {name!r} exists with {len(existing)} partitions"
                )
            if self._data_dir is not None:
                topic_dir = self._data_dir / name
                topic_dir.mkdir(parents=True, exist_ok=True)
                parts = [_Partition(topic_dir / f"{i}.log") for i in range(partitions)]
            else:
                parts = [_Partition(None) for _ in range(partitions)]
            self._topics[name] = parts

    def delete_topic(self, name: str) -> None:
        with self._lock:
            parts = self._topics.pop(name, None)
        if parts is None:
            return
        for p in parts:
            p.close()
        if self._data_dir is not None:
            topic_dir = self._data_dir / name
            for f in topic_dir.glob("*.log"):
                f.unlink(missing_ok=True)
            try:
                topic_dir.rmdir()
            except OSError:
                pass

    def topics(self) -> list[str]:
        with self._lock:
            return sorted(self._topics)

    def _partitions(self, topic: str) -> list[_Partition]:
        with self._lock:
            parts = self._topics.get(topic)
        if parts is None:
            raise UnknownTopic(f"unknown topic {topic!r}")
        return parts

    def metadata(self, topic: str, group: Optional[str] = None) -> TopicMetadata:
        parts = self._partitions(topic)
        ends = tuple(p.end_offset for p in parts)
        if group is None:
            committed = tuple(-1 for _ in parts)
        else:
            with self._commits_lock:
                committed = tuple(
                    self._commits.get((group, topic, i), -1) for i in range(len(parts))
                )
        return TopicMetadata(topic, len(parts), ends, committed)

    # data path -----------------------------------------------------------

    def produce(self, topic: str, partition: int, key: Optional[bytes], value: bytes) -> int:
        return self.produce_many(topic, [(partition, key, value)])[0]

    def produce_many(
        self, topic: str, entries: Sequence[tuple[int, Optional[bytes], bytes]]
    ) -> list[int]:
        parts = self._partitions(topic)
        for partition, key, value in entries:
            if not 0 <= partition < len(parts):
                raise PartitionOutOfRange(
                    f"partition {partition} out of range for {topic!r} "
                    f"({len(parts)} partitions)"
                )
            size = (len(key) if key else 0) + len(value)
            if size > self.max_message_bytes:
                raise MessageTooLarge(
                    f"message of {size} bytes exceeds broker cap "
                    f"{self.max_message_bytes} (topic {topic!r})"
                )
        return [parts[p].append(key, value) for p, key, value in entries]

    def fetch(
        self, topic: str, partition: int, from_offset: int, max_bytes: int
    ) -> list[tuple[int, Optional[bytes], bytes]]:
        parts = self._partitions(topic)
        if not 0 <= partition < len(parts):
            raise PartitionOutOfRange(f"partition {partition} out of range")
        return parts[partition].read(from_offset, max_bytes)

    def commit(self, group: str, topic: str, partition: int, offset: int) -> None:
        parts = self._partitions(topic)
        if not 0 <= partition < len(parts):
            raise PartitionOutOfRange(f"partition {partition} out of range")
        end = parts[partition].end_offset
        if offset > end:
            raise OffsetOutOfRange(f"commit {offset} beyond end offset {end}")
        with self._commits_lock:
            key = (group, topic, partition)
            # commits only advance; a stale commit after retransmission is a no-op
            if offset <= self._commits.get(key, -1):
                return
            self._commits[key] = offset
            self._persist_commits()

    def committed(self, group: str, topic: str) -> dict[int, int]:
        parts = self._partitions(topic)
        with self._commits_lock:
            return {
                i: self._commits[(group, topic, i)]
                for i in range(len(parts))
                if (group, topic, i) in self._commits
            }

    def close(self) -> None:
        with self._lock:
            for parts in self._topics.values():
                for p in parts:
                    p.close()


# -- wire protocol ------------------------------------------------------------

OP_CREATE_TOPIC = 1
OP_METADATA = 2
OP_PRODUCE = 3
OP_FETCH = 4
OP_COMMIT = 5

STATUS_OK = 0
_ERROR_CODES = {
    UnknownTopic: 1,
    PartitionOutOfRange: 2,
    OffsetOutOfRange: 3,
    MessageTooLarge: 4,
    TopicExists: 5,
}
_CODE_ERRORS = {v: k for k, v in _ERROR_CODES.items()}
STATUS_BAD_REQUEST = 6
STATUS_INTERNAL = 7


class _Cursor:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def u32(self) -> int:
        (v,) = _U32.unpack_from(self.data, self.pos)
        self.pos += 4
        return v

    def u64(self) -> int:
        (v,) = _U64.unpack_from(self.data, self.pos)
        self.pos += 8
        return v

    def i64(self) -> int:
        (v,) = _I64.unpack_from(self.data, self.pos)
        self.pos += 8
        return v

    def string(self) -> str:
        n = self.u32()
        s = self.data[self.pos : self.pos + n].decode("utf-8")
        self.pos += n
        return s

    def blob(self) -> Optional[bytes]:
        n = self.u32()
        if n == NULL_KEY:
            return None
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b


def _pack_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def _pack_blob(b: Optional[bytes]) -> bytes:
    if b is None:
        return _U32.pack(NULL_KEY)
    return _U32.pack(len(b)) + b


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionError("broker connection closed")
        buf.extend(chunk)
    return bytes(buf)


def _send_message(sock: socket.socket, body: bytes) -> None:
    sock.sendall(_U32.pack(len(body)) + body)


def _recv_message(sock: socket.socket, limit: int = 1 << 31) -> bytes:
    (length,) = _U32.unpack(_read_exact(sock, 4))
    if length > limit:
        raise ConnectionError(f"oversized broker message ({length} bytes)")
    return _read_exact(sock, length)


class BrokerServer:
    """Serves a Broker over TCP; one thread per client connection."""

    def __init__(self, broker: Broker, host: str = "127.0.0.1", port: int = 0) -> None:
        self.broker = broker
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(128)
        self._listener.settimeout(0.2)
        self.host = host
        self.port = self._listener.getsockname()[1]
        self._stop = threading.Event()
        self._thread = threading.Thread(
            target=self._accept_loop, name="skyhost-broker", daemon=True
        )

    def start(self) -> "BrokerServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        self._thread.join(timeout=5)
        self.broker.close()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=self._serve_client, args=(sock,), daemon=True).start()

    def _serve_client(self, sock: socket.socket) -> None:
        try:
            while not self._stop.is_set():
                try:
                    request = _recv_message(sock)
                except (ConnectionError, OSError):
                    return
                try:
                    response = self._dispatch(request)
                except BrokerError as exc:
                    code = _ERROR_CODES.get(type(exc), STATUS_INTERNAL)
                    response = bytes([code]) + _pack_string(str(exc))
                except Exception as exc:  # noqa: BLE001
                    log.exception("broker request failed")
                    response = bytes([STATUS_INTERNAL]) + _pack_string(str(exc))
                try:
                    _send_message(sock, response)
                except OSError:
                    return
        finally:
            try:
                sock.close()
            except OSError:
                pass

    def _dispatch(self, request: bytes) -> bytes:
        if not request:
            return bytes([STATUS_BAD_REQUEST]) + _pack_string("empty request")
        cur = _Cursor(request)
        op = cur.u32()
        if op == OP_CREATE_TOPIC:
            topic = cur.string()
            partitions = cur.u32()
            self.broker.create_topic(topic, partitions)
            return bytes([STATUS_OK])
        if op == OP_METADATA:
            topic = cur.string()
            group = cur.string() or None
            meta = self.broker.metadata(topic, group)
            body = [bytes([STATUS_OK]), _U32.pack(meta.partitions)]
            for end in meta.end_offsets:
                body.append(_U64.pack(end))
            for committed in meta.committed:
                body.append(_I64.pack(committed))
            return b"".join(body)
        if op == OP_PRODUCE:
            topic = cur.string()
            count = cur.u32()
            entries = []
            for _ in range(count):
                partition = cur.u32()
                key = cur.blob()
                value = cur.blob()
                entries.append((partition, key, value if value is not None else b""))
            offsets = self.broker.produce_many(topic, entries)
            return b"".join(
                [bytes([STATUS_OK]), _U32.pack(len(offsets))]
                + [_U64.pack(o) for o in offsets]
            )
        if op == OP_FETCH:
            topic = cur.string()
            partition = cur.u32()
            from_offset = cur.u64()
            max_bytes = cur.u32()
            records = self.broker.fetch(topic, partition, from_offset, max_bytes)
            body = [bytes([STATUS_OK]), _U32.pack(len(records))]
            for offset, key, value in records:
                body.append(_U64.pack(offset))
                body.append(_pack_blob(key))
                body.append(_pack_blob(value))
            return b"".join(body)
        if op == OP_COMMIT:
            group = cur.string()
            topic = cur.string()
            partition = cur.u32()
            offset = cur.u64()
            self.broker.commit(group, topic, partition, offset)
            return bytes([STATUS_OK])
        return bytes([STATUS_BAD_REQUEST]) + _pack_string(f"unknown op {op}")


class BrokerClient:
    """Client interface; implementations must be safe for concurrent callers."""

    def create_topic(self, topic: str, partitions: int) -> None:
        raise NotImplementedError

    def metadata(self, topic: str, group: Optional[str] = None) -> TopicMetadata:
        raise NotImplementedError

    def produce_many(
        self, topic: str, entries: Sequence[tuple[int, Optional[bytes], bytes]]
    ) -> list[int]:
        raise NotImplementedError

    def fetch(
        self, topic: str, partition: int, from_offset: int, max_bytes: int
    ) -> list[tuple[int, Optional[bytes], bytes]]:
        raise NotImplementedError

    def commit(self, group: str, topic: str, partition: int, offset: int) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass


class LocalBrokerClient(BrokerClient):
    """In-process client wrapping a Broker directly."""

    def __init__(self, broker: Broker) -> None:
        self.broker = broker

    def create_topic(self, topic, partitions):
        self.broker.create_topic(topic, partitions)

    def metadata(self, topic, group=None):
        return self.broker.metadata(topic, group)

    def produce_many(self, topic, entries):
        return self.broker.produce_many(topic, entries)

    def fetch(self, topic, partition, from_offset, max_bytes):
        return self.broker.fetch(topic, partition, from_offset, max_bytes)

    def commit(self, group, topic, partition, offset):
        self.broker.commit(group, topic, partition, offset)


class TcpBrokerClient(BrokerClient):
    """Blocking request/response client; a lock serializes the connection."""

    def __init__(self, host: str, port: int, connect_timeout: float = 5.0) -> None:
        self.host = host
        self.port = port
        self._lock = threading.Lock()
        try:
            self._sock = socket.create_connection((host, port), timeout=connect_timeout)
        except OSError as exc:
            raise ConnectivityError(f"cannot reach broker at {host}:{port}: {exc}") from None
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock.settimeout(None)

    def _request(self, body: bytes) -> _Cursor:
        with self._lock:
            try:
                _send_message(self._sock, body)
                response = _recv_message(self._sock)
            except (ConnectionError, OSError) as exc:
                raise ConnectivityError(
                    f"broker connection {self.host}:{self.port} failed: {exc}"
                ) from None
        status = response[0]
        cur = _Cursor(response)
        cur.pos = 1
        if status == STATUS_OK:
            return cur
        message = cur.string()
        exc_type = _CODE_ERRORS.get(status)
        if exc_type is not None:
            raise exc_type(message)
        raise BrokerError(message)

    def create_topic(self, topic, partitions):
        self._request(_U32.pack(OP_CREATE_TOPIC) + _pack_string(topic) + _U32.pack(partitions))

    def metadata(self, topic, group=None):
        cur = self._request(
            _U32.pack(OP_METADATA) + _pack_string(topic) + _pack_string(group or "")
        )
        partitions = cur.u32()
        ends = tuple(cur.u64() for _ in range(partitions))
        committed = tuple(cur.i64() for _ in range(partitions))
        return TopicMetadata(topic, partitions, ends, committed)

    def produce_many(self, topic, entries):
        body = [_U32.pack(OP_PRODUCE), _pack_string(topic), _U32.pack(len(entries))]
        for partition, key, value in entries:
            body.append(_U32.pack(partition))
            body.append(_pack_blob(key))
            body.append(_pack_blob(value))
        cur = self._request(b"".join(body))
        count = cur.u32()
        return [cur.u64() for _ in range(count)]

    def fetch(self, topic, partition, from_offset, max_bytes):
        cur = self._request(
            _U32.pack(OP_FETCH)
            + _pack_string(topic)
            + _U32.pack(partition)
            + _U64.pack(from_offset)
            + _U32.pack(max_bytes)
        )
        count = cur.u32()
        out = []
        for _ in range(count):
            offset = cur.u64()
            key = cur.blob()
            value = cur.blob()
            out.append((offset, key, value if value is not None else b""))
        return out

    def commit(self, group, topic, partition, offset):
        self._request(
            _U32.pack(OP_COMMIT)
            + _pack_string(group)
            + _pack_string(topic)
            + _U32.pack(partition)
            + _U64.pack(offset)
        )

    def reconnect(self) -> None:
        with self._lock:
            try:
                self._sock.close()
            except OSError:
                pass
            try:
                self._sock = socket.create_connection((self.host, self.port), timeout=5.0)
            except OSError as exc:
                raise ConnectivityError(
                    f"cannot reach broker at {self.host}:{self.port}: {exc}"
                ) from None
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._sock.settimeout(None)

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass
