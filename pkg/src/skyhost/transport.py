"""Gateway-to-gateway data plane: framed batches over parallel TCP
connections with optional compression, receiver-side staging, and
acknowledgments.

Wire format (big-endian, 36-byte header):

    magic            4 bytes  "SKHT"
    version          1 byte   0x01
    msg_type         1 byte   1=HELLO 2=BATCH 3=ACK 4=FIN 5=ERR
    flags            1 byte   bit0 = payload compressed (BATCH only)
    reserved         1 byte   0x00
    batch_id         u64
    partition        i32      -1 = none
    record_count     u32      0 unless BATCH
    uncompressed_len u32      equals payload_len when not compressed
    payload_len      u32
    payload_crc32    u32      IEEE CRC-32 over payload bytes as transmitted
    payload          payload_len bytes

BATCH payloads hold repeated records, each encoded as: offset u64, key_len
u32 (0xFFFFFFFF = null key), key bytes, value_len u32, value bytes. HELLO
payloads carry (connection_index u32, connection_count u32). ERR payloads are
UTF-8 text. ACK/FIN payloads are empty.

Flow control: each connection is stop-and-wait (one unacknowledged batch in
flight), batches are assigned to connections by batch_id mod P, and a full
downstream queue stops the receiver reading its socket, which backpressures
the sender through TCP.
"""

from __future__ import annotations

import logging
import os
import random
import socket
import struct
import threading
import time
import zlib
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Optional

from .errors import (
    ConnectivityError,
    CorruptPayload,
    HandshakeError,
    MalformedFrame,
    QueueClosed,
    TransferAborted,
    TransferError,
)
from .pipeline import BoundedQueue, Record, RecordBatch, TransferStats

log = logging.getLogger(__name__)

MAGIC = b"SKHT"
VERSION = 1
HEADER_LEN = 36
FLAG_COMPRESSED = 0x01
NULL_KEY = 0xFFFFFFFF
DEFAULT_TRANSPORT_PORT = 7331
DEDUP_WINDOW = 1024

_HEADER = struct.Struct(">4sBBBBQiIIII")
_REC_HEAD = struct.Struct(">QI")
_U32 = struct.Struct(">I")
_HELLO_PAYLOAD = struct.Struct(">II")


class MsgType(IntEnum):
    HELLO = 1
    BATCH = 2
    ACK = 3
    FIN = 4
    ERR = 5


@dataclass(frozen=True)
class Frame:
    msg_type: int
    batch_id: int = 0
    partition: int = -1
    record_count: int = 0
    uncompressed_len: int = 0
    flags: int = 0
    payload: bytes = b""


def _validate_frame_fields(frame: Frame) -> None:
    if frame.msg_type not in (1, 2, 3, 4, 5):
        raise MalformedFrame(MalformedFrame.BAD_HEADER, f"msg_type {frame.msg_type}")
    if frame.flags & ~FLAG_COMPRESSED:
        raise MalformedFrame(MalformedFrame.BAD_HEADER, f"unknown flags 0x{frame.flags:02x}")
    if frame.flags and frame.msg_type != MsgType.BATCH:
        raise MalformedFrame(MalformedFrame.BAD_HEADER, "compression flag outside BATCH")
    if not 0 <= frame.batch_id < 2**64:
        raise MalformedFrame(MalformedFrame.BAD_HEADER, "batch_id out of range")
    if not -1 <= frame.partition < 2**31:
        raise MalformedFrame(MalformedFrame.BAD_HEADER, f"partition {frame.partition}")
    if not 0 <= frame.record_count < 2**32:
        raise MalformedFrame(MalformedFrame.BAD_HEADER, "record_count out of range")
    if len(frame.payload) >= 2**32 or not 0 <= frame.uncompressed_len < 2**32:
        raise MalformedFrame(MalformedFrame.BAD_LENGTH, "length field out of range")
    if not frame.flags & FLAG_COMPRESSED and frame.uncompressed_len != len(frame.payload):
        raise MalformedFrame(
            MalformedFrame.BAD_LENGTH,
            "uncompressed_len must equal payload_len when not compressed",
        )
    # Per-type rules: a BATCH always carries records, control frames pin the
    # fields they do not use so corrupting them is detectable.
    if frame.msg_type == MsgType.BATCH:
        if frame.record_count < 1:
            raise MalformedFrame(MalformedFrame.BAD_HEADER, "BATCH without records")
        return
    if frame.record_count != 0:
        raise MalformedFrame(MalformedFrame.BAD_HEADER, "record_count on non-BATCH frame")
    if frame.partition != -1:
        raise MalformedFrame(MalformedFrame.BAD_HEADER, "partition on control frame")
    if frame.msg_type != MsgType.ACK and frame.batch_id != 0:
        raise MalformedFrame(MalformedFrame.BAD_HEADER, "batch_id on control frame")
    if frame.msg_type == MsgType.HELLO and len(frame.payload) != 8:
        raise MalformedFrame(MalformedFrame.BAD_HEADER, "HELLO payload must be 8 bytes")
    if frame.msg_type in (MsgType.ACK, MsgType.FIN) and frame.payload:
        raise MalformedFrame(MalformedFrame.BAD_HEADER, "unexpected payload")
    if frame.msg_type == MsgType.ERR and not frame.payload:
        raise MalformedFrame(MalformedFrame.BAD_HEADER, "ERR without message")


def encode_frame(frame: Frame) -> bytes:
    _validate_frame_fields(frame)
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        frame.msg_type,
        frame.flags,
        0,
        frame.batch_id,
        frame.partition,
        frame.record_count,
        frame.uncompressed_len,
        len(frame.payload),
        zlib.crc32(frame.payload) & 0xFFFFFFFF,
    )
    return header + frame.payload


def _decode_header(header: bytes) -> tuple:
    magic, version, msg_type, flags, reserved, batch_id, partition, record_count, \
        uncompressed_len, payload_len, crc = _HEADER.unpack(header)
    if magic != MAGIC:
        raise MalformedFrame(MalformedFrame.BAD_MAGIC, magic.hex())
    if version != VERSION:
        raise MalformedFrame(MalformedFrame.BAD_VERSION, f"version {version}")
    if reserved != 0:
        raise MalformedFrame(MalformedFrame.BAD_HEADER, "reserved byte set")
    return msg_type, flags, batch_id, partition, record_count, uncompressed_len, payload_len, crc


def _build_frame(fields: tuple, payload: bytes) -> Frame:
    msg_type, flags, batch_id, partition, record_count, uncompressed_len, payload_len, crc = fields
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise MalformedFrame(MalformedFrame.BAD_CRC, f"batch_id={batch_id}")
    frame = Frame(
        msg_type=msg_type,
        batch_id=batch_id,
        partition=partition,
        record_count=record_count,
        uncompressed_len=uncompressed_len,
        flags=flags,
        payload=payload,
    )
    _validate_frame_fields(frame)
    return frame


def decode_frame(buf: bytes) -> Frame:
    """Decode one frame from an exact byte buffer; rejects anything malformed."""
    if len(buf) < HEADER_LEN:
        raise MalformedFrame(MalformedFrame.TRUNCATED, f"{len(buf)} bytes")
    fields = _decode_header(buf[:HEADER_LEN])
    payload_len = fields[6]
    if len(buf) < HEADER_LEN + payload_len:
        raise MalformedFrame(MalformedFrame.TRUNCATED, "payload cut short")
    if len(buf) > HEADER_LEN + payload_len:
        raise MalformedFrame(MalformedFrame.BAD_LENGTH, "trailing bytes after payload")
    return _build_frame(fields, buf[HEADER_LEN:])


def compress(data: bytes) -> bytes:
    # level 1: this path trades ratio for throughput
    return zlib.compress(data, 1)


def decompress(data: bytes, expected_len: int) -> bytes:
    try:
        out = zlib.decompress(data)
    except zlib.error as exc:
        raise CorruptPayload(f"decompression failed: {exc}") from None
    if len(out) != expected_len:
        raise CorruptPayload(
            f"decompressed length {len(out)} != declared {expected_len}"
        )
    return out


def encode_batch_payload_parts(records: list[Record]) -> list[bytes]:
    """Payload as a buffer list so large record values are never re-copied."""
    parts = []
    for r in records:
        if r.key is None:
            parts.append(_REC_HEAD.pack(r.offset, NULL_KEY))
        else:
            parts.append(_REC_HEAD.pack(r.offset, len(r.key)))
            parts.append(r.key)
        parts.append(_U32.pack(len(r.value)))
        parts.append(r.value)
    return parts


def encode_batch_payload(records: list[Record]) -> bytes:
    return b"".join(encode_batch_payload_parts(records))


def decode_batch_payload(payload: bytes, record_count: int, partition: int) -> list[Record]:
    """Decode records; byte count and record count must match exactly."""
    records: list[Record] = []
    pos = 0
    n = len(payload)
    target_partition = partition if partition >= 0 else 0
    for _ in range(record_count):
        if pos + 12 > n:
            raise MalformedFrame(MalformedFrame.TRUNCATED, "record header cut short")
        offset, key_len = _REC_HEAD.unpack_from(payload, pos)
        pos += 12
        if key_len == NULL_KEY:
            key = None
        else:
            if pos + key_len > n:
                raise MalformedFrame(MalformedFrame.TRUNCATED, "key cut short")
            key = payload[pos : pos + key_len]
            pos += key_len
        if pos + 4 > n:
            raise MalformedFrame(MalformedFrame.TRUNCATED, "value length cut short")
        (value_len,) = _U32.unpack_from(payload, pos)
        pos += 4
        if pos + value_len > n:
            raise MalformedFrame(MalformedFrame.TRUNCATED, "value cut short")
        value = payload[pos : pos + value_len]
        pos += value_len
        records.append(Record(partition=target_partition, offset=offset, key=key, value=value))
    if pos != n:
        raise MalformedFrame(MalformedFrame.BAD_LENGTH, "payload longer than records")
    return records


def batch_to_frame(batch: RecordBatch, compressed: bool) -> Frame:
    payload = encode_batch_payload(batch.records)
    uncompressed_len = len(payload)
    flags = 0
    if compressed:
        payload = compress(payload)
        flags = FLAG_COMPRESSED
    return Frame(
        msg_type=MsgType.BATCH,
        batch_id=batch.batch_id,
        partition=batch.partition_hint if batch.partition_hint is not None else -1,
        record_count=len(batch.records),
        uncompressed_len=uncompressed_len,
        flags=flags,
        payload=payload,
    )


def frame_to_batch(frame: Frame, now: float) -> RecordBatch:
    payload = frame.payload
    if frame.flags & FLAG_COMPRESSED:
        payload = decompress(payload, frame.uncompressed_len)
    records = decode_batch_payload(payload, frame.record_count, frame.partition)
    total = sum(r.size_bytes() for r in records)
    return RecordBatch(
        batch_id=frame.batch_id,
        records=records,
        partition_hint=frame.partition if frame.partition >= 0 else None,
        total_bytes=total,
        created_at=now,
    )


def hello_frame(index: int, count: int) -> Frame:
    payload = _HELLO_PAYLOAD.pack(index, count)
    return Frame(msg_type=MsgType.HELLO, uncompressed_len=len(payload), payload=payload)


def ack_frame(batch_id: int) -> Frame:
    return Frame(msg_type=MsgType.ACK, batch_id=batch_id)


def fin_frame() -> Frame:
    return Frame(msg_type=MsgType.FIN)


def err_frame(message: str) -> Frame:
    payload = (message or "unspecified error").encode("utf-8", errors="replace")[:65536]
    return Frame(msg_type=MsgType.ERR, uncompressed_len=len(payload), payload=payload)


# -- socket plumbing ---------------------------------------------------------


class _ConnectionLost(Exception):
    pass


def _recv_exact(sock: socket.socket, n: int, stop: threading.Event) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        if stop.is_set():
            raise TransferAborted("transfer aborted")
        try:
            chunk = sock.recv(min(n - len(buf), 1 << 20))
        except socket.timeout:
            continue
        except OSError as exc:
            raise _ConnectionLost(str(exc)) from None
        if not chunk:
            raise _ConnectionLost("peer closed connection")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket, stop: threading.Event) -> Frame:
    header = _recv_exact(sock, HEADER_LEN, stop)
    fields = _decode_header(header)
    payload_len = fields[6]
    payload = _recv_exact(sock, payload_len, stop) if payload_len else b""
    return _build_frame(fields, payload)


def _send_frame(sock: socket.socket, frame: Frame, lock: threading.Lock) -> int:
    data = encode_frame(frame)
    with lock:
        sock.sendall(data)
    return len(data)


def _connect(dest: tuple[str, int]) -> socket.socket:
    sock = socket.create_connection(dest, timeout=5.0)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    sock.settimeout(0.25)
    return sock


@dataclass
class RetryPolicy:
    """Exponential backoff with jitter: base 100 ms doubling to a 5 s cap."""

    base: float = 0.1
    cap: float = 5.0
    deadline: float = 30.0
    rng: random.Random = field(default_factory=random.Random)

    def delays(self):
        attempt = 0
        while True:
            delay = min(self.base * (2**attempt), self.cap)
            yield delay * (0.5 + self.rng.random() / 2)
            attempt += 1


# -- receiver-side staging ---------------------------------------------------


class ChunkStore:
    """Staging area between network receipt and sink handoff.

    Tracks every received batch until it is completed (durably handled by the
    sink, or immediately in ack-on-push mode) and holds the pending ACK
    callbacks so an acknowledgment can never overtake the batch it covers.
    With a stage directory the wire payload is written and fsynced at stage
    time.
    """

    def __init__(self, stage_dir: Optional[str] = None) -> None:
        self._lock = threading.Lock()
        self._pending: dict[int, dict] = {}
        self._stage_dir = Path(stage_dir) if stage_dir else None
        if self._stage_dir:
            self._stage_dir.mkdir(parents=True, exist_ok=True)
        self._bytes = 0
        self.peak_bytes = 0

    def stage(self, batch_id: int, payload: bytes, nbytes: int) -> None:
        path = None
        if self._stage_dir:
            path = self._stage_dir / f"batch_{batch_id:016d}.bin"
            with open(path, "wb") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
        with self._lock:
            if batch_id in self._pending:
                return  # duplicate in flight (retransmit); keep first entry
            self._pending[batch_id] = {"acks": [], "done": False, "path": path, "bytes": nbytes}
            self._bytes += nbytes
            self.peak_bytes = max(self.peak_bytes, self._bytes)

    def request_ack(self, batch_id: int, send_fn: Callable[[], None]) -> None:
        """Send the ACK now if the batch is complete (or unknown, meaning it was
        completed and evicted earlier); otherwise park the callback."""
        with self._lock:
            entry = self._pending.get(batch_id)
            if entry is not None and not entry["done"]:
                entry["acks"].append(send_fn)
                return
        send_fn()

    def complete(self, batch_id: int) -> None:
        with self._lock:
            entry = self._pending.pop(batch_id, None)
            if entry is None:
                return
            entry["done"] = True
            self._bytes -= entry["bytes"]
            acks = entry["acks"]
            path = entry["path"]
        if path is not None:
            try:
                path.unlink()
            except OSError:
                pass
        for send in acks:
            send()

    def is_pending(self, batch_id: int) -> bool:
        with self._lock:
            return batch_id in self._pending

    def pending_count(self) -> int:
        with self._lock:
            return len(self._pending)

    @property
    def bytes_occupancy(self) -> int:
        with self._lock:
            return self._bytes

    def clear(self) -> None:
        with self._lock:
            pending = list(self._pending.values())
            self._pending.clear()
            self._bytes = 0
        for entry in pending:
            if entry["path"] is not None:
                try:
                    entry["path"].unlink()
                except OSError:
                    pass


class _AckWindow:
    """Last-N acknowledged batch ids for one connection index."""

    def __init__(self, size: int = DEDUP_WINDOW) -> None:
        self._order: deque[int] = deque(maxlen=size)
        self._ids: set[int] = set()
        self._lock = threading.Lock()

    def add(self, batch_id: int) -> None:
        with self._lock:
            if batch_id in self._ids:
                return
            if len(self._order) == self._order.maxlen:
                self._ids.discard(self._order[0])
            self._order.append(batch_id)
            self._ids.add(batch_id)

    def __contains__(self, batch_id: int) -> bool:
        with self._lock:
            return batch_id in self._ids


class _Resequencer:
    """Releases batches downstream in batch_id order (ids start at 0).

    Delivery happens under the lock: the downstream queue order must equal id
    order, so a handler blocked pushing also holds back later ids. That stall
    is backpressure, not a deadlock; parked entries are bounded by the
    stop-and-wait sender (at most one in-flight batch per connection).
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._next = 0
        self._parked: dict[int, tuple] = {}

    def submit(self, batch: RecordBatch, deliver: Callable, duplicate: Callable) -> None:
        bid = batch.batch_id
        with self._lock:
            if bid < self._next or bid in self._parked:
                dup = True
            else:
                dup = False
                self._parked[bid] = (batch, deliver)
                while self._next in self._parked:
                    ready_batch, ready_deliver = self._parked.pop(self._next)
                    self._next += 1
                    ready_deliver(ready_batch)
        if dup:
            duplicate(bid)

    def parked_count(self) -> int:
        with self._lock:
            return len(self._parked)


# -- sender ------------------------------------------------------------------


class _SenderConnection:
    def __init__(self, sender: "Sender", index: int) -> None:
        self.sender = sender
        self.index = index
        self.sock: Optional[socket.socket] = None
        self.write_lock = threading.Lock()
        self.free = threading.Event()
        self.free.set()
        self._submitted = threading.Event()
        self._batch: Optional[RecordBatch] = None
        self._fin = False
        self.sent_batches = 0
        self.thread = threading.Thread(
            target=self._run, name=f"skyhost-sender-{index}", daemon=True
        )

    # coordinator side -------------------------------------------------

    def submit(self, batch: RecordBatch) -> None:
        self.free.clear()
        self._batch = batch
        self._submitted.set()

    def submit_fin(self) -> None:
        self._wait_free()
        self._fin = True
        self._submitted.set()

    def _wait_free(self) -> None:
        while not self.free.wait(timeout=0.2):
            if self.sender._stop.is_set():
                raise TransferAborted("transfer aborted")
            if self.sender._failed.is_set():
                raise TransferError("sender connection failed")

    # worker side --------------------------------------------------------

    def _connect_handshake(self) -> None:
        self.sock = _connect(self.sender.dest)
        n = _send_frame(self.sock, hello_frame(self.index, self.sender.connections), self.write_lock)
        self.sender._count_wire(n, n)
        reply = read_frame(self.sock, self.sender._stop)
        if reply.msg_type == MsgType.ERR:
            raise HandshakeError(reply.payload.decode("utf-8", "replace"))
        if reply.msg_type != MsgType.HELLO:
            raise HandshakeError(f"unexpected reply type {reply.msg_type}")

    def _reconnect(self) -> None:
        if self.sock is not None:
            try:
                self.sock.close()
            except OSError:
                pass
            self.sock = None
        started = time.monotonic()
        for delay in self.sender.retry.delays():
            if self.sender._stop.is_set():
                raise TransferAborted("transfer aborted")
            try:
                self._connect_handshake()
                return
            except (OSError, _ConnectionLost, HandshakeError) as exc:
                last = exc
                if isinstance(exc, HandshakeError) and "version" in str(exc).lower():
                    raise
            if time.monotonic() - started + delay > self.sender.retry.deadline:
                raise ConnectivityError(
                    f"connection {self.index} to {self.sender.dest} failed: {last}"
                )
            time.sleep(delay)

    def _deliver(self, batch: RecordBatch) -> None:
        frame = batch_to_frame(batch, self.sender.compression)
        data = encode_frame(frame)
        uncompressed = HEADER_LEN + frame.uncompressed_len
        first_attempt = True
        while True:
            if self.sender._stop.is_set():
                raise TransferAborted("transfer aborted")
            try:
                if self.sock is None:
                    self._reconnect()
                if not first_attempt:
                    self.sender.stats.retransmits += 1
                with self.write_lock:
                    self.sock.sendall(data)
                self.sender._count_wire(len(data), uncompressed)
                self._await_ack(batch.batch_id)
                return
            except (_ConnectionLost, OSError, MalformedFrame) as exc:
                if self.sender._stop.is_set():
                    raise TransferAborted("transfer aborted")
                log.info("connection %d lost (%s); reconnecting", self.index, exc)
                first_attempt = False
                try:
                    if self.sock is not None:
                        self.sock.close()
                except OSError:
                    pass
                self.sock = None

    def _await_ack(self, batch_id: int) -> None:
        while True:
            frame = read_frame(self.sock, self.sender._stop)
            if frame.msg_type == MsgType.ACK:
                if frame.batch_id == batch_id:
                    return
                continue  # stale re-ack for an already-acknowledged batch
            if frame.msg_type == MsgType.ERR:
                raise TransferError(
                    f"receiver error: {frame.payload.decode('utf-8', 'replace')}"
                )
            raise MalformedFrame(
                MalformedFrame.BAD_HEADER, f"unexpected frame type {frame.msg_type}"
            )

    def _run(self) -> None:
        try:
            self._connect_handshake()
        except (OSError, _ConnectionLost) as exc:
            try:
                self._reconnect()
            except Exception as reconnect_exc:  # noqa: BLE001
                self.sender._fail(reconnect_exc)
                return
        except Exception as exc:  # noqa: BLE001
            self.sender._fail(exc)
            return
        try:
            while True:
                if not self._submitted.wait(timeout=0.2):
                    if self.sender._stop.is_set():
                        return
                    continue
                self._submitted.clear()
                if self._fin:
                    break
                batch = self._batch
                self._batch = None
                self._deliver(batch)
                self.sent_batches += 1
                self.sender._acked(batch)
                self.free.set()
            n = _send_frame(self.sock, fin_frame(), self.write_lock)
            self.sender._count_wire(n, n)
            try:
                reply = read_frame(self.sock, self.sender._stop)
                if reply.msg_type == MsgType.ERR:
                    raise TransferError(reply.payload.decode("utf-8", "replace"))
            except _ConnectionLost:
                pass  # receiver may close right after our FIN
            self.free.set()
        except Exception as exc:  # noqa: BLE001
            self.sender._fail(exc)
        finally:
            if self.sock is not None:
                try:
                    self.sock.close()
                except OSError:
                    pass


class Sender:
    """Ships batches from a queue to a receiver over P connections.

    Stop-and-wait per connection: at most one unacknowledged batch is in
    flight on each. Connection loss triggers reconnect and retransmission of
    the unacknowledged batch, which is the duplication source permitted by
    at-least-once delivery.
    """

    def __init__(
        self,
        in_queue: BoundedQueue[RecordBatch],
        dest: tuple[str, int],
        connections: int = 1,
        compression: bool = False,
        ack_out: Optional[BoundedQueue[int]] = None,
        retry: Optional[RetryPolicy] = None,
    ) -> None:
        if connections < 1:
            raise ValueError("connections must be >= 1")
        self.in_queue = in_queue
        self.dest = dest
        self.connections = connections
        self.compression = compression
        self.ack_out = ack_out
        self.retry = retry or RetryPolicy()
        self.stats = TransferStats(per_connection=[0] * connections)
        self._stop = threading.Event()
        self._failed = threading.Event()
        self._error: Optional[BaseException] = None
        self._error_lock = threading.Lock()
        self._wire_lock = threading.Lock()
        self._conns = [_SenderConnection(self, i) for i in range(connections)]
        self._thread = threading.Thread(target=self._coordinate, name="skyhost-sender", daemon=True)
        self._started = False
        self.inflight_peak = 0
        self._inflight_bytes = 0
        self.inflight_bytes_peak = 0

    # internal accounting ----------------------------------------------

    def _count_wire(self, wire: int, uncompressed: int) -> None:
        with self._wire_lock:
            self.stats.wire_bytes += wire
            self.stats.wire_bytes_uncompressed += uncompressed

    def _acked(self, batch: RecordBatch) -> None:
        with self._wire_lock:
            self.stats.batches += 1
            self.stats.records_moved += len(batch.records)
            self.stats.bytes_moved += batch.total_bytes
            self.stats.per_connection[batch.batch_id % self.connections] += 1
            self._inflight_bytes -= batch.total_bytes
        if self.ack_out is not None:
            try:
                self.ack_out.push(batch.batch_id)
            except QueueClosed:
                pass

    def _fail(self, exc: BaseException) -> None:
        with self._error_lock:
            if self._error is None:
                self._error = exc
        self._failed.set()
        self._stop.set()

    def inflight_count(self) -> int:
        return sum(0 if c.free.is_set() else 1 for c in self._conns)

    # lifecycle ----------------------------------------------------------

    def start(self) -> None:
        self._started = True
        for conn in self._conns:
            conn.thread.start()
        self._thread.start()

    def _coordinate(self) -> None:
        try:
            predicted: Optional[int] = None
            while True:
                if predicted is not None:
                    self._conns[predicted % self.connections]._wait_free()
                try:
                    batch = self.in_queue.pop(timeout=0.2)
                except TimeoutError:
                    if self._failed.is_set() or self._stop.is_set():
                        return
                    continue
                except QueueClosed:
                    break
                conn = self._conns[batch.batch_id % self.connections]
                if predicted is None or conn is not self._conns[predicted % self.connections]:
                    conn._wait_free()
                self.inflight_peak = max(self.inflight_peak, self.inflight_count() + 1)
                with self._wire_lock:
                    self._inflight_bytes += batch.total_bytes
                    self.inflight_bytes_peak = max(
                        self.inflight_bytes_peak, self._inflight_bytes
                    )
                conn.submit(batch)
                predicted = batch.batch_id + 1
            for conn in self._conns:
                conn.submit_fin()
        except TransferAborted:
            pass
        except Exception as exc:  # noqa: BLE001
            self._fail(exc)

    def abort(self, message: str = "aborted") -> None:
        self._fail(TransferAborted(message))
        for conn in self._conns:
            sock = conn.sock
            if sock is not None:
                try:
                    sock.close()
                except OSError:
                    pass

    def wait(self, timeout: Optional[float] = None) -> TransferStats:
        start = time.monotonic()
        self._thread.join(timeout)
        for conn in self._conns:
            remaining = None if timeout is None else max(0.0, timeout - (time.monotonic() - start))
            conn.thread.join(remaining)
        with self._error_lock:
            if self._error is not None:
                raise self._error
        return self.stats


def sender_run(
    in_queue: BoundedQueue[RecordBatch],
    dest: tuple[str, int],
    connections: int = 1,
    compression: bool = False,
    ack_out: Optional[BoundedQueue[int]] = None,
    retry: Optional[RetryPolicy] = None,
) -> TransferStats:
    sender = Sender(in_queue, dest, connections, compression, ack_out, retry)
    sender.start()
    return sender.wait()


# -- receiver ----------------------------------------------------------------


ACK_ON_PUSH = "push"  # ack right after the batch is handed to the sink queue
ACK_ON_STAGE = "stage"  # ack once the payload is durably staged (stage dir)
ACK_ON_COMPLETION = "completion"  # ack when the sink reports the batch done


class Receiver:
    """Accepts sender connections, rebuilds batches, and pushes them downstream.

    A full out-queue blocks the handler, which stops reading the socket,
    which backpressures the sender through TCP. Acknowledgments are routed
    through the ChunkStore so they can be deferred until the sink has durably
    handled the batch (ACK_ON_COMPLETION) or until durable staging
    (ACK_ON_STAGE).
    """

    def __init__(
        self,
        listen: tuple[str, int],
        out_queue: BoundedQueue[RecordBatch],
        expected_connections: Optional[int] = None,
        *,
        resequence: bool = False,
        stage_dir: Optional[str] = None,
        ack_on: Optional[str] = None,
        fault_hook: Optional[Callable[[int, int], bool]] = None,
    ) -> None:
        self.out_queue = out_queue
        self.expected = expected_connections
        self.resequencer = _Resequencer() if resequence else None
        self.chunkstore = ChunkStore(stage_dir)
        if ack_on is None:
            ack_on = ACK_ON_STAGE if stage_dir else ACK_ON_PUSH
        if ack_on not in (ACK_ON_PUSH, ACK_ON_STAGE, ACK_ON_COMPLETION):
            raise ValueError(f"unknown ack_on {ack_on!r}")
        self.ack_on = ack_on
        self.stats = TransferStats()
        self.duplicates_dropped = 0
        self._fault_hook = fault_hook  # test hook: drop connection pre-ACK
        self._stop = threading.Event()
        self._error: Optional[BaseException] = None
        self._error_lock = threading.Lock()
        self._stats_lock = threading.Lock()
        self._lock = threading.Lock()
        self._fins = 0
        self._windows: dict[int, _AckWindow] = {}
        self._live: dict[int, socket.socket] = {}
        self._handlers: list[threading.Thread] = []
        self._done = threading.Event()
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind(listen)
        self._listener.listen(128)
        self._listener.settimeout(0.2)
        self.port = self._listener.getsockname()[1]
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="skyhost-receiver", daemon=True
        )

    # lifecycle ----------------------------------------------------------

    def start(self) -> None:
        self._accept_thread.start()

    def complete(self, batch_id: int) -> None:
        """Sink callback: the batch is durably handled; release its ACK."""
        self.chunkstore.complete(batch_id)

    def _fail(self, exc: BaseException) -> None:
        with self._error_lock:
            if self._error is None:
                self._error = exc
        self.abort(str(exc), _from_fail=True)

    def abort(self, message: str = "aborted", _from_fail: bool = False) -> None:
        if not _from_fail:
            with self._error_lock:
                if self._error is None:
                    self._error = TransferAborted(message)
        self._stop.set()
        with self._lock:
            socks = list(self._live.values())
        for sock in socks:
            try:
                sock.sendall(encode_frame(err_frame(message)))
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass
        self.out_queue.abort()
        self.chunkstore.clear()
        self._done.set()
        self._wake_accept()

    def wait(self, timeout: Optional[float] = None) -> TransferStats:
        if not self._done.wait(timeout):
            raise TimeoutError("receiver still running")
        self._accept_thread.join(timeout=5)
        for t in self._handlers:
            t.join(timeout=5)
        with self._error_lock:
            if self._error is not None:
                raise self._error
        return self.stats

    # accept/handler machinery -------------------------------------------

    def _wake_accept(self) -> None:
        # closing a listener does not interrupt a blocked accept(); poke it
        try:
            socket.create_connection(("127.0.0.1", self.port), timeout=0.5).close()
        except OSError:
            pass

    def _accept_loop(self) -> None:
        try:
            while not self._stop.is_set() and not self._done.is_set():
                try:
                    sock, _addr = self._listener.accept()
                except socket.timeout:
                    continue
                except OSError:
                    break
                if self._stop.is_set() or self._done.is_set():
                    try:
                        sock.close()
                    except OSError:
                        pass
                    break
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sock.settimeout(0.25)
                handler = threading.Thread(
                    target=self._handle, args=(sock,), daemon=True
                )
                with self._lock:
                    self._handlers.append(handler)
                handler.start()
        finally:
            try:
                self._listener.close()
            except OSError:
                pass

    def _session_finished(self) -> None:
        if self.resequencer is not None and self.resequencer.parked_count():
            self._fail(TransferError("receiver finished with undelivered parked batches"))
            return
        self.out_queue.close()
        self._done.set()
        self._wake_accept()

    def _handle(self, sock: socket.socket) -> None:
        write_lock = threading.Lock()
        conn_index = -1
        try:
            try:
                hello = read_frame(sock, self._stop)
            except _ConnectionLost:
                return  # connect-and-vanish (reconnect probe or wakeup poke)
            if hello.msg_type != MsgType.HELLO or len(hello.payload) != 8:
                raise MalformedFrame(MalformedFrame.BAD_HEADER, "expected HELLO")
            conn_index, conn_count = _HELLO_PAYLOAD.unpack(hello.payload)
            with self._lock:
                if self.expected is None:
                    self.expected = conn_count
                elif conn_count != self.expected:
                    raise HandshakeError(
                        f"connection count mismatch: {conn_count} != {self.expected}"
                    )
                window = self._windows.setdefault(conn_index, _AckWindow())
                self._live[conn_index] = sock
            _send_frame(sock, hello_frame(conn_index, self.expected), write_lock)
            while not self._stop.is_set():
                try:
                    frame = read_frame(sock, self._stop)
                    if frame.msg_type == MsgType.BATCH:
                        self._on_batch(frame, sock, write_lock, window)
                        continue
                except _ConnectionLost:
                    return  # sender reconnects with a fresh socket
                if frame.msg_type == MsgType.FIN:
                    _send_frame(sock, fin_frame(), write_lock)
                    with self._lock:
                        self._fins += 1
                        done = self.expected is not None and self._fins >= self.expected
                    if done:
                        self._session_finished()
                    return
                elif frame.msg_type == MsgType.ERR:
                    raise TransferError(
                        f"sender error: {frame.payload.decode('utf-8', 'replace')}"
                    )
                elif frame.msg_type == MsgType.HELLO:
                    raise MalformedFrame(MalformedFrame.BAD_HEADER, "repeated HELLO")
        except TransferAborted:
            pass
        except HandshakeError as exc:
            try:
                sock.sendall(encode_frame(err_frame(str(exc))))
            except OSError:
                pass
            self._fail(exc)
        except (MalformedFrame, CorruptPayload) as exc:
            # close only the offending connection; others continue
            log.warning("malformed frame on connection %d: %s", conn_index, exc)
            try:
                sock.sendall(encode_frame(err_frame(str(exc))))
            except OSError:
                pass
        except Exception as exc:  # noqa: BLE001
            self._fail(exc)
        finally:
            with self._lock:
                if conn_index >= 0 and self._live.get(conn_index) is sock:
                    del self._live[conn_index]
            try:
                sock.close()
            except OSError:
                pass

    def _on_batch(
        self,
        frame: Frame,
        sock: socket.socket,
        write_lock: threading.Lock,
        window: _AckWindow,
    ) -> None:
        batch_id = frame.batch_id
        with self._stats_lock:
            self.stats.wire_bytes += HEADER_LEN + len(frame.payload)

        def send_ack() -> None:
            # Window add precedes the send so a lost ACK still dedups the
            # retransmit into a re-ack instead of a second push downstream.
            window.add(batch_id)
            try:
                _send_frame(sock, ack_frame(batch_id), write_lock)
            except OSError:
                pass  # connection gone; the retransmit will re-request an ack

        if batch_id in window:
            # already acknowledged on this connection index: re-ack, drop
            with self._stats_lock:
                self.duplicates_dropped += 1
            self.chunkstore.request_ack(batch_id, send_ack)
            return
        batch = frame_to_batch(frame, time.monotonic())
        self.chunkstore.stage(batch_id, frame.payload, batch.total_bytes)
        if self.ack_on == ACK_ON_STAGE:
            self.chunkstore.complete(batch_id)
        if self._fault_hook is not None and self._fault_hook(batch_id):
            # test hook: connection dies after receipt, before any ACK goes out
            try:
                sock.close()
            except OSError:
                pass

        def deliver(b: RecordBatch) -> None:
            try:
                self.out_queue.push(b)
            except QueueClosed:
                raise TransferAborted("downstream queue closed") from None
            with self._stats_lock:
                self.stats.batches += 1
                self.stats.records_moved += len(b.records)
                self.stats.bytes_moved += b.total_bytes
            self.chunkstore.request_ack(b.batch_id, send_ack)
            if self.ack_on == ACK_ON_PUSH:
                self.chunkstore.complete(b.batch_id)

        def duplicate(bid: int) -> None:
            with self._stats_lock:
                self.duplicates_dropped += 1
            self.chunkstore.request_ack(bid, send_ack)

        if self.resequencer is not None:
            self.resequencer.submit(batch, deliver, duplicate)
        else:
            deliver(batch)


def receiver_run(
    listen: tuple[str, int],
    out_queue: BoundedQueue[RecordBatch],
    expected_connections: Optional[int] = None,
    **kwargs,
) -> TransferStats:
    receiver = Receiver(listen, out_queue, expected_connections, **kwargs)
    receiver.start()
    return receiver.wait()
