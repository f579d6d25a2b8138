"""Object-store source operators: byte-sliced chunk reads and record-aware
structured reads over a local-directory backend and an HTTP range-read
backend for S3-compatible servers.

S3 configuration comes from the environment: SKYHOST_S3_ENDPOINT (base URL),
SKYHOST_S3_ACCESS_KEY / SKYHOST_S3_SECRET_KEY, SKYHOST_S3_REGION (default
us-east-1), and SKYHOST_S3_UNSIGNED=1 for anonymous test servers. Requests
are plain signed HTTP range GETs (SigV4); no provider SDK behavior beyond
that is emulated.
"""

from __future__ import annotations

import datetime
import hashlib
import hmac
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional
from urllib.parse import quote

import requests

from .errors import (
    AuthError,
    FormatError,
    IoError,
    ObjectNotFound,
    OversizedRecord,
    QueueClosed,
    RangeError,
    SizeUnavailable,
    UnsupportedBackend,
    UsageError,
)
from .pipeline import (
    Batcher,
    BatchIdAllocator,
    BoundedQueue,
    CAUSE_SIZE,
    PipelinePlan,
    Record,
    RecordBatch,
    SourceKind,
    TransferStats,
)
from .uris import EndpointUri

log = logging.getLogger(__name__)

ENV_ENDPOINT = "SKYHOST_S3_ENDPOINT"
ENV_ACCESS_KEY = "SKYHOST_S3_ACCESS_KEY"
ENV_SECRET_KEY = "SKYHOST_S3_SECRET_KEY"
ENV_REGION = "SKYHOST_S3_REGION"
ENV_UNSIGNED = "SKYHOST_S3_UNSIGNED"


class Backend(str, Enum):
    LOCAL_DIR = "local"
    S3_COMPATIBLE = "s3"


@dataclass(frozen=True)
class ObjectRef:
    backend: Backend
    container: str  # bucket or base directory
    key: str
    size_bytes: int  # resolved at open

    def __post_init__(self):
        if not self.key:
            raise UsageError("object key must be non-empty")


@dataclass(frozen=True)
class ChunkPlan:
    chunk_bytes_sc: int
    ranges: tuple[tuple[int, int], ...]  # (start, length), ascending, exact cover


def plan_chunks(ref: ObjectRef, chunk_bytes: int) -> ChunkPlan:
    """Slice [0, size) into ceil(size/S_c) contiguous ranges."""
    if chunk_bytes < 1:
        raise UsageError("chunk_bytes must be >= 1")
    size = ref.size_bytes
    ranges = []
    for index in range(math.ceil(size / chunk_bytes)):
        start = index * chunk_bytes
        ranges.append((start, min(chunk_bytes, size - start)))
    return ChunkPlan(chunk_bytes, tuple(ranges))


class ObjectReader:
    """Backend handle with positioned reads; safe for concurrent readers."""

    ref: ObjectRef

    def read_range(self, start: int, length: int) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LocalDirReader(ObjectReader):
    def __init__(self, path: str) -> None:
        p = Path(path)
        if not p.is_file():
            raise ObjectNotFound(f"no such file: {path}")
        try:
            size = p.stat().st_size
        except OSError as exc:
            raise SizeUnavailable(str(exc)) from None
        self.ref = ObjectRef(Backend.LOCAL_DIR, str(p.parent), p.name, size)
        self._fd = os.open(path, os.O_RDONLY)

    def read_range(self, start: int, length: int) -> bytes:
        if start < 0 or start + length > self.ref.size_bytes:
            raise RangeError(
                f"range ({start}, {length}) outside object of {self.ref.size_bytes} bytes"
            )
        try:
            data = os.pread(self._fd, length, start)
        except OSError as exc:
            raise IoError(f"read failed: {exc}") from None
        if len(data) != length:
            raise RangeError(f"short read: got {len(data)} of {length} bytes")
        return data

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1


def _sigv4_headers(
    method: str,
    url_path: str,
    host: str,
    access_key: str,
    secret_key: str,
    region: str,
    extra_headers: dict[str, str],
) -> dict[str, str]:
    """Sign a payloadless request with AWS Signature Version 4."""
    now = datetime.datetime.now(datetime.timezone.utc)
    amz_date = now.strftime("%Y%m%dT%H%M%SZ")
    date_stamp = now.strftime("%Y%m%d")
    payload_hash = hashlib.sha256(b"").hexdigest()
    headers = {
        "host": host,
        "x-amz-content-sha256": payload_hash,
        "x-amz-date": amz_date,
    }
    headers.update({k.lower(): v for k, v in extra_headers.items()})
    signed_names = ";".join(sorted(headers))
    canonical_headers = "".join(f"{k}:{headers[k]}\n" for k in sorted(headers))
    canonical_request = "\n".join(
        [method, quote(url_path), "", canonical_headers, signed_names, payload_hash]
    )
    scope = f"{date_stamp}/{region}/s3/aws4_request"
    string_to_sign = "\n".join(
        [
            "AWS4-HMAC-SHA256",
            amz_date,
            scope,
            hashlib.sha256(canonical_request.encode()).hexdigest(),
        ]
    )

    def _hmac(key: bytes, msg: str) -> bytes:
        return hmac.new(key, msg.encode(), hashlib.sha256).digest()

    signing_key = _hmac(
        _hmac(_hmac(_hmac(b"AWS4" + secret_key.encode(), date_stamp), region), "s3"),
        "aws4_request",
    )
    signature = hmac.new(signing_key, string_to_sign.encode(), hashlib.sha256).hexdigest()
    out = dict(headers)
    out["authorization"] = (
        f"AWS4-HMAC-SHA256 Credential={access_key}/{scope}, "
        f"SignedHeaders={signed_names}, Signature={signature}"
    )
    del out["host"]  # requests sets it from the URL
    return out


class S3CompatibleReader(ObjectReader):
    """Range GETs against an S3-compatible HTTP endpoint (path-style)."""

    def __init__(self, bucket: str, key: str, env: Optional[dict] = None) -> None:
        env = env if env is not None else os.environ
        endpoint = env.get(ENV_ENDPOINT)
        if not endpoint:
            raise UsageError(
                f"s3:// endpoints need {ENV_ENDPOINT} (base URL of an "
                "S3-compatible server)"
            )
        self._endpoint = endpoint.rstrip("/")
        self._unsigned = env.get(ENV_UNSIGNED, "") == "1"
        self._access_key = env.get(ENV_ACCESS_KEY, "")
        self._secret_key = env.get(ENV_SECRET_KEY, "")
        self._region = env.get(ENV_REGION, "us-east-1")
        if not self._unsigned and not (self._access_key and self._secret_key):
            raise AuthError(
                f"set {ENV_ACCESS_KEY}/{ENV_SECRET_KEY} or {ENV_UNSIGNED}=1"
            )
        self._session = requests.Session()
        self._path = f"/{bucket}/{key}"
        size = self._resolve_size()
        self.ref = ObjectRef(Backend.S3_COMPATIBLE, bucket, key, size)

    @property
    def _url(self) -> str:
        return self._endpoint + quote(self._path)

    def _headers(self, extra: dict[str, str]) -> dict[str, str]:
        if self._unsigned:
            return dict(extra)
        host = self._endpoint.split("://", 1)[-1]
        return _sigv4_headers(
            "GET", self._path, host, self._access_key, self._secret_key,
            self._region, extra,
        )

    def _resolve_size(self) -> int:
        # ranged GET of the first byte: HEAD is not a given on minimal servers,
        # and Content-Range carries the total size
        try:
            resp = self._session.get(
                self._url, headers=self._headers({"range": "bytes=0-0"}), timeout=30
            )
        except requests.RequestException as exc:
            raise IoError(f"size probe failed: {exc}") from None
        if resp.status_code == 404:
            raise ObjectNotFound(self._path)
        if resp.status_code in (401, 403):
            raise AuthError(f"HTTP {resp.status_code} for {self._path}")
        if resp.status_code == 200:
            # server ignored the range header; fall back to Content-Length
            if "Content-Length" not in resp.headers:
                raise SizeUnavailable(f"no Content-Length for {self._path}")
            return int(resp.headers["Content-Length"])
        if resp.status_code == 206:
            content_range = resp.headers.get("Content-Range", "")
            if "/" not in content_range:
                raise SizeUnavailable(f"bad Content-Range {content_range!r}")
            total = content_range.rsplit("/", 1)[1]
            if total == "*":
                raise SizeUnavailable(f"unknown total size for {self._path}")
            return int(total)
        if resp.status_code == 416:
            return 0  # zero-byte object: ranges are unsatisfiable
        raise IoError(f"HTTP {resp.status_code} probing {self._path}")

    def read_range(self, start: int, length: int) -> bytes:
        if start < 0 or start + length > self.ref.size_bytes:
            raise RangeError(
                f"range ({start}, {length}) outside object of {self.ref.size_bytes} bytes"
            )
        if length == 0:
            return b""
        headers = self._headers({"range": f"bytes={start}-{start + length - 1}"})
        try:
            resp = self._session.get(self._url, headers=headers, timeout=120)
        except requests.RequestException as exc:
            raise IoError(f"range GET failed: {exc}") from None
        if resp.status_code == 404:
            raise ObjectNotFound(self._path)
        if resp.status_code in (401, 403):
            raise AuthError(f"HTTP {resp.status_code} for {self._path}")
        if resp.status_code not in (200, 206):
            raise IoError(f"HTTP {resp.status_code} reading {self._path}")
        data = resp.content
        if resp.status_code == 200:
            data = data[start : start + length]  # server ignored the range
        if len(data) != length:
            raise RangeError(f"server returned {len(data)} bytes, wanted {length}")
        return data

    def close(self) -> None:
        self._session.close()


def open_object(uri: EndpointUri, env: Optional[dict] = None) -> ObjectReader:
    """Resolve an object URI to a backend reader (size resolved here)."""
    if uri.scheme == "file":
        return LocalDirReader(uri.path)
    if uri.scheme == "s3":
        return S3CompatibleReader(uri.authority, uri.path, env=env)
    raise UnsupportedBackend(
        f"{uri.scheme}:// has no network backend in this build; "
        "supported object schemes: file://, s3://"
    )


# -- record-aware reads --------------------------------------------------------


class RecordFormat(str, Enum):
    CSV = "csv"
    NDJSON = "ndjson"


def _iter_lines(reader: ObjectReader, io_chunk: int = 1 << 20) -> Iterator[bytes]:
    """Stream LF-terminated lines; a final unterminated line still counts."""
    remainder = b""
    size = reader.ref.size_bytes
    pos = 0
    while pos < size:
        block = reader.read_range(pos, min(io_chunk, size - pos))
        pos += len(block)
        data = remainder + block
        lines = data.split(b"\n")
        remainder = lines.pop()
        yield from lines
    if remainder:
        yield remainder


def read_records(
    reader: ObjectReader,
    format: RecordFormat | str,
    *,
    partitions: int = 1,
    csv_header: bool = False,
    max_record_bytes: Optional[float] = None,
) -> Iterator[Record]:
    """Parse a structured object into records.

    Lines split on LF; a trailing CR is treated as part of the terminator
    (CRLF input). Record values are the raw line bytes without terminators.
    CSV skips the first line when csv_header is set; NDJSON validates each
    line as JSON. Offsets count 0,1,2,... and partitions round-robin over the
    destination partition count.
    """
    fmt = RecordFormat(format)
    if partitions < 1:
        raise UsageError("partitions must be >= 1")
    offset = 0
    for line_no, line in enumerate(_iter_lines(reader), start=1):
        if line.endswith(b"\r"):
            line = line[:-1]
        if csv_header and line_no == 1 and fmt is RecordFormat.CSV:
            continue
        if fmt is RecordFormat.NDJSON:
            try:
                json.loads(line)
            except (ValueError, UnicodeDecodeError) as exc:
                raise FormatError(f"line {line_no}: invalid JSON ({exc})") from None
        if max_record_bytes is not None and len(line) > max_record_bytes:
            raise OversizedRecord(
                f"line {line_no} is {len(line)} bytes, larger than the batch "
                f"size threshold ({int(max_record_bytes)}); transfer this object "
                "with --format raw instead"
            )
        yield Record(
            partition=offset % partitions,
            offset=offset,
            key=None,
            value=line,
        )
        offset += 1


# -- source operator -----------------------------------------------------------


class _ChunkCursor:
    """Shared claim counter for parallel range readers."""

    def __init__(self, n: int) -> None:
        self._it = iter(range(n))
        self._lock = threading.Lock()

    def claim(self) -> Optional[int]:
        with self._lock:
            return next(self._it, None)


class _OrderedEmitter:
    """Re-orders parallel chunk reads back into chunk-index order."""

    def __init__(self, emit) -> None:
        self._emit = emit
        self._lock = threading.Lock()
        self._next = 0
        self._ready: dict[int, Record] = {}

    def submit(self, index: int, record: Record) -> None:
        with self._lock:
            self._ready[index] = record
            while self._next in self._ready:
                self._emit(self._ready.pop(self._next))
                self._next += 1


def object_source_run(
    plan: PipelinePlan,
    reader: ObjectReader,
    out: BoundedQueue[RecordBatch],
    *,
    record_format: RecordFormat | str | None = None,
    dest_partitions: int = 1,
    csv_header: bool = False,
    ordered: bool = False,
    stop: Optional[threading.Event] = None,
) -> TransferStats:
    """Run the object source: raw chunks or records, pushed with backpressure.

    Raw mode turns each chunk into a single-record batch (value = chunk
    bytes, offset = chunk index) and bypasses the trigger batcher; record
    mode streams parsed records through the trigger batcher. The queue is
    closed on completion.
    """
    stats = TransferStats()
    started = time.monotonic()
    stop = stop or threading.Event()
    try:
        if plan.source_kind is SourceKind.OBJECT_RAW:
            _run_raw(plan, reader, out, stats, ordered, stop)
        elif plan.source_kind is SourceKind.OBJECT_RECORDS:
            if record_format is None:
                raise UsageError("record_format required for a records source")
            _run_records(
                plan, reader, RecordFormat(record_format), out, stats,
                dest_partitions, csv_header, stop,
            )
        else:
            raise UsageError(f"not an object source: {plan.source_kind}")
        out.close()
    except QueueClosed:
        pass  # downstream aborted; stats reflect what was sent
    finally:
        stats.wall_seconds = time.monotonic() - started
    return stats


def _run_raw(plan, reader, out, stats, ordered, stop) -> None:
    chunk_plan = plan_chunks(reader.ref, plan.chunk_bytes_sc)
    id_alloc = BatchIdAllocator()
    emit_lock = threading.Lock()
    errors: list[Exception] = []

    def emit(record: Record) -> None:
        with emit_lock:
            batch = RecordBatch(
                batch_id=id_alloc.next_id(),
                records=[record],
                partition_hint=None,
                total_bytes=len(record.value),
                created_at=time.monotonic(),
                emission_cause=CAUSE_SIZE,
            )
            out.push(batch)
            stats.batches += 1
            stats.records_moved += 1
            stats.bytes_moved += len(record.value)
            stats.emission_causes[CAUSE_SIZE] += 1

    emitter = _OrderedEmitter(emit) if ordered else None
    cursor = _ChunkCursor(len(chunk_plan.ranges))

    def worker() -> None:
        while not stop.is_set():
            index = cursor.claim()
            if index is None:
                return
            start, length = chunk_plan.ranges[index]
            try:
                data = reader.read_range(start, length)
            except Exception as exc:  # noqa: BLE001
                stats.failed_range = (start, length)
                errors.append(exc)
                stop.set()
                return
            record = Record(
                partition=0,
                offset=index,
                key=None,
                value=data,
                source_byte_range=(start, length),
            )
            try:
                if emitter is not None:
                    emitter.submit(index, record)
                else:
                    emit(record)
            except QueueClosed:
                stop.set()
                return

    n_workers = min(plan.parallel_connections, max(1, len(chunk_plan.ranges)))
    threads = [
        threading.Thread(target=worker, name=f"skyhost-objread-{i}", daemon=True)
        for i in range(n_workers)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]


def object_sink_run(
    plan: PipelinePlan,
    dest: EndpointUri,
    in_queue: BoundedQueue[RecordBatch],
    *,
    completion=None,
    stop: Optional[threading.Event] = None,
) -> TransferStats:
    """Minimal object sink (test support): writes batches to a local file.

    Raw batches land at chunk_index * chunk_bytes so parallel arrivals
    reassemble correctly; record batches append values + LF in arrival
    order. Non-file object sinks have no backend in this build.
    """
    if dest.scheme != "file":
        raise UnsupportedBackend(
            f"{dest.scheme}:// object sinks are not supported in this build "
            "(only file://)"
        )
    stats = TransferStats()
    started = time.monotonic()
    stop = stop or threading.Event()
    path = Path(dest.path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw_mode = plan.source_kind is SourceKind.OBJECT_RAW
    try:
        with open(path, "wb") as fh:
            while not stop.is_set():
                try:
                    batch = in_queue.pop(timeout=0.2)
                except TimeoutError:
                    continue
                except QueueClosed:
                    break
                try:
                    for record in batch.records:
                        if raw_mode:
                            fh.seek(record.offset * plan.chunk_bytes_sc)
                            fh.write(record.value)
                        else:
                            fh.write(record.value)
                            fh.write(b"\n")
                    fh.flush()
                except OSError as exc:
                    raise IoError(f"write to {path} failed: {exc}") from None
                stats.batches += 1
                stats.records_moved += len(batch.records)
                stats.bytes_moved += batch.total_bytes
                if completion is not None:
                    completion(batch.batch_id)
    finally:
        stats.wall_seconds = time.monotonic() - started
    return stats


def _run_records(
    plan, reader, fmt: RecordFormat, out, stats, dest_partitions, csv_header, stop
) -> None:
    batcher = Batcher(plan.trigger, BatchIdAllocator())
    granularity = plan.trigger.poll_granularity()
    last_poll = time.monotonic()

    def push(batch: RecordBatch) -> None:
        out.push(batch)
        stats.batches += 1
        stats.records_moved += len(batch.records)
        stats.bytes_moved += batch.total_bytes
        stats.emission_causes[batch.emission_cause] += 1

    records = read_records(
        reader,
        fmt,
        partitions=dest_partitions,
        csv_header=csv_header,
        max_record_bytes=plan.trigger.size_threshold_sb,
    )
    for record in records:
        if stop.is_set():
            return
        now = time.monotonic()
        emitted = batcher.offer(record, now)
        if emitted is not None:
            push(emitted)
        if now - last_poll >= granularity:
            last_poll = now
            timed = batcher.poll_time(now)
            if timed is not None:
                push(timed)
    final = batcher.flush()
    if final is not None:
        push(final)
