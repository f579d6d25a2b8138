"""Shared data-plane pieces: records, the trigger-driven micro-batcher,
bounded blocking queues, and pipeline plans.

The batcher and the queue are the two halves of flow control: triggers decide
when a batch ships, bounded queues make a slow consumer stall its producers
instead of growing buffers.
"""

from __future__ import annotations

import math
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Generic, Optional, TypeVar

from .errors import QueueClosed, UnsupportedRoute, UsageError
from .units import MB
from .uris import EndpointUri

T = TypeVar("T")

# Batch emission causes (TransferReport histogram keys).
CAUSE_SIZE = "size"
CAUSE_COUNT = "count"
CAUSE_TIME = "time"
CAUSE_FINAL = "final"  # end-of-input / --duration flush, not a trigger

DISABLED = math.inf  # sentinel for a disabled trigger


@dataclass(slots=True)
class Record:
    """One unit of structured data: a (partition, offset, key, value) tuple.

    Raw-mode byte slices are records too: the value is the chunk, the offset
    is the chunk index, and source_byte_range holds (start, length).
    """

    partition: int
    offset: int
    key: Optional[bytes]
    value: bytes
    source_byte_range: Optional[tuple[int, int]] = None

    def size_bytes(self) -> int:
        return (len(self.key) if self.key else 0) + len(self.value)


@dataclass(slots=True)
class RecordBatch:
    batch_id: int
    records: list[Record]
    partition_hint: Optional[int]
    total_bytes: int
    created_at: float  # monotonic timestamp
    emission_cause: str = CAUSE_SIZE

    def recompute_total(self) -> int:
        return sum(r.size_bytes() for r in self.records)


def batch_weigher(batch: RecordBatch) -> int:
    return batch.total_bytes


@dataclass(frozen=True)
class BatchTriggerConfig:
    """Micro-batch thresholds; any may be DISABLED (inf), one must be finite."""

    size_threshold_sb: float = 32 * MB
    time_limit_tmax: float = 10.0
    count_limit_cmax: float = 100_000.0

    def __post_init__(self):
        for name, value in (
            ("size_threshold_sb", self.size_threshold_sb),
            ("time_limit_tmax", self.time_limit_tmax),
            ("count_limit_cmax", self.count_limit_cmax),
        ):
            if not value > 0:
                raise UsageError(f"{name} must be > 0 (or disabled)")
        if all(
            math.isinf(v)
            for v in (self.size_threshold_sb, self.time_limit_tmax, self.count_limit_cmax)
        ):
            raise UsageError("at least one batch trigger must be enabled")

    def poll_granularity(self) -> float:
        """Driver poll interval for the time trigger: T_max/10 in [1ms, 100ms]."""
        if math.isinf(self.time_limit_tmax):
            return 0.1
        return min(max(self.time_limit_tmax / 10.0, 0.001), 0.1)


class BatchIdAllocator:
    """Per-transfer monotonic batch ids, assigned at emission time."""

    def __init__(self) -> None:
        self._next = 0
        self._lock = threading.Lock()

    def next_id(self) -> int:
        with self._lock:
            value = self._next
            self._next += 1
            return value


class Batcher:
    """Accumulates records into at most one open batch and emits it when the
    first trigger fires.

    Owned by exactly one pipeline stage; not thread-safe by design. The time
    trigger is evaluated by the driver's periodic poll_time(), not a timer
    thread. A record bigger than the size threshold becomes a singleton batch
    emitted immediately (the size trigger fires on append).
    """

    def __init__(
        self,
        trigger: BatchTriggerConfig,
        id_alloc: BatchIdAllocator,
        partition_hint: Optional[int] = None,
    ) -> None:
        self.trigger = trigger
        self._id_alloc = id_alloc
        self._partition_hint = partition_hint
        self._records: list[Record] = []
        self._bytes = 0
        self._opened_at = 0.0

    @property
    def pending_count(self) -> int:
        return len(self._records)

    @property
    def pending_bytes(self) -> int:
        return self._bytes

    def _emit(self, cause: str) -> RecordBatch:
        batch = RecordBatch(
            batch_id=self._id_alloc.next_id(),
            records=self._records,
            partition_hint=self._partition_hint,
            total_bytes=self._bytes,
            created_at=self._opened_at,
            emission_cause=cause,
        )
        self._records = []
        self._bytes = 0
        return batch

    def offer(self, record: Record, now: float) -> Optional[RecordBatch]:
        """Append a record; returns the emitted batch when a trigger fires.

        Size wins over count when one record satisfies both.
        """
        if not self._records:
            self._opened_at = now
        self._records.append(record)
        self._bytes += record.size_bytes()
        if self._bytes >= self.trigger.size_threshold_sb:
            return self._emit(CAUSE_SIZE)
        if len(self._records) >= self.trigger.count_limit_cmax:
            return self._emit(CAUSE_COUNT)
        return None

    def poll_time(self, now: float) -> Optional[RecordBatch]:
        """Emit the open batch iff it is non-empty and has aged past T_max."""
        if self._records and now - self._opened_at >= self.trigger.time_limit_tmax:
            return self._emit(CAUSE_TIME)
        return None

    def flush(self) -> Optional[RecordBatch]:
        """Emit whatever is open at end of input; never emits an empty batch."""
        if self._records:
            return self._emit(CAUSE_FINAL)
        return None


class BoundedQueue(Generic[T]):
    """Blocking FIFO with a hard capacity: a full queue blocks the producer.

    close() ends the stream: blocked producers fail with QueueClosed,
    consumers drain the remaining items and then get QueueClosed. abort()
    additionally discards queued items so consumers stop immediately.
    Safe for any number of concurrent producers and consumers. An optional
    weigher tracks byte occupancy for backpressure accounting.
    """

    def __init__(
        self,
        capacity: Optional[int] = 4,
        weigher: Optional[Callable[[T], int]] = None,
    ) -> None:
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._weigher = weigher
        self._items: deque[tuple[T, int]] = deque()
        self._lock = threading.Lock()
        self._not_full = threading.Condition(self._lock)
        self._not_empty = threading.Condition(self._lock)
        self._closed = False
        self._bytes = 0
        self.peak_items = 0
        self.peak_bytes = 0

    def push(self, item: T) -> None:
        with self._lock:
            while True:
                if self._closed:
                    raise QueueClosed()
                if self.capacity is None or len(self._items) < self.capacity:
                    break
                self._not_full.wait()
            weight = self._weigher(item) if self._weigher else 0
            self._items.append((item, weight))
            self._bytes += weight
            self.peak_items = max(self.peak_items, len(self._items))
            self.peak_bytes = max(self.peak_bytes, self._bytes)
            self._not_empty.notify()

    def pop(self, timeout: Optional[float] = None) -> T:
        with self._lock:
            while not self._items:
                if self._closed:
                    raise QueueClosed()
                if not self._not_empty.wait(timeout=timeout):
                    raise TimeoutError("queue pop timed out")
            item, weight = self._items.popleft()
            self._bytes -= weight
            self._not_full.notify()
            return item

    def close(self) -> None:
        with self._lock:
            self._closed = True
            self._not_full.notify_all()
            self._not_empty.notify_all()

    def abort(self) -> None:
        with self._lock:
            self._closed = True
            self._items.clear()
            self._bytes = 0
            self._not_full.notify_all()
            self._not_empty.notify_all()

    @property
    def closed(self) -> bool:
        with self._lock:
            return self._closed

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)

    @property
    def bytes_occupancy(self) -> int:
        with self._lock:
            return self._bytes


class SourceKind(str, Enum):
    OBJECT_RAW = "object-raw"
    OBJECT_RECORDS = "object-records"
    STREAM = "stream"


class SinkKind(str, Enum):
    OBJECT = "object"
    STREAM = "stream"


FORMATS = ("raw", "csv", "ndjson")


@dataclass
class TransferOptions:
    """The cp flag bag; defaults mirror the standard evaluation configuration."""

    format: str = "raw"
    batch_bytes: int = 32 * MB
    batch_max_seconds: float = 10.0
    batch_max_count: int = 100_000
    chunk_bytes: int = 16 * MB
    parallel: int = 1
    compress: bool = False
    preserve_partitions: bool = False
    csv_header: bool = False
    ordered: bool = False
    queue_capacity: int = 4
    transport_port: int = 0  # 0 = ephemeral; CLI default is 7331
    remote_receiver: Optional[str] = None
    stage_dir: Optional[str] = None
    duration: Optional[float] = None
    until_end_offset: bool = False
    group: str = "skyhost-cp"
    fetch_bytes: int = 1 * MB
    connect_deadline: float = 30.0

    def trigger(self) -> BatchTriggerConfig:
        return BatchTriggerConfig(
            size_threshold_sb=float(self.batch_bytes),
            time_limit_tmax=float(self.batch_max_seconds),
            count_limit_cmax=float(self.batch_max_count),
        )


@dataclass(frozen=True)
class PipelinePlan:
    """What the DAG will look like for one transfer."""

    source_kind: SourceKind
    sink_kind: SinkKind
    trigger: BatchTriggerConfig
    chunk_bytes_sc: int
    parallel_connections: int
    compression: bool
    preserve_partitions: bool

    def __post_init__(self):
        if self.source_kind is SourceKind.STREAM and self.sink_kind is SinkKind.OBJECT:
            raise UnsupportedRoute("stream-to-object transfers are not supported")
        if self.chunk_bytes_sc < 1:
            raise UsageError("chunk_bytes must be >= 1")
        if self.parallel_connections < 1:
            raise UsageError("parallel must be >= 1")


def build_plan(
    source: EndpointUri, sink: EndpointUri, options: TransferOptions
) -> PipelinePlan:
    """Choose operators from the endpoint URIs and transfer options.

    Object sources read raw byte slices or structured records depending on
    --format; stream sources always consume records. Stream-to-object routes
    are rejected.
    """
    if options.format not in FORMATS:
        raise UsageError(f"unknown format {options.format!r}, expected one of {FORMATS}")
    if source.is_stream:
        source_kind = SourceKind.STREAM
    elif options.format == "raw":
        source_kind = SourceKind.OBJECT_RAW
    else:
        source_kind = SourceKind.OBJECT_RECORDS
    sink_kind = SinkKind.STREAM if sink.is_stream else SinkKind.OBJECT
    return PipelinePlan(
        source_kind=source_kind,
        sink_kind=sink_kind,
        trigger=options.trigger(),
        chunk_bytes_sc=options.chunk_bytes,
        parallel_connections=options.parallel,
        compression=options.compress,
        preserve_partitions=options.preserve_partitions,
    )


@dataclass
class TransferStats:
    """Per-operator counters rolled up into the final report."""

    bytes_moved: int = 0
    records_moved: int = 0
    batches: int = 0
    wall_seconds: float = 0.0
    retransmits: int = 0
    emission_causes: dict[str, int] = field(
        default_factory=lambda: {CAUSE_SIZE: 0, CAUSE_COUNT: 0, CAUSE_TIME: 0, CAUSE_FINAL: 0}
    )
    wire_bytes: int = 0
    wire_bytes_uncompressed: int = 0
    per_connection: list[int] = field(default_factory=list)
    failed_range: Optional[tuple[int, int]] = None
