"""Stream source and sink operators over the broker client interface.

The source fetches from every partition, feeds the trigger batcher, and
commits offsets only once the transport acknowledges the batch containing
them; acknowledgments can arrive out of order across connections, so commits
advance over a contiguous acknowledged prefix per partition. The sink
produces records to the destination topic and reports each batch durably
produced so the receiver can release its acknowledgment.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import deque
from typing import Callable, Optional

from .broker import BrokerClient
from .errors import (
    ConnectivityError,
    MessageTooLarge,
    QueueClosed,
    TransferAborted,
    TransferError,
    UsageError,
)
from .pipeline import (
    Batcher,
    BatchIdAllocator,
    BoundedQueue,
    PipelinePlan,
    Record,
    RecordBatch,
    SourceKind,
    TransferStats,
)
from .transport import RetryPolicy
from .units import MB

log = logging.getLogger(__name__)

DEFAULT_FETCH_BYTES = 1 * MB


def with_retry(policy: RetryPolicy, stop: threading.Event, op: Callable, *args):
    """Run a broker call, reconnecting with backoff on connectivity errors."""
    started = time.monotonic()
    delays = policy.delays()
    while True:
        try:
            return op(*args)
        except ConnectivityError as exc:
            if stop.is_set():
                raise TransferAborted("transfer aborted") from None
            delay = next(delays)
            if time.monotonic() - started + delay > policy.deadline:
                raise ConnectivityError(f"broker retries exhausted: {exc}") from None
            log.info("broker call failed (%s); retrying in %.2fs", exc, delay)
            time.sleep(delay)
            reconnect = getattr(getattr(op, "__self__", None), "reconnect", None)
            if reconnect is not None:
                try:
                    reconnect()
                except ConnectivityError:
                    pass  # next attempt fails fast and backs off again


class CommitTracker:
    """Maps transport acknowledgments back to committable source offsets.

    Batches register at emission in per-partition FIFO order; an
    acknowledgment marks a batch done, and each partition's commit advances
    only across its contiguous acknowledged prefix, so an unacknowledged
    earlier batch is never skipped. The committed value is the highest
    acknowledged offset; a restart resumes at committed + 1.
    """

    def __init__(self, client: BrokerClient, group: str, topic: str,
                 retry: Optional[RetryPolicy] = None,
                 stop: Optional[threading.Event] = None) -> None:
        self._client = client
        self.group = group
        self.topic = topic
        self._retry = retry or RetryPolicy()
        self._stop = stop or threading.Event()
        self._lock = threading.Lock()
        self._fifos: dict[int, deque] = {}  # partition -> deque of [batch_id, last_offset]
        self._batches: dict[int, list[int]] = {}  # batch_id -> partitions touched
        self._acked: set[int] = set()
        self.commits: list[tuple[int, int]] = []  # (partition, offset) in commit order

    def register(self, batch: RecordBatch) -> None:
        per_partition: dict[int, int] = {}
        for record in batch.records:
            prev = per_partition.get(record.partition, -1)
            if record.offset > prev:
                per_partition[record.partition] = record.offset
        with self._lock:
            self._batches[batch.batch_id] = list(per_partition)
            for partition, last in per_partition.items():
                self._fifos.setdefault(partition, deque()).append(
                    (batch.batch_id, last)
                )

    def acknowledge(self, batch_id: int) -> None:
        to_commit: list[tuple[int, int]] = []
        with self._lock:
            if batch_id not in self._batches or batch_id in self._acked:
                return  # duplicate or foreign ack
            self._acked.add(batch_id)
            for partition in self._batches[batch_id]:
                fifo = self._fifos[partition]
                last_ready = None
                while fifo and fifo[0][0] in self._acked:
                    _, last_ready = fifo.popleft()
                if last_ready is not None:
                    to_commit.append((partition, last_ready))
        for partition, offset in to_commit:
            with_retry(
                self._retry, self._stop,
                self._client.commit, self.group, self.topic, partition, offset,
            )
            with self._lock:
                self.commits.append((partition, offset))

    def pending(self) -> int:
        with self._lock:
            return len(self._batches) - len(self._acked)


def commit_worker(tracker: CommitTracker, ack_queue: BoundedQueue[int]) -> None:
    """Drain transport acks into commits until the ack channel closes."""
    try:
        while True:
            tracker.acknowledge(ack_queue.pop())
    except QueueClosed:
        pass


def stream_source_run(
    plan: PipelinePlan,
    client: BrokerClient,
    topic: str,
    group: str,
    out: BoundedQueue[RecordBatch],
    *,
    tracker: Optional[CommitTracker] = None,
    duration: Optional[float] = None,
    until_end_offset: bool = True,
    fetch_bytes: int = DEFAULT_FETCH_BYTES,
    retry: Optional[RetryPolicy] = None,
    stop: Optional[threading.Event] = None,
) -> TransferStats:
    """Consume a topic into trigger-driven batches with backpressure.

    Resumes after the committed offset per partition. With partition
    preservation each partition gets its own batcher (shared batch-id
    sequence); otherwise one batcher mixes partitions. Stops at the
    end-offset snapshot, after `duration` seconds, or on `stop`;
    whatever is open then flushes as a final partial batch.
    """
    if plan.source_kind is not SourceKind.STREAM:
        raise UsageError(f"not a stream source: {plan.source_kind}")
    retry = retry or RetryPolicy()
    stop = stop or threading.Event()
    stats = TransferStats()
    started = time.monotonic()

    meta = with_retry(retry, stop, client.metadata, topic, group)
    partitions = list(range(meta.partitions))
    next_offset = {
        p: meta.committed[p] + 1 if meta.committed[p] >= 0 else 0 for p in partitions
    }
    end_snapshot = {p: meta.end_offsets[p] for p in partitions} if until_end_offset else None

    id_alloc = BatchIdAllocator()
    if plan.preserve_partitions:
        batchers = {
            p: Batcher(plan.trigger, id_alloc, partition_hint=p) for p in partitions
        }
    else:
        shared = Batcher(plan.trigger, id_alloc)
        batchers = {p: shared for p in partitions}
    granularity = plan.trigger.poll_granularity()
    deadline = started + duration if duration is not None else None

    def push(batch: RecordBatch) -> None:
        if tracker is not None:
            tracker.register(batch)
        out.push(batch)
        stats.batches += 1
        stats.records_moved += len(batch.records)
        stats.bytes_moved += batch.total_bytes
        stats.emission_causes[batch.emission_cause] += 1

    def poll_all(now: float) -> None:
        for batcher in set(batchers.values()):
            emitted = batcher.poll_time(now)
            if emitted is not None:
                push(emitted)

    try:
        last_poll = time.monotonic()
        while not stop.is_set():
            progressed = False
            for p in partitions:
                if stop.is_set():
                    break
                if end_snapshot is not None and next_offset[p] >= end_snapshot[p]:
                    continue
                records = with_retry(
                    retry, stop, client.fetch, topic, p, next_offset[p], fetch_bytes
                )
                if end_snapshot is not None:
                    records = [r for r in records if r[0] < end_snapshot[p]]
                now = time.monotonic()
                for offset, key, value in records:
                    emitted = batchers[p].offer(
                        Record(partition=p, offset=offset, key=key, value=value), now
                    )
                    if emitted is not None:
                        push(emitted)
                if records:
                    next_offset[p] = records[-1][0] + 1
                    progressed = True
                if now - last_poll >= granularity:
                    last_poll = now
                    poll_all(now)
            now = time.monotonic()
            if now - last_poll >= granularity:
                last_poll = now
                poll_all(now)
            if deadline is not None and now >= deadline:
                break
            if end_snapshot is not None and all(
                next_offset[p] >= end_snapshot[p] for p in partitions
            ):
                break
            if not progressed:
                time.sleep(min(0.005, granularity))
        for batcher in set(batchers.values()):
            final = batcher.flush()
            if final is not None:
                push(final)
        out.close()
    except QueueClosed:
        pass  # downstream aborted
    finally:
        stats.wall_seconds = time.monotonic() - started
    return stats


def stream_sink_run(
    plan: PipelinePlan,
    client: BrokerClient,
    topic: str,
    in_queue: BoundedQueue[RecordBatch],
    *,
    completion: Optional[Callable[[int], None]] = None,
    source_partitions: Optional[int] = None,
    retry: Optional[RetryPolicy] = None,
    stop: Optional[threading.Event] = None,
) -> TransferStats:
    """Produce incoming batches to the destination topic.

    Partition choice: the record's own partition when preservation is on and
    the destination partition count matches the source, round-robin
    otherwise. Each batch is reported via `completion` only after the broker
    confirmed every record, which is what lets the transport acknowledge it.
    """
    retry = retry or RetryPolicy()
    stop = stop or threading.Event()
    stats = TransferStats()
    started = time.monotonic()
    meta = with_retry(retry, stop, client.metadata, topic)
    dest_partitions = meta.partitions
    if plan.preserve_partitions:
        if source_partitions is None or source_partitions != dest_partitions:
            raise UsageError(
                f"--preserve-partitions requires matching partition counts "
                f"(source {source_partitions}, destination {dest_partitions})"
            )
    round_robin = 0
    try:
        while not stop.is_set():
            try:
                batch = in_queue.pop(timeout=0.2)
            except TimeoutError:
                continue
            except QueueClosed:
                break
            entries = []
            for record in batch.records:
                if plan.preserve_partitions:
                    partition = record.partition
                else:
                    partition = round_robin % dest_partitions
                    round_robin += 1
                entries.append((partition, record.key, record.value))
            try:
                with_retry(retry, stop, client.produce_many, topic, entries)
            except MessageTooLarge as exc:
                raise TransferError(
                    f"destination broker rejected a record from batch "
                    f"{batch.batch_id}: {exc}; raise the broker's "
                    "--max-message-bytes or use smaller records/chunks"
                ) from None
            stats.batches += 1
            stats.records_moved += len(batch.records)
            stats.bytes_moved += batch.total_bytes
            if completion is not None:
                completion(batch.batch_id)
    finally:
        stats.wall_seconds = time.monotonic() - started
    return stats
