"""Transfer orchestration: wires source, transport, and sink workers into one
running pipeline and reports the outcome.

Both gateways run as workers inside this process by default (the transport
still crosses real loopback TCP); --remote-receiver attaches the sender to a
separately launched `skyhost receive` process instead. Shutdown ordering:
the source closes its queue, the sender FINs after its last acknowledgment,
the receiver closes the sink queue after all FINs, and the sink drains.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

from .broker import BrokerClient, TcpBrokerClient
from .errors import SkyhostError, TransferAborted, UsageError
from .objstore import object_sink_run, object_source_run, open_object
from .pipeline import (
    BoundedQueue,
    PipelinePlan,
    RecordBatch,
    SinkKind,
    SourceKind,
    TransferOptions,
    TransferStats,
    batch_weigher,
    build_plan,
)
from .streamops import (
    CommitTracker,
    commit_worker,
    stream_sink_run,
    stream_source_run,
)
from .transport import (
    ACK_ON_COMPLETION,
    ACK_ON_PUSH,
    ACK_ON_STAGE,
    Receiver,
    RetryPolicy,
    Sender,
)
from .units import MB
from .uris import EndpointUri, parse_uri

log = logging.getLogger(__name__)


@dataclass
class TransferReport:
    """What a transfer did, with the derived rates the CLI prints."""

    bytes_moved: int
    records_moved: int
    wall_seconds: float
    throughput_bytes_per_sec: float
    msgs_per_sec: float
    batches: int
    retransmits: int
    emission_causes: dict[str, int]
    transport: dict = field(default_factory=dict)

    @classmethod
    def assemble(
        cls,
        source: TransferStats,
        sender: Optional[TransferStats],
        wall_seconds: float,
    ) -> "TransferReport":
        wall = max(wall_seconds, 1e-9)
        wire = sender.wire_bytes if sender else 0
        wire_raw = sender.wire_bytes_uncompressed if sender else 0
        transport = {
            "wire_bytes": wire,
            "wire_bytes_uncompressed": wire_raw,
            "compression_ratio": (wire_raw / wire) if wire else 1.0,
            "per_connection_batches": list(sender.per_connection) if sender else [],
        }
        return cls(
            bytes_moved=source.bytes_moved,
            records_moved=source.records_moved,
            wall_seconds=wall_seconds,
            throughput_bytes_per_sec=source.bytes_moved / wall,
            msgs_per_sec=source.records_moved / wall,
            batches=source.batches,
            retransmits=sender.retransmits if sender else 0,
            emission_causes=dict(source.emission_causes),
            transport=transport,
        )

    def to_dict(self) -> dict:
        return {
            "bytes_moved": self.bytes_moved,
            "records_moved": self.records_moved,
            "wall_seconds": self.wall_seconds,
            "throughput_bytes_per_sec": self.throughput_bytes_per_sec,
            "msgs_per_sec": self.msgs_per_sec,
            "batches": self.batches,
            "retransmits": self.retransmits,
            "emission_causes": self.emission_causes,
            "transport": self.transport,
        }

    def text_lines(self) -> list[str]:
        causes = ", ".join(f"{k}={v}" for k, v in self.emission_causes.items())
        return [
            f"bytes moved:      {self.bytes_moved} ({self.bytes_moved / MB:.3f} MB)",
            f"records moved:    {self.records_moved}",
            f"batches:          {self.batches}",
            f"wall time:        {self.wall_seconds:.3f} s",
            f"throughput:       {self.throughput_bytes_per_sec / MB:.3f} MB/s",
            f"message rate:     {self.msgs_per_sec:.1f} msgs/s",
            f"retransmits:      {self.retransmits}",
            f"emission causes:  {causes}",
        ]


class Transfer:
    """One cp run: build the plan, wire the workers, run to completion."""

    def __init__(
        self,
        source: str | EndpointUri,
        sink: str | EndpointUri,
        options: Optional[TransferOptions] = None,
    ) -> None:
        self.source_uri = parse_uri(source) if isinstance(source, str) else source
        self.sink_uri = parse_uri(sink) if isinstance(sink, str) else sink
        self.options = options or TransferOptions()
        self.plan: PipelinePlan = build_plan(self.source_uri, self.sink_uri, self.options)
        self._stop = threading.Event()
        self._errors: list[BaseException] = []
        self._error_lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._results: dict[str, TransferStats] = {}
        self._started_at = 0.0
        self._finished = threading.Event()
        self._report: Optional[TransferReport] = None
        self._killed = False

        self.src_queue: BoundedQueue[RecordBatch] = BoundedQueue(
            self.options.queue_capacity, weigher=batch_weigher
        )
        self.dst_queue: BoundedQueue[RecordBatch] = BoundedQueue(
            self.options.queue_capacity, weigher=batch_weigher
        )
        self.ack_queue: BoundedQueue[int] = BoundedQueue(capacity=None)
        self.receiver: Optional[Receiver] = None
        self.sender: Optional[Sender] = None
        self.tracker: Optional[CommitTracker] = None
        self._clients: list[BrokerClient] = []
        self._readers = []

    # -- setup ------------------------------------------------------------

    def _retry(self) -> RetryPolicy:
        return RetryPolicy(deadline=self.options.connect_deadline)

    def _broker_client(self, uri: EndpointUri) -> BrokerClient:
        host, port = uri.host_port()
        client = TcpBrokerClient(host, port)
        self._clients.append(client)
        return client

    def _needs_order(self) -> bool:
        if self.options.ordered:
            return True
        return self.plan.source_kind is SourceKind.STREAM and self.plan.preserve_partitions

    def start(self) -> "Transfer":
        opts = self.options
        plan = self.plan
        self._started_at = time.monotonic()

        # destination side: partition counts are needed by the source (round
        # robin) and the preserve-partitions alignment check happens up front
        sink_client: Optional[BrokerClient] = None
        dest_partitions = 1
        source_partitions: Optional[int] = None
        if plan.sink_kind is SinkKind.STREAM and not opts.remote_receiver:
            sink_client = self._broker_client(self.sink_uri)
            dest_partitions = sink_client.metadata(self.sink_uri.topic).partitions

        source_client: Optional[BrokerClient] = None
        if plan.source_kind is SourceKind.STREAM:
            source_client = self._broker_client(self.source_uri)
            source_partitions = source_client.metadata(self.source_uri.topic).partitions
            if plan.preserve_partitions and sink_client is not None:
                if source_partitions != dest_partitions:
                    raise UsageError(
                        "--preserve-partitions requires matching partition counts "
                        f"(source {source_partitions}, destination {dest_partitions})"
                    )

        # transport endpoints
        if opts.remote_receiver:
            host, _, port = opts.remote_receiver.partition(":")
            dest = (host or "127.0.0.1", int(port) if port else 7331)
        else:
            # Stream sources commit offsets off the ack stream, so their acks
            # must wait for the sink to durably produce; object sources have
            # no commits and keep the transport's ack-after-push overlap.
            if opts.stage_dir:
                ack_on = ACK_ON_STAGE
            elif plan.source_kind is SourceKind.STREAM:
                ack_on = ACK_ON_COMPLETION
            else:
                ack_on = ACK_ON_PUSH
            self.receiver = Receiver(
                ("127.0.0.1", opts.transport_port),
                self.dst_queue,
                expected_connections=plan.parallel_connections,
                resequence=self._needs_order(),
                stage_dir=opts.stage_dir,
                ack_on=ack_on,
            )
            self.receiver.start()
            dest = ("127.0.0.1", self.receiver.port)

        self.sender = Sender(
            self.src_queue,
            dest,
            connections=plan.parallel_connections,
            compression=plan.compression,
            ack_out=self.ack_queue,
            retry=self._retry(),
        )

        # source worker
        if plan.source_kind is SourceKind.STREAM:
            commit_client = self._broker_client(self.source_uri)
            self.tracker = CommitTracker(
                commit_client, opts.group, self.source_uri.topic,
                retry=self._retry(), stop=self._stop,
            )
            until_end = opts.until_end_offset or opts.duration is None

            def source_work() -> TransferStats:
                return stream_source_run(
                    plan, source_client, self.source_uri.topic, opts.group,
                    self.src_queue,
                    tracker=self.tracker,
                    duration=opts.duration,
                    until_end_offset=until_end,
                    fetch_bytes=opts.fetch_bytes,
                    retry=self._retry(),
                    stop=self._stop,
                )

            self._spawn("commit", lambda: commit_worker(self.tracker, self.ack_queue))
        else:
            reader = open_object(self.source_uri)
            self._readers.append(reader)

            def source_work() -> TransferStats:
                return object_source_run(
                    plan, reader, self.src_queue,
                    record_format=None if opts.format == "raw" else opts.format,
                    dest_partitions=dest_partitions,
                    csv_header=opts.csv_header,
                    ordered=opts.ordered,
                    stop=self._stop,
                )

        self._spawn("source", source_work)
        self.sender.start()

        # sink worker (local receiver mode only)
        if self.receiver is not None:
            receiver = self.receiver
            if plan.sink_kind is SinkKind.STREAM:
                sink = sink_client

                def sink_work() -> TransferStats:
                    return stream_sink_run(
                        plan, sink, self.sink_uri.topic, self.dst_queue,
                        completion=receiver.complete,
                        source_partitions=source_partitions,
                        retry=self._retry(),
                        stop=self._stop,
                    )

            else:

                def sink_work() -> TransferStats:
                    return object_sink_run(
                        plan, self.sink_uri, self.dst_queue,
                        completion=receiver.complete,
                        stop=self._stop,
                    )

            self._spawn("sink", sink_work)
        return self

    # -- worker plumbing ---------------------------------------------------

    def _spawn(self, name: str, fn) -> None:
        def run() -> None:
            try:
                result = fn()
                if result is not None:
                    self._results[name] = result
            except BaseException as exc:  # noqa: BLE001
                self._record_error(exc)

        thread = threading.Thread(target=run, name=f"skyhost-{name}", daemon=True)
        self._threads.append(thread)
        thread.start()

    def _record_error(self, exc: BaseException) -> None:
        with self._error_lock:
            self._errors.append(exc)
        self._abort_everything(str(exc))

    def _abort_everything(self, message: str) -> None:
        self._stop.set()
        self.src_queue.abort()
        self.dst_queue.abort()
        self.ack_queue.abort()
        if self.sender is not None:
            self.sender.abort(message)
        if self.receiver is not None:
            self.receiver.abort(message)

    # -- lifecycle ----------------------------------------------------------

    def kill(self) -> None:
        """Hard abort: sockets and queues close as if the process died."""
        self._killed = True
        self._record_error(TransferAborted("transfer killed"))

    def wait(self, timeout: Optional[float] = None) -> TransferReport:
        deadline = time.monotonic() + timeout if timeout is not None else None

        def remaining() -> Optional[float]:
            if deadline is None:
                return None
            return max(0.0, deadline - time.monotonic())

        def join(thread: threading.Thread) -> None:
            thread.join(remaining())
            if thread.is_alive():
                self._record_error(TimeoutError(f"{thread.name} still running"))

        try:
            sender_stats: Optional[TransferStats] = None
            if self.sender is not None:
                try:
                    sender_stats = self.sender.wait(remaining())
                except BaseException as exc:  # noqa: BLE001
                    self._record_error(exc)
            # after the sender finished (FIN past all acks), no more acks come
            self.ack_queue.close()
            for thread in self._threads:
                join(thread)
            if self.receiver is not None:
                try:
                    self._results["receiver"] = self.receiver.wait(remaining())
                except BaseException as exc:  # noqa: BLE001
                    if not self._errors:
                        self._record_error(exc)
        finally:
            for client in self._clients:
                client.close()
            for reader in self._readers:
                reader.close()
        wall = time.monotonic() - self._started_at
        with self._error_lock:
            if self._errors:
                raise self._errors[0]
        source_stats = self._results.get("source", TransferStats())
        self._report = TransferReport.assemble(source_stats, sender_stats, wall)
        self._finished.set()
        return self._report

    def run(self, timeout: Optional[float] = None) -> TransferReport:
        try:
            self.start()
        except BaseException:
            self._abort_everything("startup failed")
            for client in self._clients:
                client.close()
            raise
        return self.wait(timeout)

    # -- accounting (used by backpressure verification) ----------------------

    def peak_accounting(self) -> dict:
        out = {
            "src_queue_peak_bytes": self.src_queue.peak_bytes,
            "dst_queue_peak_bytes": self.dst_queue.peak_bytes,
            "sender_inflight_peak_batches": self.sender.inflight_peak if self.sender else 0,
            "sender_inflight_peak_bytes": (
                self.sender.inflight_bytes_peak if self.sender else 0
            ),
            "chunkstore_peak_bytes": (
                self.receiver.chunkstore.peak_bytes if self.receiver else 0
            ),
        }
        return out


def run_transfer(
    source: str,
    sink: str,
    options: Optional[TransferOptions] = None,
    timeout: Optional[float] = None,
) -> TransferReport:
    return Transfer(source, sink, options).run(timeout)
