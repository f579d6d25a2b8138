"""The skyhost command line: transfers, predictions, fitting, benchmarks, and
the embedded broker helpers.

Exit codes: 0 success, 2 usage error, 3 transfer error, 4 connectivity error.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
import time
from typing import Optional

from . import __version__
from .bench import (
    OBJECT_CHUNK_SIZES,
    STREAM_MESSAGE_SIZES,
    bench_object,
    bench_stream,
    rows_to_csv,
)
from .broker import Broker, BrokerServer, TcpBrokerClient
from .engine import Transfer, TransferReport
from .errors import SkyhostError, UsageError
from .model import (
    ObjectPerfParams,
    StreamPerfParams,
    WorkloadProfile,
    fit_object_params,
    predict_object,
    predict_stream,
)
from .objstore import object_sink_run
from .pipeline import (
    BatchTriggerConfig,
    BoundedQueue,
    PipelinePlan,
    SinkKind,
    SourceKind,
    TransferOptions,
    TransferStats,
    batch_weigher,
)
from .streamops import stream_sink_run
from .transport import ACK_ON_COMPLETION, ACK_ON_STAGE, DEFAULT_TRANSPORT_PORT, Receiver
from .units import MB, parse_bytes
from .uris import parse_uri

log = logging.getLogger(__name__)


def _bytes_arg(text: str) -> int:
    try:
        return parse_bytes(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _sizes_arg(text: str) -> list[int]:
    try:
        return [parse_bytes(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skyhost",
        description="unified object-store and stream data movement",
    )
    parser.add_argument("--version", action="version", version=f"skyhost {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logs")
    sub = parser.add_subparsers(dest="command", required=True)

    # cp ------------------------------------------------------------------
    cp = sub.add_parser("cp", help="run a transfer between two endpoint URIs")
    cp.add_argument("source")
    cp.add_argument("dest")
    cp.add_argument("--batch-bytes", type=_bytes_arg, default=32 * MB,
                    help="size trigger S_b (default 32M)")
    cp.add_argument("--batch-max-ms", type=float, default=10_000.0,
                    help="time trigger in milliseconds (default 10000)")
    cp.add_argument("--batch-max-count", type=int, default=100_000,
                    help="count trigger (default 100000)")
    cp.add_argument("--chunk-bytes", type=_bytes_arg, default=16 * MB,
                    help="object read chunk size S_c (default 16M)")
    cp.add_argument("--parallel", type=int, default=1,
                    help="parallel connections / range readers (default 1)")
    cp.add_argument("--format", choices=("raw", "csv", "ndjson"), default="raw")
    cp.add_argument("--compress", action="store_true")
    cp.add_argument("--preserve-partitions", action="store_true")
    cp.add_argument("--csv-header", action="store_true",
                    help="skip the first CSV line")
    cp.add_argument("--ordered", action="store_true",
                    help="deliver batches in emission order")
    cp.add_argument("--transport-port", type=int, default=0,
                    help=f"local receiver port (default ephemeral; "
                         f"standalone default {DEFAULT_TRANSPORT_PORT})")
    cp.add_argument("--remote-receiver", metavar="HOST:PORT",
                    help="attach to a separately launched `skyhost receive`")
    cp.add_argument("--stage-dir", help="stage received batches on disk before ack")
    cp.add_argument("--duration", type=float,
                    help="stream sources: stop after this many seconds")
    cp.add_argument("--until-end-offset", action="store_true",
                    help="stream sources: stop at the end offsets seen at start "
                         "(default when --duration is not given)")
    cp.add_argument("--group", default="skyhost-cp", help="consumer group")
    cp.add_argument("--fetch-bytes", type=_bytes_arg, default=1 * MB)
    cp.add_argument("--queue-capacity", type=int, default=4)
    cp.add_argument("--connect-deadline", type=float, default=30.0)
    cp.add_argument("--report", choices=("text", "json"), default="text")
    cp.set_defaults(func=cmd_cp)

    # predict ---------------------------------------------------------------
    predict = sub.add_parser("predict", help="analytical throughput models")
    predict_sub = predict.add_subparsers(dest="model", required=True)

    ps = predict_sub.add_parser("stream", help="stream replication model")
    ps.add_argument("--bandwidth", type=_bytes_arg, required=True,
                    help="network bandwidth in bytes/s (suffixes ok)")
    ps.add_argument("--batch-bytes", type=_bytes_arg, default=32 * MB)
    ps.add_argument("--batch-max-seconds", type=float, default=10.0)
    ps.add_argument("--batch-max-count", type=float, default=100_000)
    ps.add_argument("--arrival-rate", type=float, required=True,
                    help="message arrival rate, msgs/s")
    ps.add_argument("--message-bytes", type=_bytes_arg, required=True)
    ps.add_argument("--json", action="store_true")
    ps.set_defaults(func=cmd_predict_stream)

    po = predict_sub.add_parser("object", help="bulk object read model")
    po.add_argument("--bandwidth", type=_bytes_arg, required=True)
    po.add_argument("--api-ms", type=float, required=True,
                    help="fixed API overhead per chunk, milliseconds")
    po.add_argument("--tau-ms-per-mb", type=float, required=True,
                    help="per-byte processing cost, ms per MB")
    po.add_argument("--chunk-bytes", type=_bytes_arg, required=True)
    po.add_argument("--parallel", type=int, default=1)
    po.add_argument("--json", action="store_true")
    po.set_defaults(func=cmd_predict_object)

    # fit ---------------------------------------------------------------------
    fit = sub.add_parser(
        "fit",
        help="fit API overhead and per-byte cost from a throughput CSV "
             "(header: chunk_bytes,throughput_bytes_per_sec)",
    )
    fit.add_argument("csv_path")
    fit.add_argument("--json", action="store_true")
    fit.set_defaults(func=cmd_fit)

    # bench ---------------------------------------------------------------------
    bench = sub.add_parser("bench", help="loopback benchmark sweeps")
    bench_sub = bench.add_subparsers(dest="bench_mode", required=True)

    bs = bench_sub.add_parser("stream", help="message-size sweep")
    bs.add_argument("--sizes", type=_sizes_arg,
                    default=list(STREAM_MESSAGE_SIZES),
                    help="comma-separated message sizes (default 1K,10K,100K,1000K)")
    bs.add_argument("--runs", type=int, default=3)
    bs.add_argument("--topic-bytes", type=_bytes_arg, default=32 * MB)
    bs.add_argument("--batch-bytes", type=_bytes_arg, default=32 * MB)
    bs.add_argument("--out", help="write CSV here instead of stdout")
    bs.set_defaults(func=cmd_bench_stream)

    bo = bench_sub.add_parser("object", help="chunk-size sweep")
    bo.add_argument("--sizes", type=_sizes_arg,
                    default=list(OBJECT_CHUNK_SIZES),
                    help="comma-separated chunk sizes (default 1M,4M,16M,32M,64M,96M)")
    bo.add_argument("--runs", type=int, default=3)
    bo.add_argument("--corpus-bytes", type=_bytes_arg, default=256 * MB)
    bo.add_argument("--parallel", type=int, default=1)
    bo.add_argument("--out", help="write CSV here instead of stdout")
    bo.set_defaults(func=cmd_bench_object)

    # broker ---------------------------------------------------------------------
    broker = sub.add_parser("broker", help="embedded broker and helpers")
    broker_sub = broker.add_subparsers(dest="broker_cmd", required=True)

    serve = broker_sub.add_parser("serve", help="run a broker")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=9092)
    serve.add_argument("--data-dir", help="persist logs and commits here")
    serve.add_argument("--max-message-bytes", type=_bytes_arg, default=8 * MB)
    serve.set_defaults(func=cmd_broker_serve)

    topic = broker_sub.add_parser("topic", help="topic management")
    topic_sub = topic.add_subparsers(dest="topic_cmd", required=True)
    topic_create = topic_sub.add_parser("create")
    topic_create.add_argument("uri", help="stream://host:port/topic")
    topic_create.add_argument("--partitions", type=int, default=1)
    topic_create.set_defaults(func=cmd_broker_topic_create)

    produce = broker_sub.add_parser("produce", help="produce messages")
    produce.add_argument("uri")
    produce.add_argument("--value", action="append", default=None,
                         help="message value (repeatable); stdin lines otherwise")
    produce.add_argument("--key")
    produce.add_argument("--partition", type=int,
                         help="fixed partition (default round-robin)")
    produce.set_defaults(func=cmd_broker_produce)

    consume = broker_sub.add_parser("consume", help="consume a topic")
    consume.add_argument("uri")
    consume.add_argument("--group", default="skyhost-cli")
    consume.add_argument("--from-beginning", action="store_true")
    consume.add_argument("--max-records", type=int)
    consume.add_argument("--values-only", action="store_true",
                         help="write raw values, one per line")
    consume.set_defaults(func=cmd_broker_consume)

    # receive ---------------------------------------------------------------------
    receive = sub.add_parser(
        "receive", help="standalone destination gateway (one transfer session)"
    )
    receive.add_argument("dest", help="sink URI (stream://... or file://...)")
    receive.add_argument("--transport-port", type=int, default=DEFAULT_TRANSPORT_PORT)
    receive.add_argument("--host", default="0.0.0.0")
    receive.add_argument("--format", choices=("raw", "csv", "ndjson"), default="raw")
    receive.add_argument("--chunk-bytes", type=_bytes_arg, default=16 * MB,
                         help="chunk size for raw file reassembly")
    receive.add_argument("--preserve-partitions", action="store_true")
    receive.add_argument("--source-partitions", type=int,
                         help="source partition count (required with "
                              "--preserve-partitions)")
    receive.add_argument("--ordered", action="store_true")
    receive.add_argument("--stage-dir")
    receive.add_argument("--queue-capacity", type=int, default=4)
    receive.add_argument("--report", choices=("text", "json"), default="text")
    receive.set_defaults(func=cmd_receive)

    return parser


# -- command implementations -----------------------------------------------------


def _print_report(report: TransferReport, mode: str) -> None:
    if mode == "json":
        print(json.dumps(report.to_dict(), indent=2))
    else:
        for line in report.text_lines():
            print(line)


def cmd_cp(args) -> int:
    options = TransferOptions(
        format=args.format,
        batch_bytes=args.batch_bytes,
        batch_max_seconds=args.batch_max_ms / 1000.0,
        batch_max_count=args.batch_max_count,
        chunk_bytes=args.chunk_bytes,
        parallel=args.parallel,
        compress=args.compress,
        preserve_partitions=args.preserve_partitions,
        csv_header=args.csv_header,
        ordered=args.ordered,
        queue_capacity=args.queue_capacity,
        transport_port=args.transport_port,
        remote_receiver=args.remote_receiver,
        stage_dir=args.stage_dir,
        duration=args.duration,
        until_end_offset=args.until_end_offset,
        group=args.group,
        fetch_bytes=args.fetch_bytes,
        connect_deadline=args.connect_deadline,
    )
    report = Transfer(args.source, args.dest, options).run()
    _print_report(report, args.report)
    return 0


def cmd_predict_stream(args) -> int:
    params = StreamPerfParams(
        bandwidth_bw=float(args.bandwidth),
        batch_bytes_sb=float(args.batch_bytes),
        max_batch_time_tmax=args.batch_max_seconds,
        max_batch_count_cmax=args.batch_max_count,
    )
    pred = predict_stream(params, WorkloadProfile(args.arrival_rate, float(args.message_bytes)))
    if args.json:
        print(json.dumps({
            "t_batch_seconds": pred.t_batch,
            "t_transmit_seconds": pred.t_transmit,
            "throughput_bytes_per_sec": pred.throughput,
            "limiting_stage": pred.limiting_stage.value,
        }))
    else:
        print(f"T_batch: {pred.t_batch:.12g} s")
        print(f"T_transmit: {pred.t_transmit:.12g} s")
        print(f"throughput: {pred.throughput / MB:.12g} MB/s")
        print(f"limiting_stage: {pred.limiting_stage.value}")
    return 0


def cmd_predict_object(args) -> int:
    params = ObjectPerfParams(
        bandwidth_bw=float(args.bandwidth),
        api_overhead_tapi=args.api_ms / 1000.0,
        per_byte_cost_tau=args.tau_ms_per_mb / 1000.0 / MB,
        chunk_bytes_sc=float(args.chunk_bytes),
        parallel_workers_p=args.parallel,
    )
    pred = predict_object(params)
    if args.json:
        print(json.dumps({
            "t_chunk_seconds": pred.t_chunk,
            "throughput_bytes_per_sec": pred.throughput,
            "limiting_stage": pred.limiting_stage.value,
        }))
    else:
        print(f"T_chunk: {pred.t_chunk:.12g} s")
        print(f"throughput: {pred.throughput / MB:.12g} MB/s")
        print(f"limiting_stage: {pred.limiting_stage.value}")
    return 0


def cmd_fit(args) -> int:
    import csv as csv_module

    points = []
    try:
        with open(args.csv_path, newline="") as fh:
            reader = csv_module.DictReader(fh)
            if reader.fieldnames is None or {
                "chunk_bytes", "throughput_bytes_per_sec"
            } - set(reader.fieldnames):
                raise UsageError(
                    "fit input needs a CSV header "
                    "`chunk_bytes,throughput_bytes_per_sec`"
                )
            for row in reader:
                points.append(
                    (float(row["chunk_bytes"]), float(row["throughput_bytes_per_sec"]))
                )
    except OSError as exc:
        raise UsageError(f"cannot read {args.csv_path}: {exc}") from None
    except ValueError as exc:
        raise UsageError(f"bad number in {args.csv_path}: {exc}") from None
    fit = fit_object_params(points)
    api_ms = fit.api_overhead_tapi * 1000.0
    tau_ms_per_mb = fit.per_byte_cost_tau * 1000.0 * MB
    if args.json:
        print(json.dumps({
            "api_overhead_ms": api_ms,
            "per_byte_cost_ms_per_mb": tau_ms_per_mb,
            "negative_intercept": fit.negative_intercept,
        }))
    else:
        print(f"T_api: {api_ms:.12g} ms")
        print(f"tau: {tau_ms_per_mb:.12g} ms/MB")
        if fit.negative_intercept:
            print(
                "warning: fitted API overhead is negative; the input points "
                "are probably not from the processing-limited regime"
            )
    return 0


def _emit_bench(rows, out: Optional[str]) -> None:
    text = rows_to_csv(rows)
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_bench_stream(args) -> int:
    rows = bench_stream(
        args.sizes, args.runs,
        topic_bytes=args.topic_bytes,
        options=TransferOptions(batch_bytes=args.batch_bytes, transport_port=0),
    )
    _emit_bench(rows, args.out)
    return 0


def cmd_bench_object(args) -> int:
    rows = bench_object(
        args.sizes, args.runs,
        corpus_bytes=args.corpus_bytes,
        parallel=args.parallel,
    )
    _emit_bench(rows, args.out)
    return 0


def cmd_broker_serve(args) -> int:
    broker = Broker(data_dir=args.data_dir, max_message_bytes=args.max_message_bytes)
    server = BrokerServer(broker, host=args.host, port=args.port).start()
    print(f"broker listening on {server.host}:{server.port}", flush=True)
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *a: stop.set())
    signal.signal(signal.SIGTERM, lambda *a: stop.set())
    try:
        while not stop.is_set():
            time.sleep(0.2)
    finally:
        server.stop()
    return 0


def _broker_client_for(uri_text: str) -> tuple[TcpBrokerClient, str]:
    uri = parse_uri(uri_text)
    if not uri.is_stream:
        raise UsageError(f"expected a stream:// URI, got {uri_text!r}")
    host, port = uri.host_port()
    return TcpBrokerClient(host, port), uri.topic


def cmd_broker_topic_create(args) -> int:
    client, topic = _broker_client_for(args.uri)
    try:
        client.create_topic(topic, args.partitions)
        print(f"created {topic} with {args.partitions} partition(s)")
    finally:
        client.close()
    return 0


def cmd_broker_produce(args) -> int:
    client, topic = _broker_client_for(args.uri)
    try:
        meta = client.metadata(topic)
        key = args.key.encode() if args.key is not None else None
        if args.value is not None:
            values = [v.encode() for v in args.value]
        else:
            values = [line.rstrip(b"\n") for line in sys.stdin.buffer]
        entries = []
        for i, value in enumerate(values):
            partition = args.partition if args.partition is not None else i % meta.partitions
            entries.append((partition, key, value))
        offsets = client.produce_many(topic, entries)
        print(f"produced {len(offsets)} record(s)")
    finally:
        client.close()
    return 0


def cmd_broker_consume(args) -> int:
    client, topic = _broker_client_for(args.uri)
    try:
        group = args.group
        meta = client.metadata(topic, group)
        starts = {}
        for p in range(meta.partitions):
            if args.from_beginning or meta.committed[p] < 0:
                starts[p] = 0
            else:
                starts[p] = meta.committed[p] + 1
        ends = {p: meta.end_offsets[p] for p in range(meta.partitions)}
        emitted = 0
        out = sys.stdout.buffer
        for p in sorted(starts):
            offset = starts[p]
            while offset < ends[p]:
                if args.max_records is not None and emitted >= args.max_records:
                    break
                records = client.fetch(topic, p, offset, 4 * MB)
                if not records:
                    break
                for rec_offset, key, value in records:
                    if rec_offset >= ends[p]:
                        break
                    if args.max_records is not None and emitted >= args.max_records:
                        break
                    if args.values_only:
                        out.write(value)
                        out.write(b"\n")
                    else:
                        out.write(json.dumps({
                            "partition": p,
                            "offset": rec_offset,
                            "key": key.decode("latin-1") if key is not None else None,
                            "value_len": len(value),
                            "value_hex": value.hex(),
                        }).encode())
                        out.write(b"\n")
                    emitted += 1
                offset = records[-1][0] + 1
        out.flush()
    finally:
        client.close()
    return 0


def cmd_receive(args) -> int:
    dest = parse_uri(args.dest)
    if args.preserve_partitions and args.source_partitions is None:
        raise UsageError("--preserve-partitions needs --source-partitions")
    source_kind = (
        SourceKind.OBJECT_RAW if args.format == "raw" else SourceKind.OBJECT_RECORDS
    )
    plan = PipelinePlan(
        source_kind=source_kind,
        sink_kind=SinkKind.STREAM if dest.is_stream else SinkKind.OBJECT,
        trigger=BatchTriggerConfig(),
        chunk_bytes_sc=args.chunk_bytes,
        parallel_connections=1,
        compression=False,
        preserve_partitions=args.preserve_partitions,
    )
    queue = BoundedQueue(args.queue_capacity, weigher=batch_weigher)
    ack_on = ACK_ON_STAGE if args.stage_dir else ACK_ON_COMPLETION
    receiver = Receiver(
        (args.host, args.transport_port),
        queue,
        resequence=args.ordered or args.preserve_partitions,
        stage_dir=args.stage_dir,
        ack_on=ack_on,
    )
    receiver.start()
    print(f"receiving on {args.host}:{receiver.port}", flush=True)

    sink_result: dict[str, TransferStats] = {}
    sink_error: list[BaseException] = []

    def sink() -> None:
        try:
            if dest.is_stream:
                host, port = dest.host_port()
                client = TcpBrokerClient(host, port)
                try:
                    sink_result["stats"] = stream_sink_run(
                        plan, client, dest.topic, queue,
                        completion=receiver.complete,
                        source_partitions=args.source_partitions,
                    )
                finally:
                    client.close()
            else:
                sink_result["stats"] = object_sink_run(
                    plan, dest, queue, completion=receiver.complete
                )
        except BaseException as exc:  # noqa: BLE001
            sink_error.append(exc)
            receiver.abort(str(exc))

    sink_thread = threading.Thread(target=sink, name="skyhost-receive-sink", daemon=True)
    sink_thread.start()
    receiver_stats = receiver.wait()
    sink_thread.join(timeout=30)
    if sink_error:
        raise sink_error[0]
    stats = sink_result.get("stats", TransferStats())
    report = TransferReport.assemble(stats, None, stats.wall_seconds)
    _print_report(report, args.report)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args) or 0
    except SkyhostError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
