"""Loopback benchmark sweeps with model predictions alongside.

The stream sweep replays preloaded topics across message sizes; the object
sweep transfers a generated binary corpus across chunk sizes. Each point is
repeated and reported per-run plus mean, with the analytical model fitted
the same way the measurements themselves suggest: bandwidth from the
throughput plateau, API overhead and per-byte cost from two chunk-size
points.
"""

from __future__ import annotations

import csv
import io
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .broker import Broker, BrokerServer, LocalBrokerClient
from .engine import run_transfer
from .model import (
    ObjectPerfParams,
    StreamPerfParams,
    WorkloadProfile,
    fit_object_params,
    predict_error,
    predict_object,
    predict_stream,
)
from .pipeline import TransferOptions
from .units import KB, MB

log = logging.getLogger(__name__)

STREAM_MESSAGE_SIZES = (1 * KB, 10 * KB, 100 * KB, 1000 * KB)
OBJECT_CHUNK_SIZES = (1 * MB, 4 * MB, 16 * MB, 32 * MB, 64 * MB, 96 * MB)


@dataclass
class BenchRow:
    mode: str  # "stream" or "object"
    size_bytes: int  # message size (stream) or chunk size (object)
    run: str  # "1".."N" or "mean"
    seconds: float
    bytes_moved: int
    records_moved: int
    throughput_bytes_per_sec: float
    msgs_per_sec: float
    predicted_bytes_per_sec: Optional[float] = None
    prediction_error: Optional[float] = None


CSV_FIELDS = [
    "mode",
    "size_bytes",
    "run",
    "seconds",
    "bytes_moved",
    "records_moved",
    "throughput_bytes_per_sec",
    "msgs_per_sec",
    "predicted_bytes_per_sec",
    "prediction_error",
]


def rows_to_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        record = {k: getattr(row, k) for k in CSV_FIELDS}
        record["prediction_error"] = (
            "" if row.prediction_error is None else f"{row.prediction_error:.6f}"
        )
        record["predicted_bytes_per_sec"] = (
            "" if row.predicted_bytes_per_sec is None else f"{row.predicted_bytes_per_sec:.3f}"
        )
        record["seconds"] = f"{row.seconds:.6f}"
        record["throughput_bytes_per_sec"] = f"{row.throughput_bytes_per_sec:.3f}"
        record["msgs_per_sec"] = f"{row.msgs_per_sec:.3f}"
        writer.writerow(record)
    return buf.getvalue()


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def bench_stream(
    message_sizes: Sequence[int] = STREAM_MESSAGE_SIZES,
    runs: int = 3,
    *,
    topic_bytes: int = 32 * MB,
    options: Optional[TransferOptions] = None,
) -> list[BenchRow]:
    """Stream-to-stream sweep over message sizes on loopback brokers."""
    rows: list[BenchRow] = []
    opts = options or TransferOptions(transport_port=0)
    cap = max(int(opts.batch_bytes * 1.25), 48 * MB)
    source_server = BrokerServer(Broker(max_message_bytes=cap)).start()
    dest_server = BrokerServer(Broker(max_message_bytes=cap)).start()
    try:
        source = LocalBrokerClient(source_server.broker)
        means: dict[int, tuple[float, float]] = {}
        for size in message_sizes:
            topic = f"bench-{size}"
            count = max(1, topic_bytes // size)
            source.create_topic(topic, 1)
            payload = os.urandom(size)
            source.produce_many(topic, [(0, None, payload)] * count)
            per_run: list[BenchRow] = []
            for run in range(1, runs + 1):
                dest_topic = f"{topic}-dst-{run}"
                dest_server.broker.create_topic(dest_topic, 1)
                report = run_transfer(
                    f"stream://127.0.0.1:{source_server.port}/{topic}",
                    f"stream://127.0.0.1:{dest_server.port}/{dest_topic}",
                    TransferOptions(
                        batch_bytes=opts.batch_bytes,
                        batch_max_seconds=opts.batch_max_seconds,
                        batch_max_count=opts.batch_max_count,
                        parallel=opts.parallel,
                        compress=opts.compress,
                        group=f"bench-{size}-{run}",
                        transport_port=0,
                        until_end_offset=True,
                    ),
                    timeout=600,
                )
                per_run.append(
                    BenchRow(
                        "stream", size, str(run), report.wall_seconds,
                        report.bytes_moved, report.records_moved,
                        report.throughput_bytes_per_sec, report.msgs_per_sec,
                    )
                )
                dest_server.broker.delete_topic(dest_topic)
            rows.extend(per_run)
            means[size] = (
                _mean([r.throughput_bytes_per_sec for r in per_run]),
                _mean([r.msgs_per_sec for r in per_run]),
            )
            source_server.broker.delete_topic(topic)
        bandwidth = max(tp for tp, _ in means.values())
        for size in message_sizes:
            throughput, msg_rate = means[size]
            params = StreamPerfParams(
                bandwidth_bw=bandwidth,
                batch_bytes_sb=float(opts.batch_bytes),
                max_batch_time_tmax=opts.batch_max_seconds,
                max_batch_count_cmax=float(opts.batch_max_count),
            )
            predicted = predict_stream(params, WorkloadProfile(msg_rate, size)).throughput
            size_runs = [
                r for r in rows
                if r.mode == "stream" and r.size_bytes == size and r.run != "mean"
            ]
            rows.append(
                BenchRow(
                    "stream", size, "mean",
                    _mean([r.seconds for r in size_runs]),
                    size_runs[0].bytes_moved, size_runs[0].records_moved,
                    throughput, msg_rate,
                    predicted, predict_error(predicted, throughput),
                )
            )
    finally:
        source_server.stop()
        dest_server.stop()
    return rows


def bench_object(
    chunk_sizes: Sequence[int] = OBJECT_CHUNK_SIZES,
    runs: int = 3,
    *,
    corpus_bytes: int = 256 * MB,
    parallel: int = 1,
    work_dir: Optional[str] = None,
) -> list[BenchRow]:
    """Object-to-stream raw sweep over chunk sizes on a loopback broker."""
    rows: list[BenchRow] = []
    cap = max(chunk_sizes) + MB
    dest_server = BrokerServer(Broker(max_message_bytes=cap)).start()
    if work_dir is None:
        tmp = tempfile.TemporaryDirectory()
        base = Path(tmp.name)
    else:
        tmp = None
        base = Path(work_dir)
    base.mkdir(parents=True, exist_ok=True)
    corpus = base / "bench-corpus.bin"
    try:
        with open(corpus, "wb") as fh:
            remaining = corpus_bytes
            block = os.urandom(4 * MB)
            while remaining > 0:
                fh.write(block[: min(len(block), remaining)])
                remaining -= len(block)
        means: dict[int, float] = {}
        for size in chunk_sizes:
            per_run: list[BenchRow] = []
            for run in range(1, runs + 1):
                topic = f"bench-{size}-{run}"
                dest_server.broker.create_topic(topic, 1)
                report = run_transfer(
                    f"file://{corpus}",
                    f"stream://127.0.0.1:{dest_server.port}/{topic}",
                    TransferOptions(
                        chunk_bytes=size, parallel=parallel, transport_port=0
                    ),
                    timeout=600,
                )
                per_run.append(
                    BenchRow(
                        "object", size, str(run), report.wall_seconds,
                        report.bytes_moved, report.records_moved,
                        report.throughput_bytes_per_sec, report.msgs_per_sec,
                    )
                )
                dest_server.broker.delete_topic(topic)
            rows.extend(per_run)
            means[size] = _mean([r.throughput_bytes_per_sec for r in per_run])
        bandwidth = max(means.values())
        fit_sizes = _pick_fit_sizes(list(chunk_sizes))
        if fit_sizes is not None:
            fit = fit_object_params([(s, means[s]) for s in fit_sizes])
            tau = max(fit.per_byte_cost_tau, 0.0)
            tapi = max(fit.api_overhead_tapi, 0.0)
        for size in chunk_sizes:
            predicted = None
            if fit_sizes is not None:
                predicted = predict_object(
                    ObjectPerfParams(bandwidth, tapi, tau, size, parallel)
                ).throughput
            size_runs = [
                r for r in rows
                if r.mode == "object" and r.size_bytes == size and r.run != "mean"
            ]
            rows.append(
                BenchRow(
                    "object", size, "mean",
                    _mean([r.seconds for r in size_runs]),
                    size_runs[0].bytes_moved, size_runs[0].records_moved,
                    means[size],
                    _mean([r.msgs_per_sec for r in size_runs]),
                    predicted,
                    None if predicted is None else predict_error(predicted, means[size]),
                )
            )
    finally:
        dest_server.stop()
        if tmp:
            tmp.cleanup()
        else:
            corpus.unlink(missing_ok=True)
    return rows


def _pick_fit_sizes(chunk_sizes: list[int]) -> Optional[list[int]]:
    """Prefer the 32/64 MB points for the fit, else the two largest sizes;
    None when the sweep has too few sizes to fit."""
    preferred = [s for s in (32 * MB, 64 * MB) if s in chunk_sizes]
    if len(preferred) == 2:
        return preferred
    distinct = sorted(set(chunk_sizes))
    if len(distinct) < 2:
        return None
    return distinct[-2:]
