"""Analytical throughput models for stream replication and bulk object reads.

All functions are pure and work in bytes and seconds. The stream model says a
pipeline ships one batch per max(batching time, transmit time); the bulk model
prices each chunk read as a fixed API overhead plus a per-byte cost, with P
workers racing the bandwidth ceiling.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

from .errors import ModelDomainError


class StreamLimit(str, Enum):
    SOURCE_LIMITED = "SourceLimited"
    NETWORK_LIMITED = "NetworkLimited"


class ObjectLimit(str, Enum):
    BANDWIDTH_LIMITED = "BandwidthLimited"
    PROCESSING_LIMITED = "ProcessingLimited"


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ModelDomainError(message)


def _finite_positive(value: float, name: str) -> None:
    _require(math.isfinite(value) and value > 0, f"{name} must be finite and > 0")


@dataclass(frozen=True)
class StreamPerfParams:
    """System constants for the stream model (bytes/seconds)."""

    bandwidth_bw: float  # network bandwidth, bytes/second
    batch_bytes_sb: float  # target batch size, bytes
    max_batch_time_tmax: float  # time trigger, seconds
    max_batch_count_cmax: float  # count trigger, messages

    def __post_init__(self):
        _finite_positive(self.bandwidth_bw, "bandwidth_bw")
        _finite_positive(self.max_batch_time_tmax, "max_batch_time_tmax")
        _finite_positive(self.max_batch_count_cmax, "max_batch_count_cmax")
        _require(
            math.isfinite(self.batch_bytes_sb) and self.batch_bytes_sb >= 1,
            "batch_bytes_sb must be >= 1",
        )


@dataclass(frozen=True)
class WorkloadProfile:
    arrival_rate_lambda: float  # messages/second
    message_size_ms: float  # bytes per message

    def __post_init__(self):
        _finite_positive(self.arrival_rate_lambda, "arrival_rate_lambda")
        _require(
            math.isfinite(self.message_size_ms) and self.message_size_ms >= 1,
            "message_size_ms must be >= 1",
        )


@dataclass(frozen=True)
class ObjectPerfParams:
    bandwidth_bw: float  # bytes/second
    api_overhead_tapi: float  # fixed per-request overhead, seconds
    per_byte_cost_tau: float  # seconds per byte
    chunk_bytes_sc: float  # bytes
    parallel_workers_p: int  # concurrent readers

    def __post_init__(self):
        _finite_positive(self.bandwidth_bw, "bandwidth_bw")
        _require(
            math.isfinite(self.api_overhead_tapi) and self.api_overhead_tapi >= 0,
            "api_overhead_tapi must be >= 0",
        )
        _require(
            math.isfinite(self.per_byte_cost_tau) and self.per_byte_cost_tau >= 0,
            "per_byte_cost_tau must be >= 0",
        )
        _require(
            math.isfinite(self.chunk_bytes_sc) and self.chunk_bytes_sc >= 1,
            "chunk_bytes_sc must be >= 1",
        )
        _require(self.parallel_workers_p >= 1, "parallel_workers_p must be >= 1")


@dataclass(frozen=True)
class StreamPrediction:
    t_batch: float
    t_transmit: float
    throughput: float  # bytes/second
    limiting_stage: StreamLimit


@dataclass(frozen=True)
class ObjectPrediction:
    t_chunk: float
    throughput: float  # bytes/second
    limiting_stage: ObjectLimit


def predict_stream(params: StreamPerfParams, workload: WorkloadProfile) -> StreamPrediction:
    """Predict stream-replication throughput.

    The batch fill time is set by the first trigger to fire: size
    (S_b / lambda*M_s), count (C_max / lambda), or the time limit. Throughput
    is one batch per max(fill time, transmit time); ties classify as
    network-limited.
    """
    arrival_bytes = workload.arrival_rate_lambda * workload.message_size_ms
    size_time = params.batch_bytes_sb / arrival_bytes
    count_time = params.max_batch_count_cmax / workload.arrival_rate_lambda
    t_batch = min(size_time, count_time, params.max_batch_time_tmax)
    t_transmit = params.batch_bytes_sb / params.bandwidth_bw
    throughput = params.batch_bytes_sb / max(t_batch, t_transmit)
    limiting = (
        StreamLimit.NETWORK_LIMITED
        if t_transmit >= t_batch
        else StreamLimit.SOURCE_LIMITED
    )
    return StreamPrediction(t_batch, t_transmit, throughput, limiting)


def predict_object(params: ObjectPerfParams) -> ObjectPrediction:
    """Predict bulk-read throughput for one chunk size.

    Each chunk costs t_chunk = T_api + tau * S_c; P workers yield
    P*S_c/t_chunk until the bandwidth ceiling wins. Ties classify as
    bandwidth-limited.
    """
    t_chunk = params.api_overhead_tapi + params.per_byte_cost_tau * params.chunk_bytes_sc
    if t_chunk == 0.0:
        processing = math.inf
    else:
        processing = params.parallel_workers_p * params.chunk_bytes_sc / t_chunk
    throughput = min(params.bandwidth_bw, processing)
    limiting = (
        ObjectLimit.BANDWIDTH_LIMITED
        if params.bandwidth_bw <= processing
        else ObjectLimit.PROCESSING_LIMITED
    )
    return ObjectPrediction(t_chunk, throughput, limiting)


@dataclass(frozen=True)
class ObjectFit:
    api_overhead_tapi: float  # seconds
    per_byte_cost_tau: float  # seconds/byte
    negative_intercept: bool  # diagnostic: the fitted overhead came out < 0


def fit_object_params(points: Iterable[tuple[float, float]]) -> ObjectFit:
    """Fit (T_api, tau) from (chunk_bytes, throughput) measurements.

    Each point converts to a chunk time S_c/throughput, then ordinary least
    squares fits t_chunk = T_api + tau * S_c. Points must come from the
    processing-limited regime with single-worker-equivalent throughput (divide
    multi-worker measurements by P first). A negative intercept is reported
    as-is with the diagnostic flag set rather than clamped.
    """
    pts: Sequence[tuple[float, float]] = list(points)
    if len(pts) < 2:
        raise ModelDomainError("need at least 2 points to fit")
    for chunk_bytes, throughput in pts:
        _require(chunk_bytes >= 1, "chunk_bytes must be >= 1")
        _require(
            math.isfinite(throughput) and throughput > 0,
            "throughput must be finite and > 0",
        )
    sizes = [float(c) for c, _ in pts]
    if len(set(sizes)) < 2:
        raise ModelDomainError("need at least 2 distinct chunk sizes to fit")
    times = [c / t for c, t in pts]
    slope, intercept = statistics.linear_regression(sizes, times)
    return ObjectFit(intercept, slope, intercept < 0)


def predict_error(predicted: float, measured: float) -> float:
    """Relative prediction error |predicted - measured| / measured."""
    _require(math.isfinite(measured) and measured > 0, "measured must be > 0")
    _require(math.isfinite(predicted), "predicted must be finite")
    return abs(predicted - measured) / measured
