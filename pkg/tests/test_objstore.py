import json
import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skyhost.errors import (
    AuthError,
    FormatError,
    ObjectNotFound,
    OversizedRecord,
    QueueClosed,
    RangeError,
    UnsupportedBackend,
    UsageError,
)
from skyhost.objstore import (
    Backend,
    LocalDirReader,
    ObjectRef,
    RecordFormat,
    S3CompatibleReader,
    object_sink_run,
    object_source_run,
    open_object,
    plan_chunks,
    read_records,
)
from skyhost.pipeline import (
    BoundedQueue,
    BatchTriggerConfig,
    PipelinePlan,
    SinkKind,
    SourceKind,
    TransferOptions,
    build_plan,
)
from skyhost.units import MB
from skyhost.uris import parse_uri

from helpers import S3Stub, make_lines


def write_file(tmp_path, name, data: bytes):
    path = tmp_path / name
    path.write_bytes(data)
    return path


def raw_plan(chunk_bytes=4, parallel=1, ordered=False):
    return PipelinePlan(
        source_kind=SourceKind.OBJECT_RAW,
        sink_kind=SinkKind.STREAM,
        trigger=BatchTriggerConfig(),
        chunk_bytes_sc=chunk_bytes,
        parallel_connections=parallel,
        compression=False,
        preserve_partitions=False,
    )


def records_plan(sb=32 * MB, tmax=10.0, cmax=100_000.0):
    return PipelinePlan(
        source_kind=SourceKind.OBJECT_RECORDS,
        sink_kind=SinkKind.STREAM,
        trigger=BatchTriggerConfig(sb, tmax, cmax),
        chunk_bytes_sc=16 * MB,
        parallel_connections=1,
        compression=False,
        preserve_partitions=False,
    )


class TestPlanChunks:
    def ref(self, size):
        return ObjectRef(Backend.LOCAL_DIR, "/tmp", "k", size)

    def test_remainder_handling(self):
        plan = plan_chunks(self.ref(10), 4)
        assert plan.ranges == ((0, 4), (4, 4), (8, 2))

    def test_zero_size_is_empty_plan(self):
        assert plan_chunks(self.ref(0), 4).ranges == ()

    def test_2gb_dataset_at_64mb_chunks(self):
        # ceil(2e9 / 64e6) = 32 ranges; decimal units, so the last is 16 MB
        plan = plan_chunks(self.ref(2 * 10**9), 64 * MB)
        assert len(plan.ranges) == 32
        assert plan.ranges[-1] == (31 * 64 * MB, 16 * MB)
        assert sum(length for _, length in plan.ranges) == 2 * 10**9

    def test_coverage_no_gaps_or_overlaps(self):
        rng = random.Random(3)
        for _ in range(50):
            size = rng.randrange(0, 10_000)
            chunk = rng.randrange(1, 700)
            plan = plan_chunks(self.ref(size), chunk)
            pos = 0
            for start, length in plan.ranges:
                assert start == pos
                assert length >= 1
                pos += length
            assert pos == size

    def test_rejects_bad_chunk_size(self):
        with pytest.raises(UsageError):
            plan_chunks(self.ref(10), 0)


class TestLocalDirReader:
    def test_read_range_matches_whole_file_slice(self, tmp_path):
        data = random.Random(1).randbytes(100_000)
        path = write_file(tmp_path, "obj.bin", data)
        with LocalDirReader(str(path)) as reader:
            assert reader.ref.size_bytes == len(data)
            rng = random.Random(2)
            for _ in range(40):
                start = rng.randrange(0, len(data))
                length = rng.randrange(0, len(data) - start)
                assert reader.read_range(start, length) == data[start : start + length]

    def test_out_of_bounds_range(self, tmp_path):
        path = write_file(tmp_path, "obj.bin", b"abc")
        with LocalDirReader(str(path)) as reader:
            with pytest.raises(RangeError):
                reader.read_range(2, 2)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ObjectNotFound):
            LocalDirReader(str(tmp_path / "nope"))

    def test_open_object_routes_backends(self, tmp_path):
        path = write_file(tmp_path, "o", b"x")
        reader = open_object(parse_uri(f"file://{path}"))
        assert reader.ref.backend is Backend.LOCAL_DIR
        reader.close()
        with pytest.raises(UnsupportedBackend):
            open_object(parse_uri("gs://bucket/key"))
        with pytest.raises(UnsupportedBackend):
            open_object(parse_uri("azure://container/key"))


class TestReadRecords:
    def test_csv_header_skipped(self, tmp_path):
        path = write_file(tmp_path, "r.csv", b"h1,h2\na,1\nb,2\n")
        with LocalDirReader(str(path)) as reader:
            records = list(read_records(reader, "csv", csv_header=True))
        assert [(r.offset, r.value) for r in records] == [(0, b"a,1"), (1, b"b,2")]

    def test_csv_without_header_detection_keeps_first_line(self, tmp_path):
        path = write_file(tmp_path, "r.csv", b"h1,h2\na,1\n")
        with LocalDirReader(str(path)) as reader:
            records = list(read_records(reader, "csv"))
        assert [r.value for r in records] == [b"h1,h2", b"a,1"]

    def test_ndjson_lossless_identity(self, tmp_path):
        lines = [json.dumps({"i": i, "v": "x" * i}).encode() for i in range(50)]
        data = b"\n".join(lines) + b"\n"
        path = write_file(tmp_path, "r.ndjson", data)
        with LocalDirReader(str(path)) as reader:
            records = list(read_records(reader, "ndjson"))
        assert len(records) == 50
        rebuilt = b"\n".join(r.value for r in records) + b"\n"
        assert rebuilt == data

    def test_no_trailing_newline_keeps_last_line(self, tmp_path):
        path = write_file(tmp_path, "r.csv", b"a\nb")
        with LocalDirReader(str(path)) as reader:
            records = list(read_records(reader, "csv"))
        assert [r.value for r in records] == [b"a", b"b"]
        rebuilt = b"\n".join(r.value for r in records)
        assert rebuilt == b"a\nb"

    def test_crlf_terminators_stripped(self, tmp_path):
        path = write_file(tmp_path, "r.csv", b"a,1\r\nb,2\r\n")
        with LocalDirReader(str(path)) as reader:
            records = list(read_records(reader, "csv"))
        assert [r.value for r in records] == [b"a,1", b"b,2"]

    def test_ndjson_bad_line_reports_line_number(self, tmp_path):
        path = write_file(tmp_path, "r.ndjson", b'{"ok":1}\nnot json\n')
        with LocalDirReader(str(path)) as reader:
            with pytest.raises(FormatError, match="line 2"):
                list(read_records(reader, "ndjson"))

    def test_round_robin_partition_assignment(self, tmp_path):
        path = write_file(tmp_path, "r.csv", make_lines(1000))
        with LocalDirReader(str(path)) as reader:
            records = list(read_records(reader, "csv", partitions=4))
        counts = [0, 0, 0, 0]
        for r in records:
            counts[r.partition] += 1
        assert counts == [250, 250, 250, 250]
        assert [r.offset for r in records] == list(range(1000))

    def test_oversized_line_instructs_raw_mode(self, tmp_path):
        path = write_file(tmp_path, "r.csv", b"short\n" + b"x" * 100 + b"\n")
        with LocalDirReader(str(path)) as reader:
            with pytest.raises(OversizedRecord, match="raw"):
                list(read_records(reader, "csv", max_record_bytes=50))

    def test_count_conservation_random_corpora(self, tmp_path):
        rng = random.Random(9)
        for case in range(5):
            n = rng.randrange(1, 400)
            data = make_lines(n, seed=case)
            path = write_file(tmp_path, f"c{case}.csv", data)
            with LocalDirReader(str(path)) as reader:
                records = list(read_records(reader, "csv"))
            assert len(records) == n


def drain_queue(q):
    items = []
    try:
        while True:
            items.append(q.pop(timeout=30))
    except QueueClosed:
        return items


def reassemble(records):
    seen = {}
    for r in records:
        seen.setdefault(r.offset, r.value)
    return b"".join(seen[i] for i in sorted(seen))


class TestObjectSourceRaw:
    def run_source(self, path, chunk_bytes, parallel=1, ordered=False):
        out = BoundedQueue(capacity=8)
        with LocalDirReader(str(path)) as reader:
            results = {}

            def consume():
                results["batches"] = drain_queue(out)

            t = threading.Thread(target=consume)
            t.start()
            stats = object_source_run(
                raw_plan(chunk_bytes, parallel), reader, out, ordered=ordered
            )
            t.join(timeout=30)
        return results["batches"], stats

    def test_single_record_batches_with_byte_ranges(self, tmp_path):
        data = bytes(range(256)) * 4
        path = write_file(tmp_path, "o.bin", data)
        batches, stats = self.run_source(path, 300)
        assert all(len(b.records) == 1 for b in batches)
        assert [b.records[0].source_byte_range for b in batches] == [
            (0, 300), (300, 300), (600, 300), (900, 124),
        ]
        assert stats.bytes_moved == len(data)
        assert stats.batches == 4
        records = [b.records[0] for b in batches]
        assert reassemble(records) == data

    def test_round_trip_random_sizes_and_chunks(self, tmp_path):
        rng = random.Random(42)
        for case in range(8):
            size = rng.randrange(0, 10 * MB)
            chunk = rng.randrange(1, 1 * MB)
            data = rng.randbytes(size)
            path = write_file(tmp_path, f"o{case}.bin", data)
            parallel = rng.choice([1, 2, 4])
            batches, stats = self.run_source(path, chunk, parallel)
            records = [b.records[0] for b in batches]
            assert reassemble(records) == data, (case, size, chunk, parallel)
            assert stats.records_moved == len(batches)

    def test_ordered_emission_matches_chunk_index(self, tmp_path):
        data = random.Random(5).randbytes(500_000)
        path = write_file(tmp_path, "o.bin", data)
        batches, _ = self.run_source(path, 10_000, parallel=4, ordered=True)
        offsets = [b.records[0].offset for b in batches]
        assert offsets == list(range(50))
        ids = [b.batch_id for b in batches]
        assert ids == list(range(50))

    def test_zero_byte_object_completes_empty(self, tmp_path):
        path = write_file(tmp_path, "empty.bin", b"")
        batches, stats = self.run_source(path, 1024)
        assert batches == []
        assert stats.bytes_moved == 0


class TestObjectSourceRecords:
    def test_batcher_emits_by_size_and_flushes_tail(self, tmp_path):
        data = make_lines(100, width=20)
        path = write_file(tmp_path, "r.csv", data)
        out = BoundedQueue(capacity=8)
        with LocalDirReader(str(path)) as reader:
            collected = {}
            t = threading.Thread(target=lambda: collected.setdefault("b", drain_queue(out)))
            t.start()
            stats = object_source_run(
                records_plan(sb=500), reader, out,
                record_format="csv", dest_partitions=2,
            )
            t.join(timeout=30)
        batches = collected["b"]
        assert stats.records_moved == 100
        assert sum(len(b.records) for b in batches) == 100
        assert batches[-1].emission_cause in ("final", "size")
        assert stats.emission_causes["size"] >= 1
        all_records = [r for b in batches for r in b.records]
        assert [r.offset for r in all_records] == list(range(100))
        rebuilt = b"\n".join(r.value for r in all_records) + b"\n"
        assert rebuilt == data


class TestObjectSink:
    def test_raw_sink_reassembles_file(self, tmp_path):
        data = random.Random(8).randbytes(100_000)
        src = write_file(tmp_path, "src.bin", data)
        dst = tmp_path / "dst.bin"
        plan = raw_plan(chunk_bytes=7777, parallel=4)
        src_q = BoundedQueue(capacity=8)
        completions = []

        def source():
            with LocalDirReader(str(src)) as reader:
                object_source_run(plan, reader, src_q, ordered=False)

        t = threading.Thread(target=source)
        t.start()
        stats = object_sink_run(
            plan, parse_uri(f"file://{dst}"), src_q, completion=completions.append
        )
        t.join(timeout=30)
        assert dst.read_bytes() == data
        assert stats.bytes_moved == len(data)
        assert sorted(completions) == list(range(stats.batches))

    def test_records_sink_appends_lines(self, tmp_path):
        data = make_lines(50)
        src = write_file(tmp_path, "src.csv", data)
        dst = tmp_path / "dst.csv"
        plan = records_plan(sb=300)
        src_q = BoundedQueue(capacity=8)

        def source():
            with LocalDirReader(str(src)) as reader:
                object_source_run(plan, reader, src_q, record_format="csv")

        t = threading.Thread(target=source)
        t.start()
        object_sink_run(plan, parse_uri(f"file://{dst}"), src_q)
        t.join(timeout=30)
        assert dst.read_bytes() == data

    def test_s3_sink_unsupported(self, tmp_path):
        plan = raw_plan()
        q = BoundedQueue(capacity=2)
        with pytest.raises(UnsupportedBackend):
            object_sink_run(plan, parse_uri("s3://bucket/key"), q)


class TestS3Compatible:
    def test_size_and_ranged_reads(self, monkeypatch):
        data = random.Random(7).randbytes(50_000)
        with S3Stub({"bucket/key.bin": data}) as stub:
            env = {"SKYHOST_S3_ENDPOINT": stub.endpoint, "SKYHOST_S3_UNSIGNED": "1"}
            reader = S3CompatibleReader("bucket", "key.bin", env=env)
            assert reader.ref.size_bytes == len(data)
            assert reader.read_range(0, 100) == data[:100]
            assert reader.read_range(49_000, 1000) == data[49_000:]
            assert reader.read_range(0, 0) == b""
            reader.close()

    def test_unsigned_mode_sends_no_auth_header(self):
        with S3Stub({"b/k": b"abc"}) as stub:
            env = {"SKYHOST_S3_ENDPOINT": stub.endpoint, "SKYHOST_S3_UNSIGNED": "1"}
            reader = S3CompatibleReader("b", "k", env=env)
            reader.read_range(0, 3)
            reader.close()
            assert all("Authorization" not in req for req in stub.requests)

    def test_signed_mode_sends_sigv4(self):
        with S3Stub({"b/k": b"abcdef"}, require_auth=True) as stub:
            env = {
                "SKYHOST_S3_ENDPOINT": stub.endpoint,
                "SKYHOST_S3_ACCESS_KEY": "AKID",
                "SKYHOST_S3_SECRET_KEY": "SECRET",
            }
            reader = S3CompatibleReader("b", "k", env=env)
            assert reader.read_range(1, 3) == b"bcd"
            reader.close()
            headers = {k.lower(): v for k, v in stub.requests[-1].items()}
            auth = headers["authorization"]
            assert auth.startswith("AWS4-HMAC-SHA256 Credential=AKID/")
            assert "SignedHeaders=" in auth and "Signature=" in auth
            assert "x-amz-date" in headers

    def test_missing_object_and_auth_failures(self):
        with S3Stub({"b/k": b"x"}, require_auth=True) as stub:
            env = {"SKYHOST_S3_ENDPOINT": stub.endpoint, "SKYHOST_S3_UNSIGNED": "1"}
            with pytest.raises(AuthError):
                S3CompatibleReader("b", "k", env=env)
        with S3Stub({"b/k": b"x"}) as stub:
            env = {"SKYHOST_S3_ENDPOINT": stub.endpoint, "SKYHOST_S3_UNSIGNED": "1"}
            with pytest.raises(ObjectNotFound):
                S3CompatibleReader("b", "missing", env=env)

    def test_wrong_length_response_is_range_error(self):
        with S3Stub({"b/k": b"x" * 1000}, truncate_responses=10) as stub:
            env = {"SKYHOST_S3_ENDPOINT": stub.endpoint, "SKYHOST_S3_UNSIGNED": "1"}
            reader = S3CompatibleReader("b", "k", env=env)
            with pytest.raises(RangeError):
                reader.read_range(0, 100)
            reader.close()

    def test_missing_endpoint_env_is_usage_error(self):
        with pytest.raises(UsageError):
            S3CompatibleReader("b", "k", env={})

    def test_source_run_over_s3(self, tmp_path):
        data = random.Random(12).randbytes(100_000)
        with S3Stub({"bucket/obj": data}) as stub:
            env = {"SKYHOST_S3_ENDPOINT": stub.endpoint, "SKYHOST_S3_UNSIGNED": "1"}
            reader = S3CompatibleReader("bucket", "obj", env=env)
            out = BoundedQueue(capacity=8)
            collected = {}
            t = threading.Thread(target=lambda: collected.setdefault("b", drain_queue(out)))
            t.start()
            object_source_run(raw_plan(9973, parallel=3), reader, out)
            t.join(timeout=30)
            reader.close()
        records = [b.records[0] for b in collected["b"]]
        assert reassemble(records) == data
