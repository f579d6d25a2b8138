"""Endpoint URI parsing and canonical formatting.

Object endpoints: ``file:///abs/path/key``, ``s3://bucket/key`` (``gs://`` and
``azure://`` parse but have no backend in this build). Stream endpoints:
``stream://host:port/topic`` with ``kafka://`` accepted as an alias and
canonicalized to ``stream``.
"""

from __future__ import annotations

from dataclasses import dataclass
from urllib.parse import urlsplit

from .errors import UnsupportedScheme, UsageError

OBJECT_SCHEMES = frozenset({"file", "s3", "gs", "azure"})
STREAM_SCHEMES = frozenset({"stream", "kafka"})
ALL_SCHEMES = OBJECT_SCHEMES | STREAM_SCHEMES

DEFAULT_BROKER_PORT = 9092


@dataclass(frozen=True)
class EndpointUri:
    scheme: str  # canonical: "kafka" is stored as "stream"
    authority: str  # host:port or bucket; empty for file
    path: str  # object key, topic name, or absolute file path
    raw: str

    @property
    def is_stream(self) -> bool:
        return self.scheme == "stream"

    @property
    def is_object(self) -> bool:
        return self.scheme in OBJECT_SCHEMES

    @property
    def topic(self) -> str:
        if not self.is_stream:
            raise ValueError(f"not a stream endpoint: {self.raw}")
        return self.path

    def host_port(self) -> tuple[str, int]:
        if not self.is_stream:
            raise ValueError(f"not a stream endpoint: {self.raw}")
        host, _, port = self.authority.partition(":")
        return host, int(port) if port else DEFAULT_BROKER_PORT

    def canonical(self) -> str:
        if self.scheme == "file":
            return f"file://{self.path}"
        return f"{self.scheme}://{self.authority}/{self.path}"


def parse_uri(text: str) -> EndpointUri:
    """Parse an endpoint URI; raises UnsupportedScheme for unknown schemes."""
    parts = urlsplit(text)
    scheme = parts.scheme.lower()
    if not scheme or "://" not in text:
        raise UnsupportedScheme(f"not a URI (expected scheme://...): {text!r}")
    if scheme not in ALL_SCHEMES:
        raise UnsupportedScheme(f"unsupported scheme {scheme!r} in {text!r}")

    if scheme == "file":
        if parts.netloc not in ("", "localhost"):
            raise UsageError(
                f"file URIs must be local (file:///abs/path), got host {parts.netloc!r}"
            )
        if not parts.path.startswith("/"):
            raise UsageError(f"file URI path must be absolute: {text!r}")
        return EndpointUri("file", "", parts.path, text)

    if scheme in STREAM_SCHEMES:
        if not parts.netloc:
            raise UsageError(f"stream URI needs host[:port]: {text!r}")
        topic = parts.path.lstrip("/")
        if not topic or "/" in topic:
            raise UsageError(f"stream URI needs a single topic segment: {text!r}")
        host, _, port = parts.netloc.partition(":")
        if port:
            try:
                int(port)
            except ValueError:
                raise UsageError(f"invalid port in {text!r}") from None
        return EndpointUri("stream", parts.netloc, topic, text)

    # s3 / gs / azure
    if not parts.netloc:
        raise UsageError(f"{scheme} URI needs a bucket: {text!r}")
    key = parts.path.lstrip("/")
    if not key:
        raise UsageError(f"{scheme} URI needs an object key: {text!r}")
    return EndpointUri(scheme, parts.netloc, key, text)
