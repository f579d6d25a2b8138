"""Byte-quantity parsing and formatting.

Internal quantities are plain bytes and seconds. Decimal suffixes K/M/G mean
10^3/10^6/10^9; binary suffixes Ki/Mi/Gi mean 2^10/2^20/2^30. "MB" in any
user-facing output always means 10^6 bytes.
"""

from __future__ import annotations

KB = 10**3
MB = 10**6
GB = 10**9

_SUFFIXES = {
    "k": KB,
    "m": MB,
    "g": GB,
    "ki": 2**10,
    "mi": 2**20,
    "gi": 2**30,
}


def parse_bytes(text: str | int | float) -> int:
    """Parse a byte quantity like ``32M``, ``7Mi``, ``1.5G`` or ``4096``.

    A trailing ``B``/``b`` after the suffix is accepted (``32MB``).
    """
    if isinstance(text, (int, float)):
        value = int(text)
        if value < 0:
            raise ValueError(f"byte quantity must be >= 0, got {text!r}")
        return value
    raw = text.strip().lower()
    if not raw:
        raise ValueError("empty byte quantity")
    body = raw[:-1] if raw.endswith("b") and len(raw) > 1 else raw
    multiplier = 1
    for suffix in ("ki", "mi", "gi", "k", "m", "g"):
        if body.endswith(suffix):
            multiplier = _SUFFIXES[suffix]
            body = body[: -len(suffix)]
            break
    body = body.strip()
    if not body:
        raise ValueError(f"missing number in byte quantity {text!r}")
    try:
        number = float(body)
    except ValueError:
        raise ValueError(f"invalid byte quantity {text!r}") from None
    if number < 0:
        raise ValueError(f"byte quantity must be >= 0, got {text!r}")
    return int(round(number * multiplier))


def format_mb(value_bytes: float) -> str:
    return f"{value_bytes / MB:.3f} MB"


def format_rate(bytes_per_sec: float) -> str:
    return f"{bytes_per_sec / MB:.3f} MB/s"
