"""Plain-text key-value records: one record per line, ``key=value`` pairs.

List values are comma-joined, floats keep their ``repr`` so values survive a
write/read cycle exactly. Used by episode manifests, metric histories and
study tables.
"""

import math
from collections.abc import Iterable


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    text = str(value)
    if any(ch.isspace() for ch in text) or "=" in text:
        raise ValueError(f"record values cannot contain whitespace or '=': {text!r}")
    return text


def format_record(record: dict) -> str:
    """Format a flat dict as a single ``key=value`` line."""
    parts = []
    for key, value in record.items():
        if not key or any(ch.isspace() for ch in key) or "=" in key:
            raise ValueError(f"invalid record key: {key!r}")
        parts.append(f"{key}={_format_value(value)}")
    return " ".join(parts)


def _parse_scalar(text: str):
    if "_" in text:
        return text
    if text == "true":
        return True
    if text == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        value = float(text)
    except ValueError:
        return text
    return value if not math.isnan(value) or text == "nan" else text


def parse_record(line: str, list_keys: Iterable[str] = ()) -> dict:
    """Parse one ``key=value`` line back into a dict.

    Args:
        line: Record line as produced by ``format_record``
        list_keys: Keys whose values are always lists, even with a single item

    Returns:
        Parsed record with ints, floats and booleans restored
    """
    list_keys = set(list_keys)
    record = {}
    for token in line.split():
        key, sep, raw = token.partition("=")
        if not sep:
            raise ValueError(f"malformed record token: {token!r}")
        if key in list_keys or "," in raw:
            record[key] = [_parse_scalar(v) for v in raw.split(",") if v != ""]
        else:
            record[key] = _parse_scalar(raw)
    return record


def read_records(text: str, list_keys: Iterable[str] = ()) -> list[dict]:
    return [parse_record(line, list_keys) for line in text.splitlines() if line.strip()]
