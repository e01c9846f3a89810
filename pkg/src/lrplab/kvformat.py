"""Flat ``key = value`` text files used for configs and run manifests.

Format: one pair per line, ``#`` starts a comment, blank lines ignored,
UTF-8. Values are written with ``repr`` for floats so that numbers
round-trip exactly.
"""

from __future__ import annotations

from pathlib import Path


class KvFormatError(ValueError):
    """Raised for malformed key=value lines."""


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(text: str):
    """Coerce a raw string to bool, int, or float when it looks like one."""
    low = text.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def write_kv(path, mapping) -> None:
    lines = [f"{key} = {format_value(value)}" for key, value in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_kv(path, coerce: bool = True) -> dict:
    """Parse a key=value file; with ``coerce`` values become bool/int/float."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise KvFormatError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise KvFormatError(f"{path}:{lineno}: empty key")
        value = value.strip()
        out[key] = parse_value(value) if coerce else value
    return out
