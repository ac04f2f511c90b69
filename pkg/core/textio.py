"""Strict UTF-8 line reading for the text formats the toolkit loads."""
from pathlib import Path

from core.errors import DataFormatError


def decode_lines(raw: bytes, path) -> list:
    """
    Returns `(lineno, text)` for every line of `raw`, 1-based, newline stripped.
    Bytes that are not valid UTF-8 raise a DataFormatError naming the offending line.
    """
    lines = []
    for lineno, chunk in enumerate(raw.split(b"\n"), start=1):
        try:
            text = chunk.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataFormatError(f"invalid UTF-8 at byte {exc.start}", path, lineno) from None
        lines.append((lineno, text.rstrip("\r")))
    return lines


def read_lines(path) -> list:
    path = Path(path)
    return decode_lines(path.read_bytes(), path)
