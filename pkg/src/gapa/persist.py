"""Versioned text documents for model state.

All model files are JSON documents written by a deterministic emitter: keys
keep insertion order and every real is rendered with 17 significant digits,
which round-trips float64 exactly.  Loading goes through the standard json
parser, so documents stay interoperable.
"""

from __future__ import annotations

import json
import math
import os
from typing import Any

from .errors import PersistenceError

__all__ = ["format_real", "load_document", "save_document"]


def format_real(x: float) -> str:
    """Render a finite float with 17 significant digits (exact round trip)."""
    if not math.isfinite(x):
        raise PersistenceError(f"cannot serialize non-finite real {x!r}")
    return "%.17g" % x


def _emit(obj: Any, out: list[str]) -> None:
    if obj is None:
        out.append("null")
    elif obj is True:
        out.append("true")
    elif obj is False:
        out.append("false")
    elif isinstance(obj, int):
        out.append(str(obj))
    elif isinstance(obj, float):
        out.append(format_real(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        out.append("{")
        for i, (key, value) in enumerate(obj.items()):
            if i:
                out.append(",")
            out.append(json.dumps(str(key)))
            out.append(":")
            _emit(value, out)
        out.append("}")
    elif isinstance(obj, (list, tuple)):
        out.append("[")
        for i, value in enumerate(obj):
            if i:
                out.append(",")
            _emit(value, out)
        out.append("]")
    else:
        raise PersistenceError(f"cannot serialize object of type {type(obj).__name__}")


def dumps_document(obj: dict) -> str:
    out: list[str] = []
    _emit(obj, out)
    out.append("\n")
    return "".join(out)


def save_document(obj: dict, path: str | os.PathLike) -> None:
    """Write a versioned document; ``obj`` must carry a ``version`` key."""
    if "version" not in obj:
        raise PersistenceError("document is missing its version field")
    text = dumps_document(obj)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def load_document(path: str | os.PathLike, expected_version: str) -> dict:
    """Read a versioned document, checking the version field.

    Raises
    ------
    PersistenceError
        If the file is missing, unparsable, not an object, or carries a
        version other than ``expected_version``.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise PersistenceError(f"cannot read {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PersistenceError(f"malformed document {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise PersistenceError(f"malformed document {path}: not an object")
    version = obj.get("version")
    if version != expected_version:
        raise PersistenceError(
            f"version mismatch in {path}: found {version!r}, expected {expected_version!r}"
        )
    return obj
