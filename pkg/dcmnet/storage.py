"""
DCMNet Storage Helpers

Atomic file writes: content goes to a temporary file next to the destination and is moved
into place with os.replace, so a failed command never leaves a half-written output.
"""

import json
import os
import tempfile
from pathlib import Path

from .errors import OutputPathError


def check_writable(path: str | Path) -> Path:
    """
    Fail early when ``path`` could not be written later.

    The nearest existing ancestor must be a writable directory and ``path`` itself must not
    be a directory. Nothing is created.

    Raises:
        OutputPathError: If the destination is unusable
    """
    path = Path(path)
    if path.is_dir():
        raise OutputPathError(f"Output path is a directory: {path}")
    ancestor = path.parent
    while not ancestor.exists() and ancestor != ancestor.parent:
        ancestor = ancestor.parent
    if not ancestor.is_dir():
        raise OutputPathError(f"Cannot write {path}: {ancestor} is not a directory")
    if not os.access(ancestor, os.W_OK | os.X_OK):
        raise OutputPathError(f"Cannot write {path}: {ancestor} is not writable")
    return path


def atomic_write_bytes(path: str | Path, payload: bytes) -> Path:
    """
    Write ``payload`` to ``path`` atomically, creating parent directories.

    Raises:
        OutputPathError: If the directory or file cannot be created
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    except OSError as e:
        raise OutputPathError(f"Cannot write {path}: {e.strerror or e}") from e
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except OSError as e:
        Path(tmp_name).unlink(missing_ok=True)
        raise OutputPathError(f"Cannot write {path}: {e.strerror or e}") from e
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return path


def atomic_write_text(path: str | Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: str | Path, document) -> Path:
    """Pretty-printed UTF-8 JSON, written atomically."""
    return atomic_write_text(path, json.dumps(document, indent=2, ensure_ascii=False) + "\n")


def canonical_json(document) -> bytes:
    """Key-sorted, whitespace-free UTF-8 JSON (stable bytes for the same document)."""
    return json.dumps(document, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode(
        "utf-8"
    )
