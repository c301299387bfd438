"""Small file-output helpers shared by the report writers."""
from __future__ import annotations

import csv
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path


def fmt(value) -> str:
    """Render a cell for CSV output.

    Floats use repr(), which round-trips exactly and is stable across
    runs, so re-running a pipeline yields byte-identical files.
    """
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@contextmanager
def atomic_writer(path: str | Path):
    """Open a text file for writing via a temp file + atomic rename.

    On failure the destination is left untouched; no partially written
    output ever appears under its final name.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_csv(path: str | Path, header: list[str], rows) -> None:
    with atomic_writer(path) as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
