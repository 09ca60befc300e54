"""
Atomic artifact writing for run directories.

Every file lands via a temp file in the destination directory followed by
os.replace, so an interrupted run never leaves a partial CSV or checkpoint.
Each write is hashed (sha256) and remembered so the run manifest can list it.
"""
import csv
import hashlib
import io
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

logger = logging.getLogger(__name__)


class ArtifactRecord(BaseModel):
    """One file written by a run."""
    path: str
    sha256: str
    size_bytes: int
    kind: str


def atomic_write_bytes(path: Path, content: bytes) -> Path:
    """Write bytes to `path` atomically, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_fd, temp_path = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(temp_fd, "wb") as f:
            f.write(content)
        os.replace(temp_path, path)
    except Exception:
        try:
            os.unlink(temp_path)
        except OSError:
            pass
        raise
    return path


def format_cell(value: Any) -> str:
    """CSV cell text; floats use repr so equal bits give equal bytes."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def csv_bytes(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> bytes:
    """UTF-8, comma-delimited, LF-terminated CSV with a header row."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([format_cell(v) for v in row])
    return buffer.getvalue().encode("utf-8")


def read_csv(path: Path) -> List[Dict[str, str]]:
    """Rows of a CSV as dicts keyed by header."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


class ArtifactStore:
    """
    Writes artifacts under one run directory and remembers what it wrote.

    Paths given to the write methods are relative to the run directory.
    """

    def __init__(self, run_dir: Path):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.records: Dict[str, ArtifactRecord] = {}

    def path(self, rel_path: str) -> Path:
        return self.run_dir / rel_path

    def write_bytes(self, rel_path: str, content: bytes, kind: str) -> ArtifactRecord:
        """Store content atomically and record its hash."""
        atomic_write_bytes(self.path(rel_path), content)
        record = ArtifactRecord(
            path=rel_path,
            sha256=hashlib.sha256(content).hexdigest(),
            size_bytes=len(content),
            kind=kind,
        )
        self.records[rel_path] = record
        logger.debug(f"Wrote {kind} artifact {rel_path} ({len(content)} bytes)")
        return record

    def write_text(self, rel_path: str, text: str, kind: str) -> ArtifactRecord:
        if text and not text.endswith("\n"):
            text += "\n"
        return self.write_bytes(rel_path, text.encode("utf-8"), kind)

    def write_csv(
        self,
        rel_path: str,
        header: Sequence[str],
        rows: Iterable[Sequence[Any]],
        kind: str = "csv",
    ) -> ArtifactRecord:
        return self.write_bytes(rel_path, csv_bytes(header, rows), kind)

    def exists(self, rel_path: str) -> bool:
        return self.path(rel_path).exists()

    def require(self, rel_path: str, error: type, what: Optional[str] = None) -> Path:
        """Path of an existing artifact, else raise `error`."""
        path = self.path(rel_path)
        if not path.exists():
            raise error(f"{what or 'Artifact'} not found: {path}")
        return path
