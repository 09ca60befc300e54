"""
Run manifest: what a run directory contains and how it was produced.

One manifest.json per run directory, merged across subcommands. It lists
every artifact with its sha256, the config hash, per-stage wall time and
denoiser-evaluation counts, and the per-purpose seed offsets.
"""
import json
import logging
from pathlib import Path
from typing import Dict, Optional

from pydantic import BaseModel, Field, ValidationError

from ddlab import __version__
from ddlab.artifacts.store import ArtifactRecord, ArtifactStore, atomic_write_bytes
from ddlab.errors import ArtifactError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


class StageRecord(BaseModel):
    """Cost of one pipeline stage."""
    wall_time_s: float
    evaluations: Dict[str, int] = Field(default_factory=dict)


class RunManifest(BaseModel):
    """Index of everything one run directory holds."""
    library_version: str = __version__
    config_hash: Optional[str] = None
    master_seed: Optional[int] = None
    seed_offsets: Dict[str, int] = Field(default_factory=dict)
    artifacts: Dict[str, ArtifactRecord] = Field(default_factory=dict)
    stages: Dict[str, StageRecord] = Field(default_factory=dict)

    def record_stage(self, name: str, wall_time_s: float, evaluations: Optional[Dict[str, int]] = None):
        self.stages[name] = StageRecord(wall_time_s=wall_time_s, evaluations=dict(evaluations or {}))

    def absorb(self, store: ArtifactStore):
        """Take over every artifact the store has written."""
        for path, record in store.records.items():
            self.artifacts[path] = record

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def load_manifest(run_dir: Path) -> RunManifest:
    """Manifest of a run directory, or an empty one if none exists yet."""
    path = Path(run_dir) / MANIFEST_NAME
    if not path.exists():
        return RunManifest()
    try:
        with open(path, "r", encoding="utf-8") as f:
            return RunManifest.model_validate(json.load(f))
    except (json.JSONDecodeError, ValidationError) as e:
        raise ArtifactError(f"Unreadable manifest {path}: {e}")


def save_manifest(run_dir: Path, manifest: RunManifest) -> Path:
    path = Path(run_dir) / MANIFEST_NAME
    atomic_write_bytes(path, manifest.to_json().encode("utf-8"))
    logger.info(f"Manifest updated: {path} ({len(manifest.artifacts)} artifacts)")
    return path
