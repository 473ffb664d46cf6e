# app/services/manifest.py
"""
Plain-text `key=value` run manifest.

The manifest is opened before any work starts and every entry is flushed as
soon as it is written, so a crashed run still leaves a parsable record.
"""
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional
import logging
import threading

from app.core.models import RunConfig
from app.core.run_config import config_items

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"


class RunManifest:
    """Append-only key=value record of one command invocation"""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self.path.write_text("", encoding="utf-8")

    @classmethod
    def start(cls, output_dir: Path, command: str) -> "RunManifest":
        manifest = cls(Path(output_dir) / MANIFEST_NAME)
        manifest.write("command", command)
        manifest.write("started_at", datetime.now(timezone.utc).isoformat())
        logger.info(f"📝 Manifest started at {manifest.path}")
        return manifest

    def record_config(self, cfg: RunConfig) -> None:
        for key, value in config_items(cfg):
            self.write(f"config.{key}", value)
        # which batches feed the upper-level gradient
        self.write("bissl.hvp_pretext_batch", "most_recent_lower_batch")
        self.write("bissl.downstream_batch", "fresh_per_upper_step")

    def write(self, key: str, value: Any) -> None:
        text = str(value).replace("\n", " ")
        with self._lock, open(self.path, "a", encoding="utf-8") as handle:
            handle.write(f"{key}={text}\n")
            handle.flush()

    def record_hash(self, name: str, digest: str) -> None:
        self.write(f"hash.{name}", digest)

    def record_timing(self, stage: str, seconds: float) -> None:
        self.write(f"seconds.{stage}", f"{seconds:.3f}")


def read_manifest(path: Path) -> Dict[str, str]:
    """Parse a manifest; later keys override earlier ones."""
    entries: Dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            entries[key] = value
    return entries


def maybe_write(manifest: Optional[RunManifest], key: str, value: Any) -> None:
    if manifest is not None:
        manifest.write(key, value)
