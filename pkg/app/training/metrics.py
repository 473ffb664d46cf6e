# app/training/metrics.py
"""Append-only CSV metrics streams, flushed after every row."""
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence
import csv
import logging

logger = logging.getLogger(__name__)

BISSL_COLUMNS = [
    "step",
    "alternation",
    "phase",
    "loss",
    "grad_norm_pre_clip",
    "lr",
    "cg_initial_residual",
    "cg_final_residual",
    "cg_fell_back",
    "coupling_term",
    "wall_ms",
]

EPOCH_COLUMNS = ["epoch", "loss", "grad_norm", "lr", "val_accuracy", "val_loss", "wall_ms"]


def _format(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricsWriter:
    """Keeps rows in memory and, when given a path, appends them to a CSV file."""

    def __init__(self, columns: Sequence[str], path: Optional[Path] = None, append: bool = False):
        self.columns = list(columns)
        self.path = Path(path) if path is not None else None
        self.rows: List[Dict[str, Any]] = []
        self._handle = None
        self._writer = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            exists = append and self.path.exists() and self.path.stat().st_size > 0
            self._handle = open(self.path, "a" if exists else "w", newline="", encoding="utf-8")
            self._writer = csv.writer(self._handle)
            if not exists:
                self._writer.writerow(self.columns)
                self._handle.flush()

    def write(self, row: Dict[str, Any]) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"Unknown metric columns: {sorted(unknown)}")
        self.rows.append(dict(row))
        if self._writer is not None:
            self._writer.writerow([_format(row.get(c)) for c in self.columns])
            self._handle.flush()

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None
            self._writer = None

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
