# app/training/checkpoint.py
"""
Versioned torch.save artifacts for parameters and training state.

Parameter hashes are SHA-256 over the float64 bytes of a vector plus its
segment names, so equal hashes mean bitwise-equal parameters.
"""
from pathlib import Path
from typing import Any, Dict, Optional, Tuple
import hashlib
import logging

import torch

from app.autodiff.tensor_ops import Layout, ParamVector, Segment
from app.core.errors import ConfigError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def layout_to_dict(layout: Layout) -> list:
    return [[seg.name, seg.offset, seg.length, list(seg.shape)] for seg in layout.segments]


def layout_from_dict(data: list) -> Layout:
    return Layout(tuple(Segment(name, int(off), int(length), tuple(shape)) for name, off, length, shape in data))


def vector_to_dict(v: ParamVector) -> Dict[str, Any]:
    return {"values": v.values.detach().clone(), "layout": layout_to_dict(v.layout)}


def vector_from_dict(data: Dict[str, Any]) -> ParamVector:
    return ParamVector(data["values"].clone(), layout_from_dict(data["layout"]))


def param_hash(v: ParamVector) -> str:
    digest = hashlib.sha256()
    digest.update(",".join(v.layout.names).encode("utf-8"))
    digest.update(v.values.detach().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _read(path: Path, kind: str) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"Unsupported checkpoint format in {path}")
    if payload.get("kind") != kind:
        raise ConfigError(f"{path} holds a '{payload.get('kind')}' artifact, expected '{kind}'")
    return payload


def save_params(path: Path, params: Dict[str, ParamVector], meta: Optional[Dict[str, Any]] = None) -> Dict[str, str]:
    """Write named parameter vectors; returns their hashes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    hashes = {name: param_hash(v) for name, v in params.items()}
    torch.save(
        {
            "format_version": FORMAT_VERSION,
            "kind": "params",
            "params": {name: vector_to_dict(v) for name, v in params.items()},
            "hashes": hashes,
            "meta": dict(meta or {}),
        },
        path,
    )
    logger.info(f"✅ Saved parameters to {path}")
    return hashes


def load_params(path: Path) -> Tuple[Dict[str, ParamVector], Dict[str, Any]]:
    payload = _read(path, "params")
    params = {name: vector_from_dict(d) for name, d in payload["params"].items()}
    return params, payload["meta"]


def save_train_state(path: Path, state: Dict[str, Any]) -> None:
    """`state` is the plain-dict form produced by TrainState.to_dict()."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({"format_version": FORMAT_VERSION, "kind": "train_state", "state": state}, tmp)
    tmp.replace(path)


def load_train_state(path: Path) -> Dict[str, Any]:
    return _read(path, "train_state")["state"]
