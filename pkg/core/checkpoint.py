"""Versioned checkpoint files of named float64 tensors.

Layout: 8-byte magic, uint32 format version, uint64 header length, a UTF-8
JSON header, then the raw little-endian float64 payload of every tensor in
header order.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from core.errors import FormatError

logger = logging.getLogger(__name__)

MAGIC = b"CO4CKPT\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_checkpoint(model, path: Union[str, Path], metadata: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    tensors, payload, offset = [], [], 0
    for name, param in model.named_parameters():
        raw = np.ascontiguousarray(param.value, dtype="<f8").tobytes()
        tensors.append({"name": name, "shape": param.shape, "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)

    header = {
        "format_version": FORMAT_VERSION,
        "arch": getattr(model, "arch", ""),
        "config": model.cfg.to_dict() if hasattr(model, "cfg") else {},
        "metadata": metadata or {},
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for raw in payload:
            f.write(raw)
    logger.info("saved %d tensors (%d values) to %s", len(tensors), offset // 8, path)
    return path


def _read(path: Path):
    blob = path.read_bytes()
    if len(blob) < _PREFIX.size:
        raise FormatError(f"{path}: too short to be a checkpoint")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: not a co4 checkpoint")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(blob[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt header ({e})") from None
    return header, memoryview(blob)[start + header_len:]


def read_checkpoint_header(path: Union[str, Path]) -> Dict[str, Any]:
    header, _ = _read(Path(path))
    return header


def describe_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    """Summary of a checkpoint file without loading its payload."""
    path = Path(path)
    header = read_checkpoint_header(path)
    meta = header.get("metadata", {})
    stat = path.stat()
    return {
        "name": meta.get("name", path.stem),
        "description": meta.get("description", ""),
        "tags": meta.get("tags", []),
        "arch": header.get("arch", ""),
        "config": header.get("config", {}),
        "parameters": sum(int(np.prod(t["shape"])) for t in header["tensors"]),
        "file_path": str(path),
        "file_size": stat.st_size,
        "modified_time": stat.st_mtime,
    }


def load_checkpoint(model, path: Union[str, Path]) -> Dict[str, Any]:
    """Copy stored tensors into ``model``; names and shapes must match exactly."""
    path = Path(path)
    header, payload = _read(path)
    stored = {t["name"]: t for t in header["tensors"]}
    params = dict(model.named_parameters())

    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise FormatError(f"{path}: parameter names differ (missing {missing}, unexpected {extra})")

    for name, param in params.items():
        entry = stored[name]
        if list(entry["shape"]) != param.shape:
            raise FormatError(f"{path}: '{name}' has shape {entry['shape']}, model expects {param.shape}")
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise FormatError(f"{path}: payload truncated at '{name}'")
        values = np.frombuffer(payload[entry["offset"]:end], dtype="<f8")
        param.assign(values.reshape(param.shape))
    logger.info("loaded %d tensors from %s", len(params), path)
    return header


class CheckpointManager:
    """A directory of named checkpoints with descriptions and tags."""

    def __init__(self, checkpoint_dir: Union[str, Path] = "checkpoints"):
        self.checkpoint_dir = Path(checkpoint_dir)
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)

    def _path(self, name: str) -> Path:
        return self.checkpoint_dir / f"{name}.co4"

    def save(self, model, name: str, description: str = "", tags: Optional[List[str]] = None) -> bool:
        if not self._is_valid_name(name):
            logger.warning("refusing to save checkpoint with invalid name %r", name)
            return False
        metadata = {"name": name, "description": description, "tags": tags or []}
        try:
            save_checkpoint(model, self._path(name), metadata)
            return True
        except OSError as e:
            logger.error("failed to save checkpoint %s: %s", name, e)
            return False

    def load(self, model, name: str) -> Optional[Dict[str, Any]]:
        path = self._path(name)
        if not path.exists():
            return None
        return load_checkpoint(model, path)

    def describe(self, name: str) -> Optional[Dict[str, Any]]:
        path = self._path(name)
        if not path.exists():
            return None
        try:
            return describe_checkpoint(path)
        except FormatError as e:
            logger.warning("skipping unreadable checkpoint %s: %s", path, e)
            return None

    def list_checkpoints(self) -> List[Dict[str, Any]]:
        found = [self.describe(p.stem) for p in self.checkpoint_dir.glob("*.co4")]
        return sorted((d for d in found if d), key=lambda d: d["modified_time"], reverse=True)

    def delete(self, name: str) -> bool:
        path = self._path(name)
        if not path.exists():
            return False
        path.unlink()
        return True

    @staticmethod
    def _is_valid_name(name: str) -> bool:
        if not name or not name.strip():
            return False
        return not any(ch in name for ch in '<>:"/\\|?*')
