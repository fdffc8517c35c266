"""Checkpoint persistence and the model_dir checkpoint lifecycle.

File format (bit-exact): magic "ESTCKPT1", u32 little-endian header length,
UTF-8 JSON header {"format_version": 1, "global_step": N, "variables":
[{"name", "shape"}, ...]}, concatenated little-endian float64 payloads in
header order, CRC32 (IEEE) of the payload as u32 little-endian. Writes go
through a temp file plus atomic rename, and the "checkpoint" index file is
updated only after the data file is in place, so readers polling the
directory never observe a partial checkpoint.
"""
from __future__ import annotations

import dataclasses
import json
import os
import struct
import zlib
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .errors import CorruptCheckpointError, NoCheckpointError

MAGIC = b"ESTCKPT1"
FORMAT_VERSION = 1
INDEX_FILE = "checkpoint"
WRITER_FILE = "checkpoint_writer"


@dataclasses.dataclass(frozen=True)
class Checkpoint:
    global_step: int
    variables: Dict[str, np.ndarray]


def checkpoint_basename(step: int) -> str:
    return f"model.ckpt-{step}.estckpt"


def step_of_basename(name: str) -> int:
    return int(name[len("model.ckpt-"):-len(".estckpt")])


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f"{path.name}.tmp-{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_checkpoint(path, variables: Dict[str, np.ndarray], global_step: int) -> None:
    """Serialize variables (sorted by name) and replace path atomically."""
    path = Path(path)
    names = sorted(variables)
    header = {
        "format_version": FORMAT_VERSION,
        "global_step": int(global_step),
        "variables": [
            {"name": name, "shape": list(np.asarray(variables[name]).shape)}
            for name in names
        ],
    }
    header_bytes = json.dumps(header).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(np.asarray(variables[name], dtype=np.float64))
        .astype("<f8").tobytes()
        for name in names)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    blob = (MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes
            + payload + struct.pack("<I", crc))
    _atomic_write(path, blob)


def _read_header(blob: bytes, path) -> tuple:
    if len(blob) < len(MAGIC) + 4 or blob[:len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"corrupt checkpoint {path}: bad magic bytes")
    (header_len,) = struct.unpack_from("<I", blob, len(MAGIC))
    header_end = len(MAGIC) + 4 + header_len
    if len(blob) < header_end:
        raise CorruptCheckpointError(f"corrupt checkpoint {path}: truncated header")
    try:
        header = json.loads(blob[len(MAGIC) + 4:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(
            f"corrupt checkpoint {path}: unreadable header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CorruptCheckpointError(
            f"corrupt checkpoint {path}: unsupported format_version "
            f"{header.get('format_version')!r}")
    return header, header_end


def peek_global_step(path) -> int:
    """Read the stored global_step without touching the payload."""
    path = Path(path)
    with open(path, "rb") as fh:
        prefix = fh.read(len(MAGIC) + 4)
        if len(prefix) < len(MAGIC) + 4 or prefix[:len(MAGIC)] != MAGIC:
            raise CorruptCheckpointError(f"corrupt checkpoint {path}: bad magic bytes")
        (header_len,) = struct.unpack_from("<I", prefix, len(MAGIC))
        header, _ = _read_header(prefix + fh.read(header_len), path)
    return int(header["global_step"])


def restore_checkpoint(path) -> Checkpoint:
    """Parse and CRC-verify one checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise NoCheckpointError(f"no checkpoint file at {path}")
    blob = path.read_bytes()
    header, header_end = _read_header(blob, path)
    if len(blob) < header_end + 4:
        raise CorruptCheckpointError(f"corrupt checkpoint {path}: truncated payload")
    payload = blob[header_end:-4]
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise CorruptCheckpointError(
            f"corrupt checkpoint {path}: payload CRC mismatch")
    variables: Dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["variables"]:
        shape = tuple(int(d) for d in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise CorruptCheckpointError(
                f"corrupt checkpoint {path}: payload shorter than header claims")
        arr = np.frombuffer(payload, dtype="<f8", count=count,
                            offset=offset).astype(np.float64).reshape(shape)
        variables[entry["name"]] = arr
        offset += nbytes
    if offset != len(payload):
        raise CorruptCheckpointError(
            f"corrupt checkpoint {path}: payload longer than header claims")
    return Checkpoint(global_step=int(header["global_step"]), variables=variables)


def restore_into_graph(graph, checkpoint: Checkpoint) -> None:
    """Assign checkpoint values into a built graph.

    Every trainable graph variable must be present in the checkpoint;
    non-trainable variables absent from it keep their initial values, and
    checkpoint entries with no matching graph variable are ignored.
    """
    for name, var in graph.variables.items():
        if name in checkpoint.variables:
            value = checkpoint.variables[name]
            if value.shape != var.shape:
                raise ValueError(
                    f"checkpoint variable {name!r} has shape {value.shape}, "
                    f"the graph expects {var.shape}")
            var.assign(value)
        elif var.trainable:
            raise ValueError(
                f"checkpoint is missing trainable variable {name!r}")


class CheckpointStore:
    """model_dir side: numbered files, the JSON index, retention, writer id."""

    def __init__(self, model_dir, keep_max: int = 5):
        if keep_max < 1:
            raise ValueError(f"keep_checkpoint_max must be >= 1, got {keep_max}")
        self.model_dir = Path(model_dir)
        self.keep_max = keep_max

    @property
    def index_path(self) -> Path:
        return self.model_dir / INDEX_FILE

    def _read_index(self) -> dict:
        try:
            return json.loads(self.index_path.read_text())
        except FileNotFoundError:
            return {"latest": None, "all_retained": []}

    def _write_index(self, index: dict) -> None:
        _atomic_write(self.index_path, json.dumps(index).encode("utf-8"))

    def claim_writer(self, writer_id: str) -> None:
        """Assert single-writer ownership of this model_dir's checkpoints."""
        self.model_dir.mkdir(parents=True, exist_ok=True)
        marker = self.model_dir / WRITER_FILE
        if marker.exists():
            owner = marker.read_text().strip()
            if owner != writer_id:
                raise RuntimeError(
                    f"model_dir {self.model_dir} checkpoints are written by "
                    f"{owner!r}; refusing writes from {writer_id!r}")
            return
        _atomic_write(marker, f"{writer_id}\n".encode("utf-8"))

    def save(self, variables: Dict[str, np.ndarray], step: int) -> Path:
        self.model_dir.mkdir(parents=True, exist_ok=True)
        name = checkpoint_basename(step)
        save_checkpoint(self.model_dir / name, variables, step)
        index = self._read_index()
        retained: List[str] = [n for n in index.get("all_retained", []) if n != name]
        retained.append(name)
        retained.sort(key=step_of_basename)
        while len(retained) > self.keep_max:
            pruned = retained.pop(0)
            try:
                os.unlink(self.model_dir / pruned)
            except FileNotFoundError:
                pass
        self._write_index({"latest": name, "all_retained": retained})
        return self.model_dir / name

    def latest_path(self) -> Optional[Path]:
        latest = self._read_index().get("latest")
        if latest is None:
            return None
        path = self.model_dir / latest
        return path if path.exists() else None

    def retained_steps(self) -> List[int]:
        return [step_of_basename(n) for n in self._read_index().get("all_retained", [])]
