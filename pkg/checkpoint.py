"""
checkpoint.py
Binärer Checkpoint-Container für T60-Netz, Dereverberations-Netz und Joint-Netz.

Layout:
    b"RVTK" | uint32 Version | uint32 Header-Länge | JSON-Header (UTF-8) |
    float32-Blobs (little-endian) in Header-Reihenfolge
"""

from dataclasses import dataclass, field
from pathlib import Path
import json
from typing import Dict, Optional

import numpy as np

from config import InvalidArgumentError, replace_with_retry
from logger_system import logger

MAGIC = b"RVTK"
FORMAT_VERSION = 1
_U32 = np.dtype("<u4")
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    """
    Inhalt eines Checkpoints.

    Attributes:
        header: JSON-fähige Metadaten (kind, Layer-Specs, Optimizer, Seed, Historie, ...)
        tensors: Name → float32-Array (Parameter, BatchNorm-Puffer, Optimizer-Slots)
    """
    header: dict
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        # Gespeichert wird float32: Kopien im selben Format, unabhängig von den Live-Parametern
        self.tensors = {name: np.array(arr, dtype=_F32) for name, arr in self.tensors.items()}

    @property
    def kind(self) -> str:
        return self.header.get("kind", "")

    @property
    def history(self) -> list:
        return self.header.get("history", [])

    def subset(self, prefix: str) -> Dict[str, np.ndarray]:
        """Alle Tensoren mit Präfix, Präfix entfernt."""
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def save(self, path) -> Path:
        return save_checkpoint(path, self)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Schreibt den Container atomar (.tmp + os.replace)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(ckpt.header)
    header["tensors"] = [{"name": name, "shape": list(np.shape(arr))} for name, arr in ckpt.tensors.items()]
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    tmp_path = path.with_suffix(path.suffix + ".tmp")
    try:
        with open(tmp_path, "wb") as f:
            f.write(MAGIC)
            f.write(np.array([FORMAT_VERSION, len(header_bytes)], dtype=_U32).tobytes())
            f.write(header_bytes)
            for arr in ckpt.tensors.values():
                f.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())
        replace_with_retry(tmp_path, path)
    finally:
        if tmp_path.exists():
            tmp_path.unlink()
    logger.debug(f"Checkpoint gespeichert: {path} ({len(ckpt.tensors)} Tensoren)")
    return path


def load_checkpoint(path, expected_kind: Optional[str] = None) -> Checkpoint:
    """
    Liest einen Container.

    Raises:
        InvalidArgumentError: Datei fehlt, falsches Magic, unbekannte Version,
            abgeschnittene Daten oder falscher Checkpoint-Typ
    """
    path = Path(path)
    if not path.exists():
        raise InvalidArgumentError(f"Checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise InvalidArgumentError(f"{path} is not a checkpoint (magic {raw[:4]!r})")
    if len(raw) < 12:
        raise InvalidArgumentError(f"{path} is truncated")
    version, header_len = np.frombuffer(raw, dtype=_U32, count=2, offset=4)
    if version != FORMAT_VERSION:
        raise InvalidArgumentError(f"{path}: unsupported checkpoint version {int(version)}")
    offset = 12 + int(header_len)
    try:
        header = json.loads(raw[12:offset].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise InvalidArgumentError(f"{path}: corrupt checkpoint header: {e}")

    tensors = {}
    for entry in header.pop("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 4 * count > len(raw):
            raise InvalidArgumentError(f"{path} is truncated at tensor {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype=_F32, count=count, offset=offset).reshape(shape).copy()
        offset += 4 * count
    if offset != len(raw):
        raise InvalidArgumentError(f"{path}: {len(raw) - offset} trailing bytes after last tensor")

    ckpt = Checkpoint(header, tensors)
    if expected_kind is not None and ckpt.kind != expected_kind:
        raise InvalidArgumentError(f"{path}: expected a {expected_kind!r} checkpoint, got {ckpt.kind!r}")
    return ckpt
