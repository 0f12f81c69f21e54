"""Seekable float32 array archives and run metadata.

Archive layout (little-endian)::

    b"WSSA" | u32 version | u64 count
    index entries: u32 id_len | id bytes | u32 dtype | u64 offset
                   | u32 rank | u32 * rank shape | u32 n_ids | u32 * n_ids class ids
    payloads, in index order
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import __version__

MAGIC = b"WSSA"
VERSION = 1
DTYPE_F32 = 1


class ArchiveError(ValueError):
    pass


@dataclass
class ArrayRecord:
    image_id: str
    class_ids: list
    array: np.ndarray

    def __post_init__(self):
        self.array = np.ascontiguousarray(self.array, dtype="<f4")
        self.class_ids = [int(c) for c in self.class_ids]
        if self.array.ndim not in (2, 3):
            raise ArchiveError(f"{self.image_id}: rank must be 2 or 3")


def _index_entry(rec: ArrayRecord, offset: int) -> bytes:
    bid = rec.image_id.encode("utf-8")
    parts = [struct.pack("<I", len(bid)), bid,
             struct.pack("<IQI", DTYPE_F32, offset, rec.array.ndim),
             struct.pack(f"<{rec.array.ndim}I", *rec.array.shape),
             struct.pack("<I", len(rec.class_ids)),
             struct.pack(f"<{len(rec.class_ids)}I", *rec.class_ids)]
    return b"".join(parts)


def write_archive(records: Iterable[ArrayRecord], path) -> None:
    records = list(records)
    ids = [r.image_id for r in records]
    if len(set(ids)) != len(ids):
        raise ArchiveError("duplicate image ids")
    header = MAGIC + struct.pack("<IQ", VERSION, len(records))
    index_size = sum(len(_index_entry(r, 0)) for r in records)
    offset = len(header) + index_size
    index = []
    for r in records:
        index.append(_index_entry(r, offset))
        offset += r.array.nbytes
    with open(path, "wb") as f:
        f.write(header)
        f.writelines(index)
        for r in records:
            f.write(r.array.tobytes())


class Archive:
    """Random-access reader; only the index is parsed on open."""

    def __init__(self, path):
        self.path = Path(path)
        data = self.path.read_bytes()
        self._data = data
        if len(data) < 16:
            raise ArchiveError(f"{path}: truncated header")
        if data[:4] != MAGIC:
            raise ArchiveError(f"{path}: bad magic {data[:4]!r}")
        version, count = struct.unpack_from("<IQ", data, 4)
        if version != VERSION:
            raise ArchiveError(f"{path}: unsupported version {version}")
        pos = 16
        self.entries = []
        try:
            for _ in range(count):
                (n,) = struct.unpack_from("<I", data, pos)
                pos += 4
                image_id = data[pos:pos + n].decode("utf-8")
                pos += n
                dtype, offset, rank = struct.unpack_from("<IQI", data, pos)
                pos += 16
                shape = struct.unpack_from(f"<{rank}I", data, pos)
                pos += 4 * rank
                (k,) = struct.unpack_from("<I", data, pos)
                pos += 4
                class_ids = list(struct.unpack_from(f"<{k}I", data, pos))
                pos += 4 * k
                if dtype != DTYPE_F32:
                    raise ArchiveError(f"{path}: unsupported dtype code {dtype}")
                self.entries.append((image_id, class_ids, tuple(shape), offset))
        except struct.error as e:
            raise ArchiveError(f"{path}: truncated index") from e
        for image_id, _, shape, offset in self.entries:
            if offset + 4 * int(np.prod(shape)) > len(data):
                raise ArchiveError(f"{path}: truncated payload for {image_id!r}")
        self._pos = {e[0]: i for i, e in enumerate(self.entries)}

    def __len__(self):
        return len(self.entries)

    def ids(self):
        return [e[0] for e in self.entries]

    def __contains__(self, image_id):
        return image_id in self._pos

    def record(self, key) -> ArrayRecord:
        i = self._pos[key] if isinstance(key, str) else key
        image_id, class_ids, shape, offset = self.entries[i]
        n = int(np.prod(shape))
        arr = np.frombuffer(self._data, dtype="<f4", count=n, offset=offset).reshape(shape)
        return ArrayRecord(image_id, class_ids, arr.copy())

    def __iter__(self):
        for i in range(len(self.entries)):
            yield self.record(i)


def read_archive(path) -> list:
    return list(Archive(path))


# ---------------------------------------------------------------------------

def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(config) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_hash(path) -> str:
    """Hash a file, or every file under a directory in sorted relative order."""
    path = Path(path)
    if path.is_file():
        return file_hash(path)
    h = hashlib.sha256()
    for p in sorted(q for q in path.rglob("*") if q.is_file()):
        h.update(p.relative_to(path).as_posix().encode())
        h.update(file_hash(p).encode())
    return h.hexdigest()


@dataclass
class RunMetadata:
    step: str
    config_hash: str
    seed: int
    inputs: dict = field(default_factory=dict)    # name -> sha256
    outputs: dict = field(default_factory=dict)   # relative path -> sha256
    tool_version: str = __version__
    timestamp: Optional[str] = None

    def deterministic_view(self) -> dict:
        d = asdict(self)
        d.pop("timestamp")
        return d


def write_run_metadata(meta: RunMetadata, path) -> None:
    d = asdict(meta)
    if d["timestamp"] is None:
        d["timestamp"] = datetime.now(timezone.utc).isoformat()
    path = Path(path)
    try:
        path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write run metadata to {path}: {e}") from e


def read_run_metadata(path) -> RunMetadata:
    return RunMetadata(**json.loads(Path(path).read_text(encoding="utf-8")))
