"""Offline supervisory representations: generation and bit-exact persistence.

A teacher's representation for a training sample is the average of its
embeddings of the deterministic view crop and of the crop's horizontal
mirror.  No random augmentation enters; the vectors are therefore fixed and
can be written once and read unchanged throughout distillation.

One binary file per teacher (``sr_<teacher_id>.bin``): a magic string, a
JSON header (teacher id, view, dim, config hash, dataset fingerprint, sample
order), then one fixed-size record per sample of little-endian float32
values followed by a CRC32 of the vector bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from .views import ViewSpec, crop_view

MAGIC = b"SRCACHE1"
WORKERS_ENV = "VIEWDISTILL_WORKERS"


class CacheKeyError(KeyError):
    """A (sample, view) key is absent; the cache is stale or misconfigured."""


class CacheIntegrityError(RuntimeError):
    """A record failed its checksum."""


class StaleCacheError(RuntimeError):
    """The cache was built under a different dataset or configuration."""


@dataclass(frozen=True)
class SREntry:
    sample_id: str
    view_id: str
    teacher_id: str
    vector: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


def generate_sr(embed_fn: Callable[[np.ndarray], np.ndarray],
                image: np.ndarray, spec: ViewSpec,
                interpolation: str = "bilinear") -> np.ndarray:
    """Flip-averaged embedding of the deterministic view crop.

    (embed(crop) + embed(mirror(crop))) / 2, as float32.
    """
    crop = crop_view(image, spec, interpolation)
    flipped = crop[:, ::-1, :].copy()
    a = np.asarray(embed_fn(crop), dtype=np.float32)
    b = np.asarray(embed_fn(flipped), dtype=np.float32)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"embed_fn must return fixed-size vectors, got "
                         f"{a.shape} and {b.shape}")
    return ((a + b) / 2.0).astype(np.float32)


def _n_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _record_size(dim: int) -> int:
    return 4 * dim + 4


def _pack_record(vector: np.ndarray) -> bytes:
    data = np.ascontiguousarray(vector, dtype="<f4").tobytes()
    return data + struct.pack("<I", zlib.crc32(data))


def _unpack_record(blob: bytes, dim: int) -> np.ndarray:
    data, (crc,) = blob[:4 * dim], struct.unpack("<I", blob[4 * dim:])
    if zlib.crc32(data) != crc:
        raise CacheIntegrityError("record checksum mismatch")
    return np.frombuffer(data, dtype="<f4").copy()


class SRFile:
    """Reader for one teacher's record file.

    Reads use positioned I/O on one shared descriptor, so concurrent readers
    need no locking once the header is parsed.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._fd = os.open(self.path, os.O_RDONLY)
        head = os.pread(self._fd, len(MAGIC) + 4, 0)
        if head[:len(MAGIC)] != MAGIC:
            os.close(self._fd)
            self._fd = -1
            raise StaleCacheError(f"{self.path} is not an SR cache file")
        (hlen,) = struct.unpack("<I", head[len(MAGIC):])
        self.header = json.loads(
            os.pread(self._fd, hlen, len(MAGIC) + 4).decode())
        self.dim = int(self.header["dim"])
        self._base = len(MAGIC) + 4 + hlen
        self._index = {sid: i for i, sid in enumerate(self.header["sample_ids"])}

    def __del__(self):
        if getattr(self, "_fd", -1) >= 0:
            os.close(self._fd)

    def offset(self, sample_id: str) -> int:
        return self._base + self._index[sample_id] * _record_size(self.dim)

    def read(self, sample_id: str) -> np.ndarray:
        if sample_id not in self._index:
            raise CacheKeyError(
                f"sample {sample_id!r} not in SR file for teacher "
                f"{self.header['teacher_id']!r}")
        blob = os.pread(self._fd, _record_size(self.dim),
                        self.offset(sample_id))
        return _unpack_record(blob, self.dim)

    def verify(self) -> List[str]:
        """Sample ids whose records fail their checksum (or are truncated)."""
        bad = []
        size = _record_size(self.dim)
        with open(self.path, "rb") as f:
            f.seek(self._base)
            for sid in self.header["sample_ids"]:
                blob = f.read(size)
                if len(blob) < size:
                    bad.append(sid)
                    continue
                try:
                    _unpack_record(blob, self.dim)
                except CacheIntegrityError:
                    bad.append(sid)
        return bad

    @property
    def sample_ids(self) -> List[str]:
        return list(self.header["sample_ids"])


def write_vector_file(path, header: dict, sample_ids: Sequence[str],
                      vectors: Sequence[np.ndarray]) -> None:
    """Write a complete record file (also used for feature dumps)."""
    header = dict(header)
    header["sample_ids"] = list(sample_ids)
    hblob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hblob)))
        f.write(hblob)
        for v in vectors:
            f.write(_pack_record(v))


@dataclass
class BuildReport:
    new_writes: int = 0
    repaired: int = 0
    verified: int = 0

    def merged(self, other: "BuildReport") -> "BuildReport":
        return BuildReport(self.new_writes + other.new_writes,
                           self.repaired + other.repaired,
                           self.verified + other.verified)


class SRCache:
    """All teachers' SR files under one directory, opened for reading."""

    def __init__(self, directory, files: Dict[str, SRFile]):
        self.directory = Path(directory)
        self._files = files

    @classmethod
    def open(cls, directory, expected_fingerprint: Optional[str] = None,
             expected_config_hash: Optional[str] = None) -> "SRCache":
        directory = Path(directory)
        files = {}
        for p in sorted(directory.glob("sr_*.bin")):
            sf = SRFile(p)
            if (expected_fingerprint is not None
                    and sf.header["dataset_fingerprint"] != expected_fingerprint):
                raise StaleCacheError(
                    f"{p} was built from a different dataset "
                    f"(fingerprint {sf.header['dataset_fingerprint'][:12]}...)")
            if (expected_config_hash is not None
                    and sf.header["config_hash"] != expected_config_hash):
                raise StaleCacheError(
                    f"{p} was built under a different config")
            files[sf.header["view"]] = sf
        if not files:
            raise StaleCacheError(f"no sr_*.bin files in {directory}")
        return cls(directory, files)

    @property
    def views(self) -> List[str]:
        return sorted(self._files)

    def sample_ids(self, view: str) -> List[str]:
        return self._files[view].sample_ids

    def dim(self, view: str) -> int:
        return self._files[view].dim

    def read(self, sample_id: str, view: str) -> np.ndarray:
        if view not in self._files:
            raise CacheKeyError(f"no SR file for view {view!r}")
        return self._files[view].read(sample_id)

    def read_batch(self, sample_ids: Sequence[str], view: str) -> np.ndarray:
        return np.stack([self.read(sid, view) for sid in sample_ids])

    def cache_hash(self) -> str:
        """Digest over every cache file; unchanged files hash identically."""
        h = hashlib.sha256()
        for p in sorted(self.directory.glob("sr_*.bin")):
            h.update(p.name.encode())
            h.update(p.read_bytes())
        return h.hexdigest()


def _build_one(view: str, teacher_id: str, embed_fn, spec: ViewSpec,
               images: Callable[[str], np.ndarray], sample_ids: Sequence[str],
               dim: int, out_path: Path, meta: dict,
               interpolation: str) -> BuildReport:
    report = BuildReport()
    header = {"teacher_id": teacher_id, "view": view, "dim": dim,
              "dtype": "float32-le", **meta}

    def compute(sid: str) -> np.ndarray:
        vec = generate_sr(embed_fn, images(sid), spec, interpolation)
        if vec.shape[0] != dim:
            raise ValueError(
                f"teacher {teacher_id!r} emits dim {vec.shape[0]}, manifest "
                f"says {dim}")
        return vec

    if out_path.exists():
        try:
            existing = SRFile(out_path)
        except (StaleCacheError, json.JSONDecodeError, struct.error):
            existing = None
        expected_header = dict(header, sample_ids=list(sample_ids))
        if existing is not None and existing.header == expected_header:
            bad = existing.verify()
            report.verified += len(sample_ids) - len(bad)
            if bad:  # replace exactly the corrupt records
                with open(out_path, "r+b") as f:
                    for sid in bad:
                        f.seek(existing.offset(sid))
                        f.write(_pack_record(compute(sid)))
                report.repaired += len(bad)
            return report

    workers = _n_workers()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            vectors = list(pool.map(compute, sample_ids))
    else:
        vectors = [compute(sid) for sid in sample_ids]
    write_vector_file(out_path, header, sample_ids, vectors)
    report.new_writes += len(sample_ids)
    return report


def build_cache(teachers: Mapping[str, Callable[[np.ndarray], np.ndarray]],
                specs: Mapping[str, ViewSpec],
                dims: Mapping[str, int],
                sample_ids: Sequence[str],
                images: Callable[[str], np.ndarray],
                out_dir, *, config_hash: str, dataset_fingerprint: str,
                teacher_ids: Optional[Mapping[str, str]] = None,
                interpolation: str = "bilinear"):
    """Write one SR file per registered view; idempotent per record.

    ``teachers`` maps view name to an embedding function; every view in
    ``specs`` must have one (checked before any extraction).  Returns
    (SRCache, BuildReport).
    """
    missing = set(specs) - set(teachers)
    if missing:
        raise ValueError(f"no teacher registered for views: {sorted(missing)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config_hash": config_hash,
            "dataset_fingerprint": dataset_fingerprint}
    report = BuildReport()
    for view, spec in specs.items():
        teacher_id = (teacher_ids or {}).get(view, view)
        path = out / f"sr_{teacher_id}.bin"
        one = _build_one(view, teacher_id, teachers[view], spec, images,
                         sample_ids, dims[view], path, meta, interpolation)
        report = report.merged(one)
    cache = SRCache.open(out, expected_fingerprint=dataset_fingerprint,
                         expected_config_hash=config_hash)
    return cache, report
