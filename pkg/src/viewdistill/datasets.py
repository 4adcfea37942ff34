"""Dataset ingestion and a synthetic desk-scale generator.

Real datasets follow the standard directory layout (bounding_box_train /
query / bounding_box_test) with ``<identity>_c<camera>...`` file naming.
The synthetic generator writes the same layout, so the whole pipeline runs
unchanged on generated data.  Identity in a synthetic image is carried by
the conjunction of three colored body bands; no single band determines it,
so partial views hold complementary information.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    path: str        # relative to the dataset root; doubles as the sample id
    identity: int
    camera: int

    @property
    def is_junk(self) -> bool:
        return self.identity == -1


_MARKET_RE = re.compile(r"^(-?\d+)_c(\d+)")


def parse_market_name(filename: str) -> Optional[Tuple[int, int]]:
    """``0001_c1s1_000151_00.jpg`` -> (1, 1); None if unparsable."""
    m = _MARKET_RE.match(filename)
    if not m:
        return None
    return int(m.group(1)), int(m.group(2))


# DukeMTMC-reID uses the same <identity>_c<camera> convention; further
# layouts plug in here.
NAMING_SCHEMES = {"market1501": parse_market_name,
                  "dukemtmc": parse_market_name}

SPLIT_DIRS = {"train": "bounding_box_train", "query": "query",
              "gallery": "bounding_box_test"}

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp"}


@dataclass
class DatasetManifest:
    root: str
    train: List[SampleRecord]
    query: List[SampleRecord]
    gallery: List[SampleRecord]
    fingerprint: str
    rejects: List[str] = field(default_factory=list)

    @property
    def train_records(self) -> List[SampleRecord]:
        """Training samples with junk identities dropped."""
        return [r for r in self.train if not r.is_junk]

    @property
    def train_label_map(self) -> Dict[int, int]:
        """Identity -> contiguous class index over the training split."""
        ids = sorted({r.identity for r in self.train_records})
        return {identity: i for i, identity in enumerate(ids)}

    @property
    def n_train_classes(self) -> int:
        return len(self.train_label_map)

    def to_dict(self) -> dict:
        def dump(records):
            return [{"path": r.path, "identity": r.identity, "camera": r.camera}
                    for r in records]
        return {"root": self.root, "fingerprint": self.fingerprint,
                "rejects": self.rejects,
                "train": dump(self.train), "query": dump(self.query),
                "gallery": dump(self.gallery)}

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        def load(items):
            return [SampleRecord(i["path"], i["identity"], i["camera"])
                    for i in items]
        return cls(root=d["root"], train=load(d["train"]),
                   query=load(d["query"]), gallery=load(d["gallery"]),
                   fingerprint=d["fingerprint"], rejects=list(d["rejects"]))


def dataset_fingerprint(root: Path, records: Sequence[SampleRecord]) -> str:
    """Hash over sorted (path, size, content-hash) triples."""
    h = hashlib.sha256()
    for rec in sorted(records, key=lambda r: r.path):
        data = (root / rec.path).read_bytes()
        h.update(rec.path.encode())
        h.update(str(len(data)).encode())
        h.update(hashlib.sha1(data).digest())
    return h.hexdigest()


def _scan_split(root: Path, split_dir: str, parse) -> Tuple[List[SampleRecord], List[str]]:
    d = root / split_dir
    if not d.is_dir():
        raise DatasetError(f"missing split directory {d}")
    records, rejects = [], []
    for p in sorted(d.iterdir()):
        if p.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        parsed = parse(p.name)
        if parsed is None:
            rejects.append(str(p.relative_to(root)))
            continue
        identity, camera = parsed
        records.append(SampleRecord(str(p.relative_to(root)), identity, camera))
    if not records:
        raise DatasetError(f"split directory {d} contains no parsable images")
    return records, rejects


def ingest(root, scheme: str = "market1501") -> DatasetManifest:
    """Scan the three split directories into a manifest.

    Unparsable filenames land in the rejects report.  Junk identities (-1)
    are kept and flagged via SampleRecord.is_junk.  Train/test identity
    overlap is rejected, as the standard protocol requires disjoint sets.
    """
    root = Path(root)
    parse = NAMING_SCHEMES[scheme]
    train, rej_t = _scan_split(root, SPLIT_DIRS["train"], parse)
    query, rej_q = _scan_split(root, SPLIT_DIRS["query"], parse)
    gallery, rej_g = _scan_split(root, SPLIT_DIRS["gallery"], parse)
    train_ids = {r.identity for r in train}
    test_ids = {r.identity for r in query + gallery if not r.is_junk}
    overlap = train_ids & test_ids
    if overlap:
        raise DatasetError(
            f"train/test identity sets overlap: {sorted(overlap)[:5]}")
    records = train + query + gallery
    fingerprint = dataset_fingerprint(root, records)
    return DatasetManifest(root=str(root), train=train, query=query,
                           gallery=gallery, fingerprint=fingerprint,
                           rejects=rej_t + rej_q + rej_g)


def load_image(root, record: SampleRecord) -> np.ndarray:
    with Image.open(Path(root) / record.path) as im:
        return np.asarray(im.convert("RGB"))


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

# Distinct base colors the band palettes draw from.
_PALETTE = np.array([
    [200, 40, 40], [40, 170, 40], [50, 60, 200], [210, 190, 40],
    [180, 50, 180], [40, 180, 180],
], dtype=np.float32)


@dataclass(frozen=True)
class SyntheticSpec:
    n_train_ids: int = 16
    n_test_ids: int = 8
    images_per_id: int = 8
    test_images_per_id: int = 8
    height: int = 64
    width: int = 32
    n_cameras: int = 2
    illumination: float = 0.7    # gain gap between camera regimes
    occlusion_rate: float = 0.35  # train-split occluder probability
    test_occlusion_rate: float = 0.9
    jitter: float = 40.0         # pixel noise sigma
    boundary_jitter: int = 2     # band boundary shift in rows
    seed: int = 0

    def palette_size(self) -> int:
        total = self.n_train_ids + self.n_test_ids
        p = int(np.ceil(np.sqrt(total)))
        p = max(p, 3)
        if p > len(_PALETTE):
            raise ValueError(
                f"{total} identities need palette {p} > {len(_PALETTE)}")
        return p


def identity_attributes(spec: SyntheticSpec) -> Dict[int, Tuple[int, int, int]]:
    """Band color indices per identity.

    Head and torso indices enumerate a grid; the legs index is their sum mod
    the palette size.  Every single band value is shared across identities,
    so only the conjunction of bands identifies a person.
    """
    p = spec.palette_size()
    attrs = {}
    for j in range(spec.n_train_ids + spec.n_test_ids):
        c1, c2 = j % p, (j // p) % p
        attrs[j + 1] = (c1, c2, (c1 + c2) % p)  # identities are 1-based
    return attrs


def _render_person(spec: SyntheticSpec, bands: Tuple[int, int, int],
                   camera: int, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    img = np.zeros((h, w, 3), dtype=np.float32)
    b1 = h // 4 + int(rng.integers(-spec.boundary_jitter, spec.boundary_jitter + 1))
    b2 = (5 * h) // 8 + int(rng.integers(-spec.boundary_jitter,
                                         spec.boundary_jitter + 1))
    img[:b1] = _PALETTE[bands[0]]
    img[b1:b2] = _PALETTE[bands[1]]
    img[b2:] = _PALETTE[bands[2]]
    # camera regimes differ by illumination gain plus a slight color cast
    gain = 1.0 - spec.illumination * (camera - 1) / max(1, spec.n_cameras - 1)
    cast = 1.0 + 0.08 * (camera - 1) * np.array([1.0, -0.5, -1.0],
                                                dtype=np.float32)
    img = img * gain * cast
    img = img * float(rng.uniform(0.9, 1.1))
    img += rng.normal(0.0, spec.jitter, size=img.shape).astype(np.float32)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _occlude(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    oh = int(rng.integers(h // 3, (2 * h) // 3))
    ow = int(rng.integers((2 * w) // 3, w + 1))
    r0 = int(rng.integers(0, h - oh + 1))
    c0 = int(rng.integers(0, w - ow + 1))
    out = img.copy()
    out[r0:r0 + oh, c0:c0 + ow] = rng.integers(60, 120)
    return out


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write a deterministic synthetic dataset and return its manifest.

    Train identities are 1..n_train, test identities follow, disjoint.
    Test images are split per identity into query (one per camera) and
    gallery (the rest), so every query has cross-camera matches.
    """
    out = Path(out_dir)
    for d in SPLIT_DIRS.values():
        (out / d).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    attrs = identity_attributes(spec)

    def write(split: str, identity: int, camera: int, index: int,
              occl_rate: float) -> None:
        img = _render_person(spec, attrs[identity], camera, rng)
        if rng.random() < occl_rate:
            img = _occlude(img, rng)
        name = f"{identity:04d}_c{camera}_{index:03d}.png"
        Image.fromarray(img).save(out / SPLIT_DIRS[split] / name)

    for j in range(spec.n_train_ids):
        identity = j + 1
        for i in range(spec.images_per_id):
            camera = (i % spec.n_cameras) + 1
            write("train", identity, camera, i, spec.occlusion_rate)

    for j in range(spec.n_test_ids):
        identity = spec.n_train_ids + j + 1
        for i in range(spec.test_images_per_id):
            camera = (i % spec.n_cameras) + 1
            split = "query" if i < spec.n_cameras else "gallery"
            write(split, identity, camera, i, spec.test_occlusion_rate)

    manifest = ingest(out, scheme="market1501")
    manifest.save(out / "manifest.json")
    with open(out / "attributes.json", "w") as f:
        json.dump({str(k): list(v) for k, v in attrs.items()}, f, indent=1)
    return manifest
