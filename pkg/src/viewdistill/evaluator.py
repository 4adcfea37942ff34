"""Retrieval evaluation: flip-averaged test features, cosine ranking,
CMC Rank-1 and mAP, with the standard same-camera exclusion protocol and a
direct-transfer mode for models trained on another dataset."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .datasets import DatasetManifest, SampleRecord, load_image
from .srstore import generate_sr, write_vector_file
from .views import ViewSpec

PROTOCOLS = ("standard", "cross_dataset")


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    """a.b / (|a||b|); zero vectors are rejected."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine score undefined for zero vectors")
    return float(a @ b / (na * nb))


def cosine_matrix(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    if (qn == 0).any() or (gn == 0).any():
        raise ValueError("cosine score undefined for zero vectors")
    return (q / qn) @ (g / gn).T


def test_feature(embed_fn, image: np.ndarray, holistic_spec: ViewSpec,
                 interpolation: str = "bilinear") -> np.ndarray:
    """Flip-averaged holistic feature; identical definition to the cached
    supervisory representations, applied to the holistic view."""
    return generate_sr(embed_fn, image, holistic_spec, interpolation)


@dataclass
class QueryRanking:
    query_index: int
    gallery_indices: np.ndarray  # ordered, exclusions removed
    scores: np.ndarray
    average_precision: Optional[float]  # None when the query was skipped


@dataclass
class RankingResult:
    rank1: float
    mean_ap: float
    n_queries: int
    n_gallery: int
    n_skipped: int
    protocol: str
    rankings: List[QueryRanking] = field(default_factory=list)

    def summary(self) -> dict:
        return {"protocol": self.protocol, "rank1": self.rank1,
                "mAP": self.mean_ap, "queries": self.n_queries,
                "gallery": self.n_gallery, "skipped": self.n_skipped}


def evaluate(query_features: np.ndarray, query_ids: Sequence[int],
             query_cams: Sequence[int], gallery_features: np.ndarray,
             gallery_ids: Sequence[int], gallery_cams: Sequence[int],
             protocol: str = "standard",
             keep_rankings: bool = True) -> RankingResult:
    """Rank the gallery per query by descending cosine score and aggregate
    CMC Rank-1 and mAP.

    Junk entries (identity -1) never count; same-identity same-camera
    gallery entries are excluded per query.  Ties are broken by the stable
    gallery order.  Queries with no relevant gallery entry are skipped and
    counted.  The cross_dataset protocol keeps the same exclusions; it only
    labels the result (features come from a model trained elsewhere).
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    scores = cosine_matrix(query_features, gallery_features)

    rankings: List[QueryRanking] = []
    hits = 0
    aps: List[float] = []
    skipped = 0
    for qi in range(len(query_ids)):
        junk = gallery_ids == -1
        junk |= (gallery_ids == query_ids[qi]) & (gallery_cams == query_cams[qi])
        keep = np.flatnonzero(~junk)
        order = keep[np.argsort(-scores[qi, keep], kind="stable")]
        relevant = gallery_ids[order] == query_ids[qi]
        n_rel = int(relevant.sum())
        if n_rel == 0:
            skipped += 1
            if keep_rankings:
                rankings.append(QueryRanking(qi, order, scores[qi, order], None))
            continue
        hits += int(relevant[0])
        ranks = np.flatnonzero(relevant) + 1  # 1-based ranks of the hits
        ap = sum((j + 1) / int(rank) for j, rank in enumerate(ranks)) / n_rel
        aps.append(ap)
        if keep_rankings:
            rankings.append(QueryRanking(qi, order, scores[qi, order], ap))

    n_eval = len(query_ids) - skipped
    return RankingResult(
        rank1=hits / n_eval if n_eval else 0.0,
        mean_ap=sum(aps) / len(aps) if aps else 0.0,
        n_queries=len(query_ids),
        n_gallery=len(gallery_ids),
        n_skipped=skipped,
        protocol=protocol,
        rankings=rankings if keep_rankings else [],
    )


def extract_split_features(embed_fn, root, records: Sequence[SampleRecord],
                           holistic_spec: ViewSpec,
                           interpolation: str = "bilinear") -> np.ndarray:
    feats = [test_feature(embed_fn, load_image(root, r), holistic_spec,
                          interpolation) for r in records]
    return np.stack(feats)


def evaluate_model(embed_fn, manifest: DatasetManifest, holistic_spec: ViewSpec,
                   protocol: str = "standard",
                   interpolation: str = "bilinear") -> RankingResult:
    """Extract flip-averaged features for query and gallery and rank."""
    qf = extract_split_features(embed_fn, manifest.root, manifest.query,
                                holistic_spec, interpolation)
    gf = extract_split_features(embed_fn, manifest.root, manifest.gallery,
                                holistic_spec, interpolation)
    return evaluate(
        qf, [r.identity for r in manifest.query],
        [r.camera for r in manifest.query],
        gf, [r.identity for r in manifest.gallery],
        [r.camera for r in manifest.gallery],
        protocol=protocol)


def dump_features(path, features: np.ndarray, sample_ids: Sequence[str],
                  *, model_id: str, config_hash: str,
                  dataset_fingerprint: str) -> None:
    """Persist features in the same record format as the SR cache files."""
    header = {"teacher_id": model_id, "view": "holistic",
              "dim": int(features.shape[1]), "dtype": "float32-le",
              "config_hash": config_hash,
              "dataset_fingerprint": dataset_fingerprint}
    write_vector_file(path, header, sample_ids,
                      [f.astype(np.float32) for f in features])


def write_report(result: RankingResult, path_prefix) -> None:
    """Emit the structured text report and the machine-readable table."""
    summary = result.summary()
    lines = [
        f"protocol: {summary['protocol']}",
        f"queries:  {summary['queries']} ({summary['skipped']} skipped)",
        f"gallery:  {summary['gallery']}",
        f"Rank-1:   {summary['rank1']:.4f}",
        f"mAP:      {summary['mAP']:.4f}",
    ]
    with open(f"{path_prefix}.txt", "w") as f:
        f.write("\n".join(lines) + "\n")
    with open(f"{path_prefix}.json", "w") as f:
        json.dump(summary, f, indent=1)
