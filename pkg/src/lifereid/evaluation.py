"""Retrieval evaluation: ranking, average precision, and the report tables.

Protocol: gallery features come from the store exactly as persisted at each
task (never recomputed); query features are computed fresh by the final
model.  Ranking uses cosine similarity of unit vectors, excludes gallery
rows sharing both identity and camera with the query, and breaks score ties
by ascending gallery row index.  Queries left with no true match are dropped
from the metric denominators and counted separately.

A deliberate "backfilled" control path recomputes gallery features with the
final model instead — the protocol violation the store exists to prevent —
so the two regimes can be compared side by side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import featstore, model as mdl
from .errors import DimensionError, ProtocolError
from .synth import TaskDataset


@dataclass
class RankedList:
    query_id: int
    query_cam: int
    order: np.ndarray     # gallery row indices, best similarity first
    matches: np.ndarray   # bool, aligned with order
    n_excluded: int       # gallery rows removed by the same-id/same-camera rule


def rank(query_feat: np.ndarray, query_id: int, query_cam: int,
         gallery: featstore.FeatureSet) -> RankedList:
    """Rank a gallery for one query under the exclusion rule."""
    query_feat = np.asarray(query_feat, dtype=np.float64)
    if gallery.feats.shape[0] == 0:
        raise DimensionError("empty gallery")
    if query_feat.shape != (gallery.feats.shape[1],):
        raise DimensionError("query/gallery dimension mismatch")
    sims = gallery.feats @ query_feat
    valid = ~((gallery.ids == query_id) & (gallery.cams == query_cam))
    vidx = np.flatnonzero(valid)
    # Stable sort of negated scores: ties fall back to ascending row index.
    order = vidx[np.argsort(-sims[vidx], kind="stable")]
    return RankedList(int(query_id), int(query_cam), order,
                      gallery.ids[order] == query_id, int(len(sims) - len(vidx)))


def average_precision(rl: RankedList) -> float | None:
    """AP of one ranked list; None when the list holds no true match."""
    pos = np.flatnonzero(rl.matches)
    if len(pos) == 0:
        return None
    return float(np.mean((np.arange(len(pos)) + 1.0) / (pos + 1.0)))


def _score_queries(query_feats: np.ndarray, query_ids: np.ndarray,
                   query_cams: np.ndarray, gallery: featstore.FeatureSet):
    aps, hits = [], []
    excluded = 0
    for qf, qid, qcam in zip(query_feats, query_ids, query_cams):
        rl = rank(qf, int(qid), int(qcam), gallery)
        ap = average_precision(rl)
        if ap is None:
            excluded += 1
            continue
        aps.append(ap)
        hits.append(bool(rl.matches[0]))
    return aps, hits, excluded


@dataclass
class MetricsTable:
    names: list[str]
    map_values: list[float]
    rank1_values: list[float]
    excluded: int

    @property
    def average_map(self) -> float:
        return float(np.mean(self.map_values))

    @property
    def average_rank1(self) -> float:
        return float(np.mean(self.rank1_values))

    def to_csv(self) -> str:
        lines = ["dataset,mAP,rank1"]
        for name, m, r in zip(self.names, self.map_values, self.rank1_values):
            lines.append(f"{name},{m:.6f},{r:.6f}")
        lines.append(f"Average,{self.average_map:.6f},{self.average_rank1:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_per_dataset(params: mdl.ModelParams, suite: list[TaskDataset],
                         store_dir: str, cac_mode: str,
                         require_version: bool = True) -> MetricsTable:
    """Stored galleries vs fresh final-model queries, one row per dataset."""
    names, maps, rank1s = [], [], []
    excluded = 0
    for t, task in enumerate(suite, start=1):
        gallery = featstore.store_load(store_dir, (t, "gallery"))
        if require_version and gallery.extractor_version != t:
            raise ProtocolError(
                f"gallery for dataset {t} was extracted by model "
                f"{gallery.extractor_version}, expected {t}")
        qf = mdl.infer_features(params, task.query_x, cac_mode)
        aps, hits, skip = _score_queries(qf, task.query_ids, task.query_cams, gallery)
        if not aps:
            raise ProtocolError(f"dataset {t} has no scorable queries")
        names.append(task.name)
        maps.append(float(np.mean(aps)))
        rank1s.append(float(np.mean(hits)))
        excluded += skip
    return MetricsTable(names, maps, rank1s, excluded)


def backfilled_control(params: mdl.ModelParams, suite: list[TaskDataset],
                       cac_mode: str) -> MetricsTable:
    """Control evaluation with galleries re-embedded by the final model.

    This is the code path the append-only store forbids for real runs; it
    exists so the backfill-free numbers have an explicit point of contrast.
    """
    names, maps, rank1s = [], [], []
    excluded = 0
    for t, task in enumerate(suite, start=1):
        gallery = featstore.FeatureSet(
            extractor_version=params.task_index, task=t, split="gallery",
            ids=task.gallery_ids, cams=task.gallery_cams,
            feats=mdl.infer_features(params, task.gallery_x, cac_mode))
        qf = mdl.infer_features(params, task.query_x, cac_mode)
        aps, hits, skip = _score_queries(qf, task.query_ids, task.query_cams, gallery)
        if not aps:
            raise ProtocolError(f"dataset {t} has no scorable queries")
        names.append(task.name)
        maps.append(float(np.mean(aps)))
        rank1s.append(float(np.mean(hits)))
        excluded += skip
    return MetricsTable(names, maps, rank1s, excluded)


def evaluate_unified(params: mdl.ModelParams, suite: list[TaskDataset],
                     store_dir: str, cac_mode: str) -> tuple[float, float, int]:
    """All stored galleries concatenated; every query ranked against the union."""
    sets = [featstore.store_load(store_dir, (t, "gallery"))
            for t in range(1, len(suite) + 1)]
    union = featstore.FeatureSet(
        extractor_version=0, task=0, split="gallery",
        ids=np.concatenate([s.ids for s in sets]),
        cams=np.concatenate([s.cams for s in sets]),
        feats=np.concatenate([s.feats for s in sets]))
    aps, hits = [], []
    excluded = 0
    for task in suite:
        qf = mdl.infer_features(params, task.query_x, cac_mode)
        a, h, skip = _score_queries(qf, task.query_ids, task.query_cams, union)
        aps += a
        hits += h
        excluded += skip
    if not aps:
        raise ProtocolError("no scorable queries in the unified evaluation")
    return float(np.mean(aps)), float(np.mean(hits)), excluded


def compatibility_matrix(checkpoint_paths: list[str], suite: list[TaskDataset],
                         store_dir: str, cac_mode: str) -> np.ndarray:
    """entry [i, j]: queries of dataset j+1 embedded by model i+1, ranked
    against dataset j+1's stored gallery (embedded by model j+1)."""
    n = len(suite)
    if len(checkpoint_paths) != n:
        raise DimensionError("one checkpoint per dataset required")
    galleries = [featstore.store_load(store_dir, (t, "gallery"))
                 for t in range(1, n + 1)]
    out = np.zeros((n, n))
    for i, path in enumerate(checkpoint_paths):
        params, _ = mdl.checkpoint_load(path)
        for j, task in enumerate(suite):
            qf = mdl.infer_features(params, task.query_x, cac_mode)
            aps, _, _ = _score_queries(qf, task.query_ids, task.query_cams, galleries[j])
            out[i, j] = float(np.mean(aps)) if aps else np.nan
    return out
