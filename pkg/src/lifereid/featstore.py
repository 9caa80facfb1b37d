"""Append-only persisted feature sets backing the no-recompute gallery protocol.

A feature set is one file: a JSON manifest line (integers as decimal
strings, hash as hex), then one ``id cam`` decimal text line per row, then
the little-endian float64 payload.  The content hash is FNV-1a 64 over the
column text bytes followed by the payload bytes, and is verified on load.

A store directory holds one file per (task, split) tag.  Appending a tag
that already exists is refused — once a gallery set is written by the model
of its task, nothing may overwrite it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
import json

import numpy as np

from . import model as mdl
from .binio import bytes_to_floats, floats_to_bytes, fnv1a64
from .errors import (
    DegenerateInputError,
    DimensionError,
    FormatError,
    IntegrityError,
    ProtocolError,
)

_NORM_TOL = 1e-9


@dataclass
class FeatureSet:
    extractor_version: int        # task index of the model that produced the rows
    task: int                     # dataset the rows belong to
    split: str                    # "gallery" (stored) or "query" (transient)
    ids: np.ndarray               # [N] int64
    cams: np.ndarray              # [N] int64
    feats: np.ndarray             # [N, 32], unit rows
    content_hash: int = field(init=False)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.cams = np.asarray(self.cams, dtype=np.int64)
        self.feats = np.asarray(self.feats, dtype=np.float64)
        n = len(self.ids)
        if self.feats.ndim != 2 or self.feats.shape[0] != n or len(self.cams) != n:
            raise DimensionError("ids, cams, and feature rows must align")
        if n:
            norms = np.sqrt((self.feats * self.feats).sum(axis=1))
            if np.abs(norms - 1.0).max() > _NORM_TOL:
                raise DegenerateInputError("feature rows must be unit norm")
        self.content_hash = fnv1a64(self._columns_bytes() + floats_to_bytes(self.feats))

    def _columns_bytes(self) -> bytes:
        lines = [f"{int(i)} {int(c)}\n" for i, c in zip(self.ids, self.cams)]
        return "".join(lines).encode("ascii")

    @property
    def tag(self) -> tuple[int, str]:
        return (self.task, self.split)


def _tag_filename(tag: tuple[int, str]) -> str:
    task, split = tag
    if split not in ("gallery", "query"):
        raise DimensionError(f"unknown split {split!r}")
    return f"task{int(task)}_{split}.feats"


def store_append(store_dir: str, fs: FeatureSet) -> str:
    """Persist a feature set under its tag; refuses to replace an existing one."""
    os.makedirs(store_dir, exist_ok=True)
    path = os.path.join(store_dir, _tag_filename(fs.tag))
    if os.path.exists(path):
        raise ProtocolError(
            f"feature set for tag {fs.tag} already stored; sets are append-only")
    manifest = {
        "extractor_version": str(fs.extractor_version),
        "task": str(fs.task),
        "split": fs.split,
        "count": str(len(fs.ids)),
        "dim": str(fs.feats.shape[1] if fs.feats.size else mdl.FEAT_DIM),
        "hash": f"{fs.content_hash:016x}",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(fs._columns_bytes())
        fh.write(floats_to_bytes(fs.feats))
    return path


def store_load(store_dir: str, tag: tuple[int, str]) -> FeatureSet:
    """Load and verify one feature set; raises if it is missing or corrupt."""
    path = os.path.join(store_dir, _tag_filename(tag))
    if not os.path.exists(path):
        raise ProtocolError(f"no stored feature set for tag {tag}")
    with open(path, "rb") as fh:
        header = fh.readline()
        rest = fh.read()
    try:
        manifest = json.loads(header.decode("utf-8"))
        version = int(manifest["extractor_version"])
        task = int(manifest["task"])
        split = manifest["split"]
        count = int(manifest["count"])
        dim = int(manifest["dim"])
        want_hash = int(manifest["hash"], 16)
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"bad feature-set manifest: {exc}") from exc
    if (task, split) != tag:
        raise FormatError(f"manifest tag {(task, split)} does not match {tag}")

    payload_bytes = count * dim * 8
    if payload_bytes > len(rest):
        raise FormatError("feature-set file truncated")
    columns, payload = rest[:len(rest) - payload_bytes], rest[len(rest) - payload_bytes:]
    if fnv1a64(columns + payload) != want_hash:
        raise IntegrityError(f"feature set {tag} content hash mismatch")
    ids, cams = [], []
    try:
        text = columns.decode("ascii")
    except UnicodeDecodeError as exc:
        raise FormatError("feature-set columns are not ascii") from exc
    for line in text.splitlines():
        try:
            a, b = line.split(" ")
            ids.append(int(a))
            cams.append(int(b))
        except ValueError as exc:
            raise FormatError(f"bad id/camera line {line!r}") from exc
    if len(ids) != count:
        raise FormatError("feature-set row count does not match manifest")
    fs = FeatureSet(extractor_version=version, task=task, split=split,
                    ids=np.asarray(ids, dtype=np.int64),
                    cams=np.asarray(cams, dtype=np.int64),
                    feats=bytes_to_floats(payload, (count, dim)))
    return fs


def store_tags(store_dir: str) -> list[tuple[int, str]]:
    """Tags present in a store directory, task-ascending."""
    tags = []
    if os.path.isdir(store_dir):
        for name in sorted(os.listdir(store_dir)):
            if name.endswith(".feats") and name.startswith("task"):
                stem = name[: -len(".feats")]
                task_part, _, split = stem.partition("_")
                try:
                    tags.append((int(task_part[4:]), split))
                except ValueError:
                    continue
    return sorted(tags)


def file_hash(store_dir: str, tag: tuple[int, str]) -> int:
    """FNV-1a 64 of the complete stored file (manifest included)."""
    path = os.path.join(store_dir, _tag_filename(tag))
    with open(path, "rb") as fh:
        return fnv1a64(fh.read())


def extract_features(checkpoint_path: str, images: np.ndarray, ids: np.ndarray,
                     cams: np.ndarray, task: int, split: str,
                     cac_mode: str = "multiply") -> FeatureSet:
    """Run a saved model over images and package the results as a FeatureSet."""
    params, _ = mdl.checkpoint_load(checkpoint_path)
    feats = mdl.infer_features(params, images, cac_mode)
    return FeatureSet(extractor_version=params.task_index, task=task, split=split,
                      ids=np.asarray(ids, dtype=np.int64),
                      cams=np.asarray(cams, dtype=np.int64), feats=feats)
