"""Sequential training over a suite of identity datasets with replay.

The loop per task t:

* t >= 2: the previous part head is frozen (old branch classifier), the old
  attention encoder starts from the previous new-attention weights, and a
  fresh identity head is created for the task's identity count.  Momentum
  velocities reset (a new head makes stale velocities meaningless).
* Each step draws a P x K identity-balanced batch; from task 2 on, a replay
  batch rides along through the same encoder pass.  Losses follow the
  ablation flags; one momentum-SGD update per step.
* After a task: gallery features are extracted with the just-trained model
  and persisted append-only (they are never recomputed later); the replay
  store gains entries for this task (skipped on the last task); a checkpoint
  is written.

Steps per epoch = floor(train size / (P*K)), so one epoch sees roughly every
image once; with the defaults that is 640 / 32 = 20 steps.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import featstore, losses, model as mdl
from .autodiff import Tensor, backward
from .binio import bytes_to_floats, floats_to_bytes, fnv1a64
from .errors import (
    BatchCompositionError,
    ConfigError,
    FormatError,
    NumericError,
    ProtocolError,
)
from .losses import LossWeights
from .synth import IMAGE_SHAPE, TaskDataset


@dataclass(frozen=True)
class TrainConfig:
    epochs_per_task: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    p_ids: int = 8
    k_instances: int = 4
    replay_batch: int = 16
    replay_id_cap: int = 50
    replay_imgs_per_id: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.p_ids * self.k_instances < 4:
            raise ConfigError("P*K must be at least 4")
        if self.k_instances < 2:
            raise ConfigError("K must be at least 2 (each anchor needs a positive)")
        if self.p_ids < 2:
            raise ConfigError("P must be at least 2 (each anchor needs a negative)")
        if self.epochs_per_task < 1 or self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("bad optimizer settings")
        if self.replay_batch < 1 or self.replay_id_cap < 1 or self.replay_imgs_per_id < 1:
            raise ConfigError("bad replay settings")


@dataclass(frozen=True)
class AblationFlags:
    cmcl: bool = True
    pcl: bool = True
    cac: str = "multiply"          # off | multiply | average
    cmcl_normalize: bool = True    # study switch: False feeds raw features to cmcl

    def validate(self) -> None:
        if self.cac not in ("off", "multiply", "average"):
            raise ConfigError(f"unknown cac mode {self.cac!r}")


@dataclass
class ReplayEntry:
    image: np.ndarray          # [3, 40, 16]
    identity: int
    origin_task: int
    stored_feature: np.ndarray  # [32], unit norm, frozen at insertion


class ReplayStore:
    """Per-task exemplar lists; stored features are immutable after insertion."""

    def __init__(self):
        self.by_task: dict[int, list[ReplayEntry]] = {}

    def tasks(self) -> list[int]:
        return sorted(self.by_task)

    def total(self) -> int:
        return sum(len(v) for v in self.by_task.values())

    def add_task(self, task_index: int, entries: list[ReplayEntry]) -> None:
        if task_index in self.by_task:
            raise ProtocolError(f"replay entries for task {task_index} already stored")
        self.by_task[task_index] = entries

    def bank_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All stored features and identities, tasks ascending, insertion order."""
        feats, ids = [], []
        for t in self.tasks():
            for e in self.by_task[t]:
                feats.append(e.stored_feature)
                ids.append(e.identity)
        if not feats:
            return np.empty((0, mdl.FEAT_DIM)), np.empty(0, dtype=np.int64)
        return np.stack(feats), np.asarray(ids, dtype=np.int64)

    def task_hash(self, task_index: int) -> int:
        blob = b"".join(floats_to_bytes(e.stored_feature) for e in self.by_task[task_index])
        return fnv1a64(blob)

    def save(self, path: str) -> None:
        entries = [e for t in self.tasks() for e in self.by_task[t]]
        manifest = {
            "count": str(len(entries)),
            "ids": [str(e.identity) for e in entries],
            "tasks": [str(e.origin_task) for e in entries],
            "image_shape": [str(d) for d in IMAGE_SHAPE],
            "feat_dim": str(mdl.FEAT_DIM),
        }
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")
            if entries:
                fh.write(floats_to_bytes(np.stack([e.image for e in entries])))
                fh.write(floats_to_bytes(np.stack([e.stored_feature for e in entries])))

    @classmethod
    def load(cls, path: str) -> "ReplayStore":
        with open(path, "rb") as fh:
            header = fh.readline()
            payload = fh.read()
        try:
            manifest = json.loads(header.decode("utf-8"))
            count = int(manifest["count"])
            ids = [int(s) for s in manifest["ids"]]
            tasks = [int(s) for s in manifest["tasks"]]
            dim = int(manifest["feat_dim"])
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            raise FormatError(f"bad replay store header: {exc}") from exc
        if len(ids) != count or len(tasks) != count:
            raise FormatError("replay store column lengths disagree")
        img_bytes = count * int(np.prod(IMAGE_SHAPE)) * 8
        if len(payload) != img_bytes + count * dim * 8:
            raise FormatError("replay store payload size mismatch")
        images = bytes_to_floats(payload[:img_bytes], (count,) + IMAGE_SHAPE)
        feats = bytes_to_floats(payload[img_bytes:], (count, dim))
        if count:
            if not (np.isfinite(images).all() and np.isfinite(feats).all()):
                raise FormatError("replay store holds non-finite values")
            if images.min() < 0.0 or images.max() > 1.0:
                raise FormatError("replay images outside [0, 1]")
            norms = np.linalg.norm(feats, axis=1)
            if np.abs(norms - 1.0).max() > 1e-12:
                raise FormatError("stored replay features are not unit norm")
        store = cls()
        for i in range(count):
            store.by_task.setdefault(tasks[i], []).append(
                ReplayEntry(images[i], ids[i], tasks[i], feats[i]))
        return store


@dataclass
class StepStats:
    task_index: int
    step: int                      # step index within the task, from 0
    total: float
    ce: float
    tri: float
    pcl: float | None
    cmcl: float | None
    old_part_grad_norm: float | None   # gradient into the frozen head's inputs


@dataclass
class TrainResult:
    params: mdl.ModelParams
    frozen: mdl.FrozenOldHead | None
    store: ReplayStore
    checkpoint_paths: list[str]
    features_dir: str
    loss_history: list[list[float]] = field(default_factory=list)   # per task
    frozen_hashes: list[tuple[int, int, int]] = field(default_factory=list)
    # (task, hash at task start, hash at task end) for tasks >= 2


def sample_pk_batch(ids_sorted: np.ndarray, id_rows: dict[int, np.ndarray],
                    p: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Row indices for a P-identity x K-instance batch (grouped by identity)."""
    usable = [i for i in ids_sorted if len(id_rows[i]) >= 2]
    if len(usable) < p:
        raise BatchCompositionError(
            f"need {p} identities with >= 2 images, have {len(usable)}")
    chosen = rng.choice(np.asarray(usable, dtype=np.int64), size=p, replace=False)
    rows = []
    for ident in chosen:
        candidates = id_rows[int(ident)]
        replace = len(candidates) < k
        rows.append(rng.choice(candidates, size=k, replace=replace))
    return np.concatenate(rows)


def sample_replay_batch(store: ReplayStore, size: int,
                        rng: np.random.Generator) -> list[ReplayEntry]:
    """Round-robin over stored tasks, uniform within a task (with replacement)."""
    tasks = store.tasks()
    if not tasks:
        raise ProtocolError("replay store is empty")
    out = []
    for slot in range(size):
        entries = store.by_task[tasks[slot % len(tasks)]]
        out.append(entries[int(rng.integers(len(entries)))])
    return out


def update_replay_store(store: ReplayStore, params: mdl.ModelParams,
                        task: TaskDataset, cfg: TrainConfig, cac_mode: str,
                        rng: np.random.Generator) -> None:
    """Sample exemplars from the just-trained task and bank their features."""
    ids_sorted = np.unique(task.train_ids)
    n_keep = min(cfg.replay_id_cap, len(ids_sorted))
    chosen = np.sort(rng.choice(ids_sorted, size=n_keep, replace=False))
    entries: list[ReplayEntry] = []
    picked_rows = []
    for ident in chosen:
        rows = np.flatnonzero(task.train_ids == ident)
        take = min(cfg.replay_imgs_per_id, len(rows))
        picked_rows.append(rng.choice(rows, size=take, replace=False))
    picked = np.concatenate(picked_rows)
    feats = mdl.infer_features(params, task.train_x[picked], cac_mode)
    for row, feat in zip(picked, feats):
        entries.append(ReplayEntry(task.train_x[row].copy(),
                                   int(task.train_ids[row]),
                                   params.task_index, feat))
    store.add_task(params.task_index, entries)


def _momentum_step(params: mdl.ModelParams, velocities: dict[str, np.ndarray],
                   lr: float, momentum: float) -> None:
    for name, p in params.trainable():
        v = velocities.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            velocities[name] = v
        v *= momentum
        v += p.grad
        p.data -= lr * v
        p.zero_grad()


def _grad_norm(tensors) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    return float(np.sqrt(total))


def train_task(params: mdl.ModelParams, frozen: mdl.FrozenOldHead | None,
               store: ReplayStore, task: TaskDataset, cfg: TrainConfig,
               weights: LossWeights, flags: AblationFlags,
               rng: np.random.Generator, step_callback=None) -> list[float]:
    """Train one task in place; returns the per-step total-loss trace."""
    t = params.task_index
    ids_sorted = np.unique(task.train_ids)
    id_rows = {int(i): np.flatnonzero(task.train_ids == i) for i in ids_sorted}
    batch_size = cfg.p_ids * cfg.k_instances
    steps_per_epoch = max(1, len(task.train_ids) // batch_size)
    n_steps = cfg.epochs_per_task * steps_per_epoch
    use_cmcl = flags.cmcl and t >= 2 and store.total() > 0
    bank_feats, bank_ids = store.bank_arrays() if use_cmcl else (None, None)

    velocities: dict[str, np.ndarray] = {}
    trace = []
    for step in range(n_steps):
        rows = sample_pk_batch(ids_sorted, id_rows, cfg.p_ids, cfg.k_instances, rng)
        batch_ids = task.train_ids[rows]
        images = task.train_x[rows]
        replay_entries = None
        if use_cmcl:
            replay_entries = sample_replay_batch(store, cfg.replay_batch, rng)
            images = np.concatenate([images, np.stack([e.image for e in replay_entries])])

        try:
            stats = _train_step(params, frozen, images, batch_ids, ids_sorted,
                                replay_entries, bank_feats, bank_ids,
                                weights, flags, batch_size)
            _momentum_step(params, velocities, cfg.lr, cfg.momentum)
        except NumericError as exc:
            raise NumericError(f"step {step}: {exc}") from exc
        stats.step = step
        trace.append(stats.total)
        if step_callback is not None:
            step_callback(stats)
    return trace


def _train_step(params, frozen, images, batch_ids, ids_sorted, replay_entries,
                bank_feats, bank_ids, weights, flags, batch_size) -> StepStats:
    t = params.task_index
    x = Tensor(images)
    smap = mdl.encoder_forward(params, x)

    need_attn = flags.pcl or flags.cac != "off"
    m_new = m_old = m_cac = None
    if need_attn:
        m_new = mdl.attention_mask(params.attn_new_w1, params.attn_new_w2, smap)
        if params.attn_old_w1 is not None:
            m_old = mdl.attention_mask(params.attn_old_w1, params.attn_old_w2, smap)
    if flags.cac != "off":
        m_cac = m_new if m_old is None else mdl.consolidate_masks(m_old, m_new, flags.cac)

    raw, norm = mdl.global_feature(smap, m_cac)
    raw_b = raw.narrow(0, 0, batch_size)
    norm_b = norm.narrow(0, 0, batch_size)

    local_labels = np.searchsorted(ids_sorted, batch_ids)
    ce = losses.loss_ce(mdl.classify_identity(params.id_head, raw_b), local_labels)
    tri = losses.loss_triplet(raw_b, batch_ids, weights.margin)
    base = losses.loss_base(ce, tri, weights)

    pcl = None
    old_parts = None
    if flags.pcl:
        smap_b = smap.narrow(0, 0, batch_size)
        mask_new_b = m_new.narrow(0, 0, batch_size)
        new_parts = mdl.part_features(smap_b, mask_new_b, weights.n_parts)
        new_logits = mdl.classify_parts(params.part_head, new_parts)
        old_logits = None
        if m_old is not None and frozen is not None:
            mask_old_b = m_old.narrow(0, 0, batch_size)
            old_parts = mdl.part_features(smap_b, mask_old_b, weights.n_parts)
            old_logits = mdl.classify_parts(frozen.weights, old_parts)
        pcl = losses.loss_pcl(new_logits, old_logits)

    cmcl = None
    if replay_entries is not None:
        n_replay = len(replay_entries)
        anchor_ids = np.asarray([e.identity for e in replay_entries], dtype=np.int64)
        if flags.cmcl_normalize:
            anchors = norm.narrow(0, batch_size, n_replay)
            contrast = norm_b
        else:
            anchors = raw.narrow(0, batch_size, n_replay)
            contrast = raw_b
        cmcl = losses.loss_cmcl(anchors, anchor_ids, bank_feats, bank_ids,
                                contrast, weights.tau)

    total = losses.loss_total(base, cmcl, pcl, weights, t)
    backward(total)

    old_grad = _grad_norm(old_parts) if old_parts else None
    return StepStats(t, 0, total.item(), ce.item(), tri.item(),
                     pcl.item() if pcl is not None else None,
                     cmcl.item() if cmcl is not None else None,
                     old_grad)


def advance_to_task(params: mdl.ModelParams, rng: np.random.Generator,
                    n_classes: int) -> tuple[mdl.ModelParams, mdl.FrozenOldHead]:
    """Move a trained task-t model to task t+1: freeze the part head into the
    old branch, seed the old attention from the new one, fresh identity head."""
    frozen = mdl.FrozenOldHead(Tensor(params.part_head.data.copy()))
    params.attn_old_w1 = Tensor(params.attn_new_w1.data.copy(), requires_grad=True)
    params.attn_old_w2 = Tensor(params.attn_new_w2.data.copy(), requires_grad=True)
    params.id_head = Tensor(
        rng.normal(0.0, np.sqrt(1.0 / mdl.FEAT_DIM), (mdl.FEAT_DIM, n_classes)),
        requires_grad=True)
    params.task_index += 1
    return params, frozen


def train_sequence(suite: list[TaskDataset], cfg: TrainConfig, weights: LossWeights,
                   flags: AblationFlags, run_dir: str,
                   step_callback=None) -> TrainResult:
    """Run the full lifelong sequence and write the run directory artifacts."""
    cfg.validate()
    weights.validate()
    flags.validate()
    if not suite:
        raise ConfigError("empty dataset suite")
    _check_disjoint(suite)

    ckpt_dir = os.path.join(run_dir, "checkpoints")
    features_dir = os.path.join(run_dir, "features")
    os.makedirs(ckpt_dir, exist_ok=True)
    os.makedirs(features_dir, exist_ok=True)

    ss = np.random.SeedSequence(cfg.seed)
    init_ss, tasks_ss = ss.spawn(2)
    task_streams = tasks_ss.spawn(len(suite))
    init_rng = np.random.Generator(np.random.PCG64(init_ss))

    params = mdl.init_model(init_rng, len(np.unique(suite[0].train_ids)))
    frozen: mdl.FrozenOldHead | None = None
    store = ReplayStore()
    result = TrainResult(params, frozen, store, [], features_dir)

    for idx, task in enumerate(suite):
        t = idx + 1
        task_rng = np.random.Generator(np.random.PCG64(task_streams[idx]))
        if t >= 2:
            params, frozen = advance_to_task(
                params, task_rng, len(np.unique(task.train_ids)))
        start_hash = fnv1a64(frozen.content_bytes()) if frozen else None

        try:
            trace = train_task(params, frozen, store, task, cfg, weights, flags,
                               task_rng, step_callback)
        except NumericError as exc:
            raise NumericError(f"dataset {task.name}: {exc}") from exc
        result.loss_history.append(trace)
        if frozen is not None:
            result.frozen_hashes.append(
                (t, start_hash, fnv1a64(frozen.content_bytes())))

        # Gallery features are extracted by this task's model, once, forever.
        gallery_feats = mdl.infer_features(params, task.gallery_x, flags.cac)
        fs = featstore.FeatureSet(
            extractor_version=t, task=t, split="gallery",
            ids=task.gallery_ids.copy(), cams=task.gallery_cams.copy(),
            feats=gallery_feats)
        featstore.store_append(features_dir, fs)

        if t < len(suite):
            update_replay_store(store, params, task, cfg, flags.cac, task_rng)

        path = os.path.join(ckpt_dir, f"task_{t}.ckpt")
        mdl.checkpoint_save(params, frozen, path)
        result.checkpoint_paths.append(path)

    store.save(os.path.join(run_dir, "replay", "store.bin"))
    result.params, result.frozen, result.store = params, frozen, store
    return result


def merge_tasks(suite: list[TaskDataset]) -> TaskDataset:
    """Union of every task's training split, for the joint-training baseline."""
    return TaskDataset(
        name="joint",
        train_x=np.concatenate([t.train_x for t in suite]),
        train_ids=np.concatenate([t.train_ids for t in suite]),
        train_cams=np.concatenate([t.train_cams for t in suite]),
        query_x=np.concatenate([t.query_x for t in suite]),
        query_ids=np.concatenate([t.query_ids for t in suite]),
        query_cams=np.concatenate([t.query_cams for t in suite]),
        gallery_x=np.concatenate([t.gallery_x for t in suite]),
        gallery_ids=np.concatenate([t.gallery_ids for t in suite]),
        gallery_cams=np.concatenate([t.gallery_cams for t in suite]),
    )


def train_joint(suite: list[TaskDataset], cfg: TrainConfig, weights: LossWeights,
                run_dir: str) -> TrainResult:
    """Joint-training baseline: one merged task, base loss only, galleries
    extracted per source dataset by the single resulting model."""
    cfg.validate()
    weights.validate()
    _check_disjoint(suite)
    merged = merge_tasks(suite)
    flags = AblationFlags(cmcl=False, pcl=False, cac="off")

    ckpt_dir = os.path.join(run_dir, "checkpoints")
    features_dir = os.path.join(run_dir, "features")
    os.makedirs(ckpt_dir, exist_ok=True)
    os.makedirs(features_dir, exist_ok=True)

    ss = np.random.SeedSequence(cfg.seed)
    init_ss, task_ss = ss.spawn(2)
    init_rng = np.random.Generator(np.random.PCG64(init_ss))
    task_rng = np.random.Generator(np.random.PCG64(task_ss))

    params = mdl.init_model(init_rng, len(np.unique(merged.train_ids)))
    store = ReplayStore()
    result = TrainResult(params, None, store, [], features_dir)
    try:
        trace = train_task(params, None, store, merged, cfg, weights, flags, task_rng)
    except NumericError as exc:
        raise NumericError(f"dataset {merged.name}: {exc}") from exc
    result.loss_history.append(trace)

    for idx, task in enumerate(suite):
        fs = featstore.FeatureSet(
            extractor_version=1, task=idx + 1, split="gallery",
            ids=task.gallery_ids.copy(), cams=task.gallery_cams.copy(),
            feats=mdl.infer_features(params, task.gallery_x, flags.cac))
        featstore.store_append(features_dir, fs)

    path = os.path.join(ckpt_dir, "task_1.ckpt")
    mdl.checkpoint_save(params, None, path)
    result.checkpoint_paths.append(path)
    store.save(os.path.join(run_dir, "replay", "store.bin"))
    return result


def _check_disjoint(suite: list[TaskDataset]) -> None:
    seen: set[int] = set()
    for task in suite:
        ids = set(int(i) for i in np.unique(task.train_ids))
        if ids & seen:
            raise ConfigError(f"dataset {task.name} shares identities with earlier ones")
        seen |= ids
