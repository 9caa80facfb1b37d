"""Synthetic identity-retrieval benchmark: banded color images with domain shift.

Each identity is a 16-dim latent rendered as a 3x40x16 image of five
horizontal bands (8 rows each).  Band colors are fixed affine projections of
the latent, striped along columns; rows inside a band are identical before
noise, so spatial parts line up with bands.  A sequence of T datasets applies
per-dataset channel-mixing + offset (the domain gap) and per-camera
brightness/contrast jitter, then pixel noise, then clipping to [0, 1].

Identity numbers are globally unique across datasets and splits.  Per
dataset, evaluation identities are disjoint from training ones; their first
two images form the query split and the rest the gallery split, with cameras
assigned round-robin so every query has a cross-camera match.

Everything is driven by one integer seed through independent child RNG
streams, so regeneration is byte-identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .binio import bytes_to_floats, floats_to_bytes
from .errors import ConfigError, FormatError

IMAGE_SHAPE = (3, 40, 16)
N_BANDS = 5
LATENT_DIM = 16


@dataclass(frozen=True)
class GenConfig:
    """Knobs for the benchmark generator; defaults give the standard benchmark."""

    n_tasks: int = 4
    n_train_ids: int = 40
    n_eval_ids: int = 10
    imgs_per_id: int = 16
    n_cameras: int = 4
    noise_sigma: float = 0.03
    domain_shift: float = 0.35     # channel-mixing strength, dataset 1 is clean
    domain_offset: float = 0.15    # per-channel additive gap between datasets
    camera_jitter: float = 0.15    # contrast/brightness spread across cameras
    stripe_amp: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.n_tasks < 2:
            raise ConfigError("sequential benchmark needs at least two datasets")
        if self.n_train_ids < 1:
            raise ConfigError("identity counts must be positive")
        if self.n_eval_ids < 5:
            raise ConfigError("retrieval needs >= 5 evaluation identities per dataset")
        if self.imgs_per_id < 4:
            raise ConfigError("need >= 4 images per identity (2 queries + gallery)")
        if self.n_cameras < 2:
            raise ConfigError("cross-camera evaluation needs >= 2 cameras")
        if self.noise_sigma < 0 or self.camera_jitter < 0:
            raise ConfigError("noise and jitter must be non-negative")
        if not 0 <= self.domain_shift < 1:
            raise ConfigError("domain_shift must lie in [0, 1)")


@dataclass(frozen=True)
class DomainParams:
    mix: np.ndarray      # [3,3] channel mixing, |det| > 0.1
    offset: np.ndarray   # [3]


@dataclass(frozen=True)
class CameraParams:
    contrast: float
    brightness: float


@dataclass(frozen=True)
class Palette:
    """Identity-to-appearance mapping shared by every dataset in a benchmark."""

    base_colors: np.ndarray   # [N_BANDS, 3]
    color_proj: np.ndarray    # [N_BANDS, 3, LATENT_DIM]
    stripe_freq: np.ndarray   # [N_BANDS]
    phase_proj: np.ndarray    # [N_BANDS, LATENT_DIM]
    stripe_amp: float


@dataclass
class TaskDataset:
    name: str
    train_x: np.ndarray     # [N, 3, 40, 16]
    train_ids: np.ndarray   # [N] int64, globally unique across the benchmark
    train_cams: np.ndarray  # [N] int64
    query_x: np.ndarray
    query_ids: np.ndarray
    query_cams: np.ndarray
    gallery_x: np.ndarray
    gallery_ids: np.ndarray
    gallery_cams: np.ndarray


@dataclass
class Benchmark:
    config: GenConfig
    tasks: list[TaskDataset] = field(default_factory=list)


def render_image(latent: np.ndarray, palette: Palette, domain: DomainParams,
                 camera: CameraParams, rng: np.random.Generator,
                 sigma: float) -> np.ndarray:
    """Render one [3, 40, 16] image in [0, 1] for an identity latent."""
    c, h, w = IMAGE_SHAPE
    band_h = h // N_BANDS
    img = np.empty(IMAGE_SHAPE)
    cols = np.arange(w) / w
    for b in range(N_BANDS):
        color = palette.base_colors[b] + palette.color_proj[b] @ latent     # [3]
        phase = float(palette.phase_proj[b] @ latent)
        mod = 1.0 + palette.stripe_amp * np.cos(
            2.0 * np.pi * palette.stripe_freq[b] * cols + phase)            # [W]
        img[:, b * band_h:(b + 1) * band_h, :] = (color[:, None] * mod[None, :])[:, None, :]
    img = np.einsum("ck,khw->chw", domain.mix, img) + domain.offset[:, None, None]
    img = 0.5 + camera.contrast * (img - 0.5) + camera.brightness
    if sigma > 0:
        img = img + rng.normal(0.0, sigma, size=IMAGE_SHAPE)
    return np.clip(img, 0.0, 1.0)


def _make_palette(rng: np.random.Generator, stripe_amp: float) -> Palette:
    base = 0.25 + 0.5 * rng.random((N_BANDS, 3))
    proj = rng.normal(0.0, 0.25 / np.sqrt(LATENT_DIM), (N_BANDS, 3, LATENT_DIM))
    freq = rng.integers(1, 5, N_BANDS).astype(np.float64)
    phase = rng.normal(0.0, 1.0, (N_BANDS, LATENT_DIM))
    return Palette(base, proj, freq, phase, stripe_amp)


def _make_domain(rng: np.random.Generator, task_idx: int, cfg: GenConfig) -> DomainParams:
    if task_idx == 0:
        return DomainParams(np.eye(3), np.zeros(3))
    s = cfg.domain_shift
    while True:
        mixer = rng.random((3, 3))
        mixer /= mixer.sum(axis=1, keepdims=True)   # convex rows keep [0,1] range
        mix = (1.0 - s) * np.eye(3) + s * mixer
        if abs(np.linalg.det(mix)) > 0.1:
            break
    signs = rng.choice((-1.0, 1.0), 3)
    offset = cfg.domain_offset * signs * (0.5 + 0.5 * rng.random(3))
    return DomainParams(mix, offset)


def _make_cameras(rng: np.random.Generator, cfg: GenConfig) -> list[CameraParams]:
    cams = []
    for _ in range(cfg.n_cameras):
        contrast = 1.0 + cfg.camera_jitter * rng.uniform(-1.0, 1.0)
        brightness = cfg.camera_jitter * 0.6 * rng.uniform(-1.0, 1.0)
        cams.append(CameraParams(contrast, brightness))
    return cams


def _render_split(latents: np.ndarray, ids: np.ndarray, palette, domain, cameras,
                  imgs_per_id: int, rng, sigma: float):
    n = len(ids) * imgs_per_id
    xs = np.empty((n,) + IMAGE_SHAPE)
    out_ids = np.empty(n, dtype=np.int64)
    out_cams = np.empty(n, dtype=np.int64)
    row = 0
    for i, ident in enumerate(ids):
        for j in range(imgs_per_id):
            cam = j % len(cameras)
            xs[row] = render_image(latents[i], palette, domain, cameras[cam], rng, sigma)
            out_ids[row] = ident
            out_cams[row] = cam
            row += 1
    return xs, out_ids, out_cams


def gen_benchmark(cfg: GenConfig) -> Benchmark:
    """Generate the full T-dataset benchmark deterministically from cfg.seed."""
    cfg.validate()
    ss = np.random.SeedSequence(cfg.seed)
    palette_ss, ident_ss, domain_ss, camera_ss, image_ss = ss.spawn(5)
    palette = _make_palette(np.random.Generator(np.random.PCG64(palette_ss)), cfg.stripe_amp)
    ident_rng = np.random.Generator(np.random.PCG64(ident_ss))
    domain_rng = np.random.Generator(np.random.PCG64(domain_ss))
    camera_rng = np.random.Generator(np.random.PCG64(camera_ss))
    image_streams = image_ss.spawn(cfg.n_tasks)

    bench = Benchmark(cfg)
    next_id = 0
    for t in range(cfg.n_tasks):
        domain = _make_domain(domain_rng, t, cfg)
        cameras = _make_cameras(camera_rng, cfg)
        img_rng = np.random.Generator(np.random.PCG64(image_streams[t]))

        train_ids = np.arange(next_id, next_id + cfg.n_train_ids, dtype=np.int64)
        next_id += cfg.n_train_ids
        eval_ids = np.arange(next_id, next_id + cfg.n_eval_ids, dtype=np.int64)
        next_id += cfg.n_eval_ids
        train_lat = ident_rng.normal(0.0, 1.0, (cfg.n_train_ids, LATENT_DIM))
        eval_lat = ident_rng.normal(0.0, 1.0, (cfg.n_eval_ids, LATENT_DIM))

        tx, tids, tcams = _render_split(train_lat, train_ids, palette, domain,
                                        cameras, cfg.imgs_per_id, img_rng, cfg.noise_sigma)
        ex, eids, ecams = _render_split(eval_lat, eval_ids, palette, domain,
                                        cameras, cfg.imgs_per_id, img_rng, cfg.noise_sigma)
        # First two images of each eval identity are queries, the rest gallery.
        mask = np.zeros(len(eids), dtype=bool)
        for ident in eval_ids:
            mask[np.flatnonzero(eids == ident)[:2]] = True
        bench.tasks.append(TaskDataset(
            name=f"d{t + 1}",
            train_x=tx, train_ids=tids, train_cams=tcams,
            query_x=ex[mask], query_ids=eids[mask], query_cams=ecams[mask],
            gallery_x=ex[~mask], gallery_ids=eids[~mask], gallery_cams=ecams[~mask],
        ))
    return bench


# -- on-disk form -------------------------------------------------------------

_SPLITS = ("train", "query", "gallery")


def save_dataset(path: str, ds: TaskDataset) -> None:
    """Write one dataset as manifest.json plus per-split float64 blobs.

    The manifest stores every integer as a decimal string; image bytes go to
    ``{split}.f64`` files (little-endian float64, image-major row-major).
    """
    os.makedirs(path, exist_ok=True)
    manifest: dict = {
        "name": ds.name,
        "image_shape": [str(d) for d in IMAGE_SHAPE],
        "splits": {},
    }
    for split in _SPLITS:
        xs = getattr(ds, f"{split}_x")
        ids = getattr(ds, f"{split}_ids")
        cams = getattr(ds, f"{split}_cams")
        manifest["splits"][split] = {
            "count": str(len(ids)),
            "ids": [str(int(i)) for i in ids],
            "cams": [str(int(c)) for c in cams],
        }
        with open(os.path.join(path, f"{split}.f64"), "wb") as fh:
            fh.write(floats_to_bytes(xs))
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _parse_int(text) -> int:
    if not isinstance(text, str) or not text.isdigit():
        raise FormatError(f"expected a decimal integer string, got {text!r}")
    return int(text)


def load_dataset(path: str) -> TaskDataset:
    """Read a dataset directory back; validates counts, shapes, and pixel range."""
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from exc
    try:
        shape = tuple(_parse_int(d) for d in manifest["image_shape"])
        splits = manifest["splits"]
        name = manifest["name"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"manifest missing field: {exc}") from exc
    if shape != IMAGE_SHAPE:
        raise FormatError(f"unsupported image shape {shape}")

    parts = {}
    for split in _SPLITS:
        if split not in splits:
            raise FormatError(f"manifest missing split {split!r}")
        entry = splits[split]
        count = _parse_int(entry["count"])
        ids = np.array([_parse_int(s) for s in entry["ids"]], dtype=np.int64)
        cams = np.array([_parse_int(s) for s in entry["cams"]], dtype=np.int64)
        if len(ids) != count or len(cams) != count:
            raise FormatError(f"{split}: count does not match id/camera columns")
        try:
            with open(os.path.join(path, f"{split}.f64"), "rb") as fh:
                payload = fh.read()
        except OSError as exc:
            raise FormatError(f"cannot read {split}.f64: {exc}") from exc
        try:
            xs = bytes_to_floats(payload, (count,) + shape)
        except FormatError as exc:
            raise FormatError(f"{split}.f64: {exc}") from exc
        if count and not np.isfinite(xs).all():
            raise FormatError(f"{split}: non-finite pixel values")
        if count and (xs.min() < 0.0 or xs.max() > 1.0):
            raise FormatError(f"{split}: pixel values outside [0, 1]")
        parts[split] = (xs, ids, cams)
    return TaskDataset(
        name=name,
        train_x=parts["train"][0], train_ids=parts["train"][1], train_cams=parts["train"][2],
        query_x=parts["query"][0], query_ids=parts["query"][1], query_cams=parts["query"][2],
        gallery_x=parts["gallery"][0], gallery_ids=parts["gallery"][1],
        gallery_cams=parts["gallery"][2],
    )


def save_benchmark(root: str, bench: Benchmark) -> None:
    os.makedirs(root, exist_ok=True)
    for ds in bench.tasks:
        save_dataset(os.path.join(root, ds.name), ds)
    meta = {"n_tasks": str(len(bench.tasks)), "seed": str(bench.config.seed)}
    with open(os.path.join(root, "benchmark.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_benchmark(root: str) -> list[TaskDataset]:
    mpath = os.path.join(root, "benchmark.json")
    try:
        with open(mpath) as fh:
            meta = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read benchmark manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"benchmark manifest is not valid JSON: {exc}") from exc
    n = _parse_int(meta["n_tasks"])
    return [load_dataset(os.path.join(root, f"d{t + 1}")) for t in range(n)]
