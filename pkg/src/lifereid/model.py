"""The retrieval model: conv encoder, channel attention, pooling branches, heads.

Layout per forward pass (batch ``[B, 3, 40, 16]``):

* encoder: three 3x3 convolutions (3->16 stride 1, 16->32 stride 2, 32->32
  stride 1, all pad 1, ReLU after each, no biases) -> map ``[B, 32, 20, 8]``.
* two channel-attention encoders (``attn_new``, ``attn_old``), each
  ``sigmoid(relu(gap(map) @ W1) @ W2)`` -> per-sample masks in (0, 1).
* global branch: map times a consolidated mask (product or mean of the two
  attention masks; just ``attn_new``'s on the first task), GeM-pooled to a
  32-vector, plus its L2-normalized form used for retrieval.
* part branches: map times one attention mask, five horizontal slabs of
  height 4, each GeM-pooled; a shared part head classifies slab index.
* identity head: per-task linear classifier on the raw global feature.

The previous task's part head rides along as :class:`FrozenOldHead`:
gradients flow through it into the features, never into its weights.

Checkpoints are a single binary file: magic, format version, task index, a
named tensor table, and a trailing FNV-1a 64 checksum of everything before it.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .binio import bytes_to_floats, floats_to_bytes, fnv1a64, read_u64, write_u64
from .errors import ConfigError, DimensionError, FormatError, IntegrityError

N_PARTS = 5
FEAT_DIM = 32
INPUT_SHAPE = (3, 40, 16)
MAP_SHAPE = (32, 20, 8)
GEM_P = 3.0
GEM_EPS = 1e-6

_CONV_SHAPES = {
    "conv1": (16, 3, 3, 3),
    "conv2": (32, 16, 3, 3),
    "conv3": (32, 32, 3, 3),
}
_ATTN_SHAPES = {"w1": (32, 8), "w2": (8, 32)}


@dataclass
class ModelParams:
    conv1: Tensor
    conv2: Tensor
    conv3: Tensor
    attn_new_w1: Tensor
    attn_new_w2: Tensor
    attn_old_w1: Tensor | None
    attn_old_w2: Tensor | None
    id_head: Tensor
    part_head: Tensor
    task_index: int

    def trainable(self) -> list[tuple[str, Tensor]]:
        """Name/tensor pairs updated by the optimizer, in a fixed order."""
        out = [("conv1", self.conv1), ("conv2", self.conv2), ("conv3", self.conv3),
               ("attn_new_w1", self.attn_new_w1), ("attn_new_w2", self.attn_new_w2)]
        if self.attn_old_w1 is not None:
            out += [("attn_old_w1", self.attn_old_w1), ("attn_old_w2", self.attn_old_w2)]
        out += [("id_head", self.id_head), ("part_head", self.part_head)]
        return out


@dataclass
class FrozenOldHead:
    """Previous task's part head; weights never receive gradient updates."""

    weights: Tensor  # [32, N_PARTS], requires_grad stays False

    def content_bytes(self) -> bytes:
        return floats_to_bytes(self.weights.data)


def init_model(rng: np.random.Generator, n_classes: int, task_index: int = 1) -> ModelParams:
    """Fresh model with He-scaled weights (fan-in based; invented plumbing)."""
    if n_classes < 2:
        raise ConfigError("identity head needs at least two classes")

    def conv(shape):
        fan_in = shape[1] * shape[2] * shape[3]
        return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape), requires_grad=True)

    def dense(shape):
        return Tensor(rng.normal(0.0, np.sqrt(1.0 / shape[0]), shape), requires_grad=True)

    return ModelParams(
        conv1=conv(_CONV_SHAPES["conv1"]),
        conv2=conv(_CONV_SHAPES["conv2"]),
        conv3=conv(_CONV_SHAPES["conv3"]),
        attn_new_w1=dense(_ATTN_SHAPES["w1"]),
        attn_new_w2=dense(_ATTN_SHAPES["w2"]),
        attn_old_w1=None,
        attn_old_w2=None,
        id_head=dense((FEAT_DIM, n_classes)),
        part_head=dense((FEAT_DIM, N_PARTS)),
        task_index=task_index,
    )


def encoder_forward(params: ModelParams, batch: Tensor) -> Tensor:
    """[B, 3, 40, 16] -> spatial map [B, 32, 20, 8]."""
    if batch.data.ndim != 4 or batch.data.shape[1:] != INPUT_SHAPE:
        raise DimensionError(f"encoder expects [B, 3, 40, 16], got {batch.data.shape}")
    h1 = ad.conv2d(batch, params.conv1, stride=1, pad=1).relu()
    h2 = ad.conv2d(h1, params.conv2, stride=2, pad=1).relu()
    return ad.conv2d(h2, params.conv3, stride=1, pad=1).relu()


def attention_mask(w1: Tensor, w2: Tensor, spatial_map: Tensor) -> Tensor:
    """Per-sample channel mask in (0, 1): sigmoid(relu(gap @ W1) @ W2)."""
    if spatial_map.data.ndim != 4 or spatial_map.data.shape[1] != FEAT_DIM:
        raise DimensionError("attention expects a [B, 32, H, W] map")
    gap = spatial_map.mean(axis=(2, 3))          # [B, 32]
    return ((gap @ w1).relu() @ w2).sigmoid()


def consolidate_masks(m_old: Tensor, m_new: Tensor, mode: str) -> Tensor:
    if m_old.data.shape != m_new.data.shape:
        raise DimensionError("mask shapes differ")
    if mode == "multiply":
        return m_old * m_new
    if mode == "average":
        return (m_old + m_new) * 0.5
    raise ConfigError(f"unknown consolidation mode {mode!r}")


def _apply_mask(spatial_map: Tensor, mask: Tensor | None) -> Tensor:
    if mask is None:
        return spatial_map
    bsz, ch = mask.data.shape
    if spatial_map.data.shape[0] != bsz or spatial_map.data.shape[1] != ch:
        raise DimensionError("mask does not match map batch/channels")
    return spatial_map * mask.reshape(bsz, ch, 1, 1)


def global_feature(spatial_map: Tensor, mask: Tensor | None) -> tuple[Tensor, Tensor]:
    """(raw, normalized) GeM feature of the (optionally masked) map."""
    raw = ad.gem_pool(_apply_mask(spatial_map, mask), p=GEM_P, eps=GEM_EPS)
    return raw, ad.l2_normalize(raw)


def part_features(spatial_map: Tensor, mask: Tensor | None, n: int = N_PARTS) -> list[Tensor]:
    """Mask the map, split rows into n slabs (part 0 on top), GeM-pool each."""
    height = spatial_map.data.shape[2]
    if height % n != 0:
        raise DimensionError(f"map height {height} not divisible into {n} parts")
    masked = _apply_mask(spatial_map, mask)
    slab_h = height // n
    return [ad.gem_pool(masked.narrow(2, i * slab_h, slab_h), p=GEM_P, eps=GEM_EPS)
            for i in range(n)]


def classify_identity(id_head: Tensor, feat: Tensor) -> Tensor:
    if feat.data.ndim != 2 or feat.data.shape[1] != id_head.data.shape[0]:
        raise DimensionError("feature/head dimension mismatch")
    return feat @ id_head


def classify_parts(part_head: Tensor, part_feats: list[Tensor]) -> list[Tensor]:
    """Per part n: logits [B, N]; the target class for entry n is n."""
    if len(part_feats) != part_head.data.shape[1]:
        raise DimensionError("part count does not match part head width")
    return [f @ part_head for f in part_feats]


@dataclass
class ForwardOutputs:
    spatial_map: Tensor
    m_new: Tensor | None
    m_old: Tensor | None
    m_cac: Tensor | None
    global_raw: Tensor
    global_norm: Tensor
    new_parts: list[Tensor] | None
    old_parts: list[Tensor] | None


def forward_train(params: ModelParams, batch: Tensor, *, use_pcl: bool,
                  cac_mode: str) -> ForwardOutputs:
    """One training forward pass producing every branch the losses need.

    ``cac_mode`` is ``off`` (unmasked global branch), ``multiply``, or
    ``average``.  Attention masks are computed only when some branch uses
    them; the old branch exists once ``attn_old`` parameters do (task >= 2).
    """
    spatial_map = encoder_forward(params, batch)
    need_attn = use_pcl or cac_mode != "off"
    m_new = m_old = m_cac = None
    if need_attn:
        m_new = attention_mask(params.attn_new_w1, params.attn_new_w2, spatial_map)
        if params.attn_old_w1 is not None:
            m_old = attention_mask(params.attn_old_w1, params.attn_old_w2, spatial_map)
    if cac_mode != "off":
        m_cac = m_new if m_old is None else consolidate_masks(m_old, m_new, cac_mode)
    raw, norm = global_feature(spatial_map, m_cac)
    new_parts = old_parts = None
    if use_pcl:
        new_parts = part_features(spatial_map, m_new)
        if m_old is not None:
            old_parts = part_features(spatial_map, m_old)
    return ForwardOutputs(spatial_map, m_new, m_old, m_cac, raw, norm, new_parts, old_parts)


def infer_features(params: ModelParams, images: np.ndarray, cac_mode: str = "multiply",
                   batch_size: int = 64) -> np.ndarray:
    """Normalized retrieval features for ``[N, 3, 40, 16]`` images (no graph).

    The inference path is encoder -> attention masks -> consolidated mask
    (per ``cac_mode``; plain GeM when ``off``) -> normalized global feature.
    Heads are never involved.
    """
    if images.ndim != 4 or images.shape[1:] != INPUT_SHAPE:
        raise DimensionError(f"expected [N, 3, 40, 16], got {images.shape}")
    out = np.empty((images.shape[0], FEAT_DIM))
    for lo in range(0, images.shape[0], batch_size):
        chunk = Tensor(images[lo:lo + batch_size])
        res = forward_train(params, chunk, use_pcl=False, cac_mode=cac_mode)
        out[lo:lo + chunk.data.shape[0]] = res.global_norm.data
    return out


# -- checkpoint format --------------------------------------------------------

_MAGIC = b"LRID"
_VERSION = 1


def _required_shape(name: str, z_cols: int | None) -> tuple | None:
    if name in _CONV_SHAPES:
        return _CONV_SHAPES[name]
    if name.endswith("w1"):
        return _ATTN_SHAPES["w1"]
    if name.endswith("w2"):
        return _ATTN_SHAPES["w2"]
    if name in ("part_head", "frozen_old_head"):
        return (FEAT_DIM, N_PARTS)
    if name == "id_head":
        return None if z_cols is None else (FEAT_DIM, z_cols)
    return None


def checkpoint_save(params: ModelParams, frozen: FrozenOldHead | None, path: str) -> None:
    """Serialize the model (and old head, if any) with a trailing checksum."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(write_u64(_VERSION))
    buf.write(write_u64(params.task_index))
    entries = list(params.trainable())
    if frozen is not None:
        entries.append(("frozen_old_head", frozen.weights))
    buf.write(write_u64(len(entries)))
    for name, tensor in entries:
        raw = name.encode("utf-8")
        buf.write(write_u64(len(raw)))
        buf.write(raw)
        buf.write(write_u64(tensor.data.ndim))
        for d in tensor.data.shape:
            buf.write(write_u64(d))
        buf.write(floats_to_bytes(tensor.data))
    body = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(write_u64(fnv1a64(body)))


def checkpoint_load(path: str) -> tuple[ModelParams, FrozenOldHead | None]:
    """Bit-exact inverse of :func:`checkpoint_save`, with full validation."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC) + 32 or blob[:len(_MAGIC)] != _MAGIC:
        raise FormatError("not a checkpoint file")
    body, tail = blob[:-8], blob[-8:]
    off = len(_MAGIC)
    version, off = read_u64(body, off)
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    task_index, off = read_u64(body, off)
    count, off = read_u64(body, off)
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, off = read_u64(body, off)
        if off + name_len > len(body):
            raise FormatError("truncated tensor name")
        name = body[off:off + name_len].decode("utf-8")
        off += name_len
        ndim, off = read_u64(body, off)
        shape = []
        for _ in range(ndim):
            d, off = read_u64(body, off)
            shape.append(d)
        shape = tuple(shape)
        nbytes = math.prod(shape) * 8
        if off + nbytes > len(body):
            raise FormatError("truncated tensor payload")
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}")
        tensors[name] = bytes_to_floats(body[off:off + nbytes], shape)
        off += nbytes
    if off != len(body):
        raise FormatError("trailing bytes after tensor table")
    if fnv1a64(body) != int.from_bytes(tail, "little"):
        raise IntegrityError("checkpoint checksum mismatch")

    required = ["conv1", "conv2", "conv3", "attn_new_w1", "attn_new_w2",
                "id_head", "part_head"]
    for name in required:
        if name not in tensors:
            raise FormatError(f"checkpoint missing tensor {name!r}")
    for name, arr in tensors.items():
        want = _required_shape(name, None)
        if want is not None and arr.shape != want:
            raise FormatError(f"tensor {name!r} has shape {arr.shape}, expected {want}")
    if tensors["id_head"].ndim != 2 or tensors["id_head"].shape[0] != FEAT_DIM:
        raise FormatError("id_head has the wrong row count")
    has_old = "attn_old_w1" in tensors
    if has_old != ("attn_old_w2" in tensors):
        raise FormatError("attention pair incomplete")

    params = ModelParams(
        conv1=Tensor(tensors["conv1"], requires_grad=True),
        conv2=Tensor(tensors["conv2"], requires_grad=True),
        conv3=Tensor(tensors["conv3"], requires_grad=True),
        attn_new_w1=Tensor(tensors["attn_new_w1"], requires_grad=True),
        attn_new_w2=Tensor(tensors["attn_new_w2"], requires_grad=True),
        attn_old_w1=Tensor(tensors["attn_old_w1"], requires_grad=True) if has_old else None,
        attn_old_w2=Tensor(tensors["attn_old_w2"], requires_grad=True) if has_old else None,
        id_head=Tensor(tensors["id_head"], requires_grad=True),
        part_head=Tensor(tensors["part_head"], requires_grad=True),
        task_index=task_index,
    )
    frozen = None
    if "frozen_old_head" in tensors:
        frozen = FrozenOldHead(Tensor(tensors["frozen_old_head"]))
    return params, frozen
