"""Tiny anchor-free grid detector: shared conv base plus per-cell heads.

Head channel layout per cell: ``[class logits (C) | objectness | dx dy dw dh]``.
Offsets are relative to the cell: centre shift in cell units, size as the
log of the box side over the cell side.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .metrics import iou
from .scenes import BoxLabel

CELL = 8
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
SMOOTH_L1_DELTA = 1.0
PRIOR_PROB = 0.01
LOG_SIZE_MAX = math.log(16.0)

CK_MAGIC = b"TRKPCK1\0"
CK_VERSION = "trkp-detector/1"


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[int, int, int] = (8, 16, 32)
    kernels: tuple[int, int, int] = (5, 5, 3)
    hidden: int = 32
    num_classes: int = 3

    @property
    def depth(self) -> int:
        return self.channels[-1]


class Module:
    """Ordered bag of named parameter tensors."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(prefix + k, v) for k, v in self.params.items()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ShapeError(f"{k}: checkpoint shape {arr.shape} vs model {t.shape}")
            t.data = arr.astype(t.dtype).copy()


class BaseNet(Module):
    """Three stride-2 conv layers: (H, W, 1) -> (H/8, W/8, D)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        cin = 1
        for i, (cout, k) in enumerate(zip(cfg.channels, cfg.kernels)):
            std = math.sqrt(2.0 / (k * k * cin))
            self.params[f"conv{i}.w"] = ad.parameter(rng.normal(0, std, (k, k, cin, cout)), dtype)
            self.params[f"conv{i}.b"] = ad.parameter(np.zeros(cout), dtype)
            cin = cout

    def __call__(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images), dtype=self.dtype)
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[3] != 1 or x.shape[1] % CELL or x.shape[2] % CELL:
            raise ShapeError(f"base network expects (N, H, W, 1) with H, W multiples of {CELL}, got {x.shape}")
        for i, k in enumerate(self.cfg.kernels):
            x = ad.relu(ad.conv2d(x, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"],
                                  stride=2, padding=k // 2))
        return x

    @property
    def dtype(self):
        return self.params["conv0.w"].dtype


class DetHead(Module):
    """Per-cell two-layer affine stack producing C + 5 channels."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        d, hdim, out = cfg.depth, cfg.hidden, cfg.num_classes + 5
        self.params["fc0.w"] = ad.parameter(rng.normal(0, math.sqrt(2.0 / d), (d, hdim)), dtype)
        self.params["fc0.b"] = ad.parameter(np.zeros(hdim), dtype)
        self.params["fc1.w"] = ad.parameter(rng.normal(0, 0.01, (hdim, out)), dtype)
        b = np.zeros(out)
        b[cfg.num_classes] = -math.log((1 - PRIOR_PROB) / PRIOR_PROB)
        self.params["fc1.b"] = ad.parameter(b, dtype)

    def __call__(self, feats: Tensor) -> Tensor:
        h = ad.relu(ad.affine(feats, self.params["fc0.w"], self.params["fc0.b"]))
        return ad.affine(h, self.params["fc1.w"], self.params["fc1.b"])


# ---------------------------------------------------------------------------
# target encoding


@dataclass
class GridTargets:
    """Dense per-cell training targets for a batch."""

    positive: np.ndarray   # (N, G, G) bool
    labels: np.ndarray     # (N, G, G) int, 0 where negative
    offsets: np.ndarray    # (N, G, G, 4)

    def __len__(self):
        return self.positive.shape[0]

    def subset(self, idx) -> "GridTargets":
        return GridTargets(self.positive[idx], self.labels[idx], self.offsets[idx])

    @staticmethod
    def concat(parts: Sequence["GridTargets"]) -> "GridTargets":
        return GridTargets(np.concatenate([p.positive for p in parts]),
                           np.concatenate([p.labels for p in parts]),
                           np.concatenate([p.offsets for p in parts]))


def cell_of(x: float, y: float, grid_h: int, grid_w: int) -> tuple[int, int]:
    return (min(int(y // CELL), grid_h - 1), min(int(x // CELL), grid_w - 1))


def encode_box(box: BoxLabel, row: int, col: int) -> np.ndarray:
    cx, cy = box.center
    return np.array([(cx - (col + 0.5) * CELL) / CELL,
                     (cy - (row + 0.5) * CELL) / CELL,
                     math.log((box.x_max - box.x_min) / CELL),
                     math.log((box.y_max - box.y_min) / CELL)])


def decode_offsets(off: np.ndarray, row, col, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`encode_box`, clamped into the image; returns (..., 4)."""
    off = np.asarray(off, dtype=np.float64)
    cx = np.clip((col + 0.5 + off[..., 0]) * CELL, 0, width)
    cy = np.clip((row + 0.5 + off[..., 1]) * CELL, 0, height)
    bw = CELL * np.exp(np.clip(off[..., 2], -LOG_SIZE_MAX, LOG_SIZE_MAX))
    bh = CELL * np.exp(np.clip(off[..., 3], -LOG_SIZE_MAX, LOG_SIZE_MAX))
    return np.stack([np.clip(cx - bw / 2, 0, width), np.clip(cy - bh / 2, 0, height),
                     np.clip(cx + bw / 2, 0, width), np.clip(cy + bh / 2, 0, height)], axis=-1)


def encode_targets(boxes_per_image: Sequence[Sequence[BoxLabel]], height: int = 64,
                   width: int = 64) -> GridTargets:
    """Centre-in-cell assignment; clashes go to the smaller class id, then smaller area."""
    gh, gw = height // CELL, width // CELL
    n = len(boxes_per_image)
    pos = np.zeros((n, gh, gw), dtype=bool)
    labels = np.zeros((n, gh, gw), dtype=np.int64)
    offsets = np.zeros((n, gh, gw, 4))
    for i, boxes in enumerate(boxes_per_image):
        owner: dict[tuple[int, int], BoxLabel] = {}
        for b in boxes:
            if b.x_min < 0 or b.y_min < 0 or b.x_max > width or b.y_max > height:
                raise ValueError(f"box {b} lies outside the {width}x{height} image")
            cell = cell_of(*b.center, gh, gw)
            cur = owner.get(cell)
            if cur is None or (b.class_id, b.area) < (cur.class_id, cur.area):
                owner[cell] = b
        for (r, c), b in owner.items():
            pos[i, r, c] = True
            labels[i, r, c] = b.class_id
            offsets[i, r, c] = encode_box(b, r, c)
    return GridTargets(pos, labels, offsets)


# ---------------------------------------------------------------------------
# loss


@dataclass
class LossBreakdown:
    """Per-image loss vectors (shape (N,)); ``total = cls + reg``."""

    cls: Tensor
    reg: Tensor
    total: Tensor

    def values(self) -> dict[str, np.ndarray]:
        return {"cls": self.cls.data, "reg": self.reg.data, "total": self.total.data}


def detection_loss(head_out: Tensor, targets, height: int | None = None,
                   width: int | None = None) -> LossBreakdown:
    """Focal objectness/class loss plus smooth-L1 box loss, per image.

    ``targets`` is a :class:`GridTargets` or a list (one per image) of
    :class:`BoxLabel` lists.  Both terms are normalised by the image's
    positive-cell count (at least 1).
    """
    if head_out.ndim == 3:
        head_out = ad.reshape(head_out, (1,) + head_out.shape)
    n, gh, gw, ch = head_out.shape
    c = ch - 5
    if not isinstance(targets, GridTargets):
        if targets and isinstance(targets[0], BoxLabel):
            targets = [targets]
        targets = encode_targets(targets, height or gh * CELL, width or gw * CELL)
    if targets.positive.shape != (n, gh, gw):
        raise ShapeError(f"targets for {targets.positive.shape} vs head output {head_out.shape}")
    dt = head_out.dtype
    pos = targets.positive.astype(dt)
    norm = 1.0 / np.maximum(targets.positive.sum(axis=(1, 2)), 1).astype(dt)

    obj = ad.sigmoid_focal(head_out[..., c], pos, FOCAL_ALPHA, FOCAL_GAMMA)
    cls_el = ad.softmax_focal(head_out[..., :c], targets.labels, FOCAL_ALPHA, FOCAL_GAMMA)
    cls_sum = ad.tensor_sum(obj + cls_el * pos, axis=(1, 2))
    cls = cls_sum * Tensor(norm)

    reg_el = ad.smooth_l1(head_out[..., c + 1:], targets.offsets.astype(dt), SMOOTH_L1_DELTA)
    mask4 = np.broadcast_to(pos[..., None], reg_el.shape).astype(dt)
    reg = ad.tensor_sum(reg_el * mask4, axis=(1, 2, 3)) * Tensor(norm)
    return LossBreakdown(cls, reg, cls + reg)


# ---------------------------------------------------------------------------
# decoding and suppression


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    score: float
    cell: int = -1

    def as_label(self) -> BoxLabel:
        return BoxLabel(*self.box, self.class_id)


def _np_sigmoid(z):
    return 0.5 * (np.tanh(0.5 * np.asarray(z, dtype=np.float64)) + 1)


def _np_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cell_scores(out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell (score, class) for a (G, G, C+5) output."""
    c = out.shape[-1] - 5
    probs = _np_softmax(out[..., :c])
    cls = probs.argmax(axis=-1)
    score = _np_sigmoid(out[..., c]) * probs.max(axis=-1)
    return score, cls


def decode(head_out, score_threshold: float = 0.7) -> list[Detection]:
    """One candidate per cell whose score reaches ``score_threshold``."""
    out = head_out.data if isinstance(head_out, Tensor) else np.asarray(head_out)
    if out.ndim == 4:
        if out.shape[0] != 1:
            raise ShapeError("decode takes one image; iterate over the batch")
        out = out[0]
    gh, gw, ch = out.shape
    c = ch - 5
    score, cls = cell_scores(out)
    rows, cols = np.mgrid[0:gh, 0:gw]
    boxes = decode_offsets(out[..., c + 1:], rows, cols, gh * CELL, gw * CELL)
    dets = []
    for idx in np.flatnonzero(score.reshape(-1) >= score_threshold):
        r, col = divmod(int(idx), gw)
        dets.append(Detection(tuple(float(v) for v in boxes[r, col]), int(cls[r, col]),
                              float(score[r, col]), int(idx)))
    return dets


def nms(detections: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy same-class suppression; ties in score go to the lower cell index."""
    order = sorted(detections, key=lambda d: (-d.score, d.cell))
    kept: list[Detection] = []
    for d in order:
        if all(k.class_id != d.class_id or iou(k.box, d.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: str = "") -> None:
    version = f"{CK_VERSION};{meta}".encode("utf-8")
    out = bytearray(CK_MAGIC)
    out += struct.pack("<H", len(version)) + version
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        key = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    raw = Path(path).read_bytes()
    if raw[:8] != CK_MAGIC:
        raise CheckpointError(f"{path}: magic check failed")
    try:
        pos = 8
        (vlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        version = raw[pos:pos + vlen].decode("utf-8")
        pos += vlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + klen].decode("utf-8")
            pos += klen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if len(raw) < pos + 4 * size:
                raise CheckpointError(f"{path}: tensor {name} truncated")
            tensors[name] = np.frombuffer(raw, "<f4", size, pos).astype(np.float32).reshape(shape)
            pos += 4 * size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header ({exc})") from None
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return tensors, version
