"""Procedural multi-domain detection scenes and their binary container.

Each domain is a parametric appearance shift (background level, sensor
noise, object scale, class prior).  A target domain is a mixture of source
domains, so the relevance of every source to the target is known by
construction.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DS_MAGIC = b"TRKPDS1\0"
OBJECT_LEVEL = 0.9
BASE_SIZE = (10.0, 18.0)
SHAPES = ("square", "circle", "triangle")


class DatasetFormatError(ValueError):
    """Base class for dataset container parse failures."""


class BadMagicError(DatasetFormatError):
    pass


class TruncatedError(DatasetFormatError):
    pass


class LengthMismatchError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class BoxLabel:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))


@dataclass
class Scene:
    image: np.ndarray          # (H, W, 1) float32 in [0, 1]
    boxes: list[BoxLabel]

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.image.dtype == other.image.dtype
                and self.image.shape == other.image.shape
                and self.image.tobytes() == other.image.tobytes()
                and self.boxes == other.boxes)


@dataclass(frozen=True)
class DomainSpec:
    domain_id: str
    intensity_offset: float = 0.0
    noise_sigma: float = 0.0
    scale_factor: float = 1.0
    class_prior: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    seed: int = 0
    max_objects: int = 4

    def __post_init__(self):
        object.__setattr__(self, "class_prior", tuple(float(p) for p in self.class_prior))
        if not -0.5 <= self.intensity_offset <= 0.5:
            raise ValueError("intensity_offset must lie in [-0.5, 0.5]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.5 <= self.scale_factor <= 2.0:
            raise ValueError("scale_factor must lie in [0.5, 2.0]")
        if len(self.class_prior) not in (2, 3):
            raise ValueError("class_prior must cover 2 or 3 classes")
        if any(p < 0 for p in self.class_prior) or abs(sum(self.class_prior) - 1) > 1e-9:
            raise ValueError("class_prior must be a probability vector")
        if not 1 <= self.max_objects <= 8:
            raise ValueError("max_objects must lie in [1, 8]")

    @property
    def num_classes(self) -> int:
        return len(self.class_prior)


@dataclass(frozen=True)
class MixtureSpec:
    """Target domain whose scenes each borrow one component's parameters."""

    domain_id: str
    components: tuple[DomainSpec, ...]
    weights: tuple[float, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.components) != len(self.weights) or not self.components:
            raise ValueError("one weight per mixture component required")
        if any(w < 0 for w in self.weights) or abs(sum(self.weights) - 1) > 1e-9:
            raise ValueError("mixture weights must be a probability vector")
        if len({c.num_classes for c in self.components}) != 1:
            raise ValueError("mixture components disagree on class count")

    @property
    def num_classes(self) -> int:
        return self.components[0].num_classes


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Independent substream for one scene, so generation order never matters."""
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, index])


def _shape_mask(kind: str, x0: float, y0: float, s: float, h: int, w: int) -> np.ndarray:
    ys = np.arange(h)[:, None] + 0.5
    xs = np.arange(w)[None, :] + 0.5
    if kind == "square":
        return (xs >= x0) & (xs <= x0 + s) & (ys >= y0) & (ys <= y0 + s)
    if kind == "circle":
        r = s / 2
        return (xs - x0 - r) ** 2 + (ys - y0 - r) ** 2 <= r * r
    # upward isosceles triangle inscribed in the s x s square
    depth = ys - y0
    half = depth / 2
    cx = x0 + s / 2
    return (depth >= 0) & (depth <= s) & (np.abs(xs - cx) <= half)


def _render(params: DomainSpec, rng: np.random.Generator, h: int, w: int):
    bg = 0.5 + params.intensity_offset
    img = np.full((h, w), bg, dtype=np.float64)
    n_obj = int(rng.integers(1, params.max_objects + 1))
    boxes: list[BoxLabel] = []
    taken: list[tuple[int, int, int, int]] = []
    for _ in range(n_obj):
        cls = int(rng.choice(params.num_classes, p=params.class_prior))
        size = float(rng.uniform(*BASE_SIZE)) * params.scale_factor
        size = min(max(size, 4.0), min(h, w) - 2.0)
        for _attempt in range(50):
            x0 = float(rng.uniform(0.5, w - size - 0.5))
            y0 = float(rng.uniform(0.5, h - size - 0.5))
            mask = _shape_mask(SHAPES[cls], x0, y0, size, h, w)
            rows = np.flatnonzero(mask.any(axis=1))
            cols = np.flatnonzero(mask.any(axis=0))
            if rows.size == 0:
                continue
            ext = (int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)
            # one pixel of clearance keeps every object's mask separable
            if any(ext[0] - 1 < t[2] and t[0] - 1 < ext[2] and ext[1] - 1 < t[3] and t[1] - 1 < ext[3]
                   for t in taken):
                continue
            taken.append(ext)
            img[mask] = OBJECT_LEVEL
            boxes.append(BoxLabel(float(ext[0]), float(ext[1]), float(ext[2]), float(ext[3]), cls))
            break
    if params.noise_sigma > 0:
        img = img + rng.normal(0.0, params.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return img.astype(np.float32)[:, :, None], boxes


def _scene_params(spec, rng: np.random.Generator) -> tuple[DomainSpec, int]:
    if isinstance(spec, MixtureSpec):
        k = int(rng.choice(len(spec.components), p=spec.weights))
        return spec.components[k], k
    return spec, 0


def mixture_assignments(spec: MixtureSpec, n: int) -> np.ndarray:
    """Component index drawn for each of the first ``n`` scenes of ``spec``."""
    return np.array([_scene_params(spec, scene_rng(spec.seed, i))[1] for i in range(n)])


def synthesize_scene(spec, index: int, height: int = 64, width: int = 64) -> Scene:
    rng = scene_rng(spec.seed, index)
    params, _ = _scene_params(spec, rng)
    for _ in range(100):
        img, boxes = _render(params, rng, height, width)
        if boxes:
            return Scene(img, boxes)
    raise RuntimeError(f"could not place any object in scene {index} of {spec.domain_id}")


def synthesize_domain(spec, n: int, height: int = 64, width: int = 64) -> list[Scene]:
    """Generate ``n`` labelled scenes for a :class:`DomainSpec` or :class:`MixtureSpec`."""
    if n <= 0:
        raise ValueError(f"scene count must be positive, got {n}")
    if height % 8 or width % 8:
        raise ValueError("image sides must be multiples of 8")
    return [synthesize_scene(spec, i, height, width) for i in range(n)]


def tri_source_preset(seed: int = 0, num_classes: int = 3,
                      target_weights: Sequence[float] = (0.8, 0.1, 0.1)):
    """Three sources (S1 near the target, S2/S3 far) plus a mixture target."""
    prior = tuple([1 / num_classes] * num_classes)
    s1 = DomainSpec("S1", -0.2, 0.03, 1.0, prior, seed * 1000 + 1)
    s2 = DomainSpec("S2", 0.3, 0.10, 1.5, prior, seed * 1000 + 2)
    s3 = DomainSpec("S3", -0.4, 0.15, 0.6, prior, seed * 1000 + 3)
    target = MixtureSpec("T", (s1, s2, s3), tuple(target_weights), seed * 1000 + 9)
    return [s1, s2, s3], target


# ---------------------------------------------------------------------------
# binary container

_BOX = struct.Struct("<ddddi")


def write_dataset(scenes: Sequence[Scene], path, domain_id: str = "", num_classes: int = 3) -> None:
    if not scenes:
        raise ValueError("cannot write an empty dataset")
    h, w = scenes[0].image.shape[:2]
    ident = domain_id.encode("utf-8")
    out = bytearray(DS_MAGIC)
    out += struct.pack("<IIIIH", h, w, len(scenes), num_classes, len(ident))
    out += ident
    for sc in scenes:
        if sc.image.shape != (h, w, 1):
            raise ValueError("all scenes must share one image shape")
        out += np.ascontiguousarray(sc.image, dtype="<f4").tobytes()
        out += struct.pack("<I", len(sc.boxes))
        for b in sc.boxes:
            out += _BOX.pack(b.x_min, b.y_min, b.x_max, b.y_max, b.class_id)
    Path(path).write_bytes(bytes(out))


@dataclass
class Dataset:
    scenes: list[Scene]
    domain_id: str = ""
    num_classes: int = 3
    height: int = 64
    width: int = 64
    meta: dict = field(default_factory=dict)


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:8] != DS_MAGIC:
        raise BadMagicError(f"{path}: magic check failed (expected {DS_MAGIC!r}, got {raw[:8]!r})")
    pos = 8
    hdr = struct.Struct("<IIIIH")
    if len(raw) < pos + hdr.size:
        raise TruncatedError(f"{path}: header truncated")
    h, w, n, c, id_len = hdr.unpack_from(raw, pos)
    pos += hdr.size
    if len(raw) < pos + id_len:
        raise TruncatedError(f"{path}: domain id truncated")
    domain_id = raw[pos:pos + id_len].decode("utf-8")
    pos += id_len
    img_bytes = 4 * h * w
    scenes = []
    for i in range(n):
        if len(raw) < pos + img_bytes + 4:
            raise TruncatedError(f"{path}: header declares {n} scenes but payload ends in scene {i}")
        img = np.frombuffer(raw, dtype="<f4", count=h * w, offset=pos).astype(np.float32).reshape(h, w, 1)
        pos += img_bytes
        (nb,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if len(raw) < pos + nb * _BOX.size:
            raise TruncatedError(f"{path}: box records of scene {i} truncated")
        boxes = []
        for _ in range(nb):
            x0, y0, x1, y1, cls = _BOX.unpack_from(raw, pos)
            pos += _BOX.size
            boxes.append(BoxLabel(x0, y0, x1, y1, cls))
        scenes.append(Scene(img, boxes))
    if pos != len(raw):
        raise LengthMismatchError(f"{path}: {len(raw) - pos} trailing bytes after {n} declared scenes")
    return Dataset(scenes, domain_id, c, h, w)


def mean_background(scenes: Sequence[Scene]) -> float:
    """Mean intensity over pixels outside every labelled box."""
    total, count = 0.0, 0
    for sc in scenes:
        img = sc.image[:, :, 0]
        keep = np.ones(img.shape, dtype=bool)
        for b in sc.boxes:
            keep[int(b.y_min):int(math.ceil(b.y_max)), int(b.x_min):int(math.ceil(b.x_max))] = False
        total += float(img[keep].sum())
        count += int(keep.sum())
    return total / count
