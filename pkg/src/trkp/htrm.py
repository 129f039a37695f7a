"""Holistic target-relevant mining.

Object-level features are pooled from source ground-truth boxes (the
source pool) and from target pseudo boxes (the query pool).  Every query
looks up its exact cosine k-nearest neighbours in the source pool; each
neighbour credits its owner image with one hit.  Hit counts ``w`` become
relevance weights through ``gamma * ln(w / k) + beta`` when ``w > k``, else 0.
"""

from __future__ import annotations

import csv
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .detector import CELL
from .scenes import BoxLabel

FT_MAGIC = b"TRKPFT1\0"
# distances are snapped to this grid so near-ties resolve by index, not by
# the summation order of whichever dot-product routine produced them
TIE_QUANTUM = 1e-12


@dataclass(frozen=True)
class HtrmConfig:
    k_prime: int = 5
    gamma: float = 1.0
    beta: float = 0.5
    level: str = "instance"          # "instance" or "image"
    count_mode: str = "neighbor"     # "neighbor" (one hit per neighbour) or "query"

    def __post_init__(self):
        if self.k_prime < 1:
            raise ValueError("k_prime must be >= 1")
        if self.level not in ("instance", "image"):
            raise ValueError(f"unknown mining level {self.level!r}")
        if self.count_mode not in ("neighbor", "query"):
            raise ValueError(f"unknown count mode {self.count_mode!r}")


@dataclass
class InstanceFeature:
    vector: np.ndarray
    image_index: int
    domain_id: str
    box_index: int = 0


@dataclass
class InstanceFeatureSet:
    features: list[InstanceFeature]
    provenance: str = "source"

    def __len__(self):
        return len(self.features)

    def matrix(self) -> np.ndarray:
        if not self.features:
            return np.zeros((0, 0))
        return np.stack([f.vector for f in self.features]).astype(np.float64)

    def owners(self) -> list[tuple[str, int]]:
        return [(f.domain_id, f.image_index) for f in self.features]


def _normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _box_coords(b):
    if isinstance(b, BoxLabel):
        return b.coords
    return getattr(b, "box", b)


def pool_instance_features(grid: np.ndarray, boxes: Sequence, image_index: int = 0,
                           domain_id: str = "") -> list[InstanceFeature]:
    """Mean of the grid cells whose centres fall inside each box, L2-normalised.

    A box that covers no cell centre falls back to the cell holding its centre.
    """
    grid = np.asarray(grid)
    gh, gw, _ = grid.shape
    cy = (np.arange(gh) + 0.5) * CELL
    cx = (np.arange(gw) + 0.5) * CELL
    out = []
    for j, b in enumerate(boxes):
        x0, y0, x1, y1 = _box_coords(b)
        rows = np.flatnonzero((cy >= y0) & (cy <= y1))
        cols = np.flatnonzero((cx >= x0) & (cx <= x1))
        if rows.size and cols.size:
            vec = grid[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1].astype(np.float64).mean(axis=(0, 1))
        else:
            r = min(int(((y0 + y1) / 2) // CELL), gh - 1)
            c = min(int(((x0 + x1) / 2) // CELL), gw - 1)
            vec = grid[r, c].astype(np.float64)
        out.append(InstanceFeature(_normalize(vec), image_index, domain_id, j))
    return out


def image_feature(grid: np.ndarray, image_index: int = 0, domain_id: str = "") -> InstanceFeature:
    """Whole-grid mean, for the image-level mining ablation."""
    vec = np.asarray(grid, dtype=np.float64).mean(axis=(0, 1))
    return InstanceFeature(_normalize(vec), image_index, domain_id, 0)


def weight_from_count(w: int, cfg: HtrmConfig) -> float:
    if w < 0:
        raise ValueError("hit count must be non-negative")
    if w <= cfg.k_prime:
        return 0.0
    return cfg.gamma * math.log(w / cfg.k_prime) + cfg.beta


@dataclass
class RelevanceWeights:
    """Hit counts and weights per source image, keyed by (domain id, image index)."""

    counts: dict[tuple[str, int], int] = field(default_factory=dict)
    alphas: dict[tuple[str, int], float] = field(default_factory=dict)

    def alpha(self, domain_id: str, image_index: int) -> float:
        return self.alphas.get((domain_id, image_index), 0.0)

    def count(self, domain_id: str, image_index: int) -> int:
        return self.counts.get((domain_id, image_index), 0)

    def keys(self):
        return list(self.counts)

    def mean_alpha(self, domain_id: str) -> float:
        vals = [a for (d, _), a in self.alphas.items() if d == domain_id]
        return float(np.mean(vals)) if vals else 0.0

    def total_count(self) -> int:
        return int(sum(self.counts.values()))


def _neighbours(q: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    sims = q @ g.T
    key = np.rint((1.0 - sims) / TIE_QUANTUM)
    return np.argsort(key, axis=1, kind="stable")[:, :k]


def knn_indices(qm: np.ndarray, gm: np.ndarray, k: int, threads: int = 1,
                chunk: int = 256) -> np.ndarray:
    """Indices of the ``k`` nearest rows of ``gm`` (cosine) for each row of ``qm``."""
    spans = [(s, min(s + chunk, len(qm))) for s in range(0, len(qm), chunk)]
    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(lambda sp: _neighbours(qm[sp[0]:sp[1]], gm, k), spans))
    else:
        parts = [_neighbours(qm[a:b], gm, k) for a, b in spans]
    return np.concatenate(parts) if parts else np.zeros((0, k), dtype=np.intp)


def mine_relevance(G: InstanceFeatureSet, Q: InstanceFeatureSet, cfg: HtrmConfig,
                   image_counts: Mapping[str, int] | None = None, threads: int = 1) -> RelevanceWeights:
    """Count k-NN hits per source image and convert them to weights.

    ``image_counts`` lists every source image (per domain) so that images
    without any pooled feature still receive an explicit zero entry.
    """
    if len(G) < cfg.k_prime:
        raise ValueError(f"source pool has {len(G)} features, fewer than k_prime={cfg.k_prime}")
    if len(Q) == 0:
        raise ValueError("target pool is empty")
    owners = G.owners()
    keys: list[tuple[str, int]] = []
    code_of: dict[tuple[str, int], int] = {}
    listed = [(d, i) for d, n in (image_counts or {}).items() for i in range(n)]
    for o in listed + owners:
        if o not in code_of:
            code_of[o] = len(keys)
            keys.append(o)
    owner_code = np.array([code_of[o] for o in owners])
    gm = np.stack([_normalize(f.vector) for f in G.features])
    qm = np.stack([_normalize(f.vector) for f in Q.features])
    nn = knn_indices(qm, gm, cfg.k_prime, threads)
    hit = owner_code[nn]
    if cfg.count_mode == "query":
        hit = np.concatenate([np.unique(row) for row in hit])
    counts = np.bincount(hit.ravel(), minlength=len(keys))
    w = {k: int(counts[c]) for c, k in enumerate(keys)}
    return RelevanceWeights(w, {k: weight_from_count(v, cfg) for k, v in w.items()})


# ---------------------------------------------------------------------------
# pools from models


def source_pool(base_features, datasets: Mapping[str, Sequence], level: str = "instance",
                batch_size: int = 64) -> InstanceFeatureSet:
    """Pool source features; ``base_features(images) -> (N, G, G, D)``."""
    feats = []
    for d, scenes in datasets.items():
        for start in range(0, len(scenes), batch_size):
            chunk = scenes[start:start + batch_size]
            grids = base_features(np.stack([s.image for s in chunk]))
            for off, (sc, grid) in enumerate(zip(chunk, grids)):
                if level == "image":
                    feats.append(image_feature(grid, start + off, d))
                else:
                    feats.extend(pool_instance_features(grid, sc.boxes, start + off, d))
    return InstanceFeatureSet(feats, "source")


def target_pool(base_features, images: np.ndarray, pseudo_boxes: Sequence[Sequence],
                level: str = "instance", domain_id: str = "T", batch_size: int = 64) -> InstanceFeatureSet:
    """Pool target features from pseudo boxes (or whole grids at image level)."""
    feats = []
    for start in range(0, len(images), batch_size):
        grids = base_features(images[start:start + batch_size])
        for off, grid in enumerate(grids):
            i = start + off
            if level == "image":
                feats.append(image_feature(grid, i, domain_id))
            elif pseudo_boxes[i]:
                feats.extend(pool_instance_features(grid, pseudo_boxes[i], i, domain_id))
    return InstanceFeatureSet(feats, "target")


# ---------------------------------------------------------------------------
# files


def write_manifest(weights: RelevanceWeights, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["domain_id", "image_index", "w", "alpha"])
        for (d, i) in sorted(weights.counts, key=lambda k: (k[0], k[1])):
            wr.writerow([d, i, weights.counts[(d, i)], repr(weights.alphas[(d, i)])])


def read_manifest(path) -> RelevanceWeights:
    out = RelevanceWeights()
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != ["domain_id", "image_index", "w", "alpha"]:
            raise ValueError(f"{path}: unexpected manifest columns {rd.fieldnames}")
        for row in rd:
            key = (row["domain_id"], int(row["image_index"]))
            out.counts[key] = int(row["w"])
            out.alphas[key] = float(row["alpha"])
    return out


def write_features(fs: InstanceFeatureSet, path) -> None:
    dim = len(fs.features[0].vector) if fs.features else 0
    tag = fs.provenance.encode("utf-8")
    buf = bytearray(FT_MAGIC)
    buf += struct.pack("<IIH", dim, len(fs), len(tag)) + tag
    for f in fs.features:
        d = f.domain_id.encode("utf-8")
        buf += struct.pack("<H", len(d)) + d + struct.pack("<II", f.image_index, f.box_index)
        buf += np.asarray(f.vector, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_features(path) -> InstanceFeatureSet:
    from .scenes import BadMagicError, LengthMismatchError, TruncatedError

    raw = Path(path).read_bytes()
    if raw[:8] != FT_MAGIC:
        raise BadMagicError(f"{path}: magic check failed")
    try:
        dim, n, tlen = struct.unpack_from("<IIH", raw, 8)
        pos = 18
        tag = raw[pos:pos + tlen].decode("utf-8")
        pos += tlen
        feats = []
        for _ in range(n):
            (dl,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            d = raw[pos:pos + dl].decode("utf-8")
            pos += dl
            img, box = struct.unpack_from("<II", raw, pos)
            pos += 8
            if len(raw) < pos + 4 * dim:
                raise TruncatedError(f"{path}: feature vector truncated")
            vec = np.frombuffer(raw, "<f4", dim, pos).astype(np.float32)
            pos += 4 * dim
            feats.append(InstanceFeature(vec, img, d, box))
    except struct.error as exc:
        raise TruncatedError(f"{path}: {exc}") from None
    if pos != len(raw):
        raise LengthMismatchError(f"{path}: {len(raw) - pos} trailing bytes")
    return InstanceFeatureSet(feats, tag)
