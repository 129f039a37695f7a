"""Multi-head teacher trained with adversarial multi-source disentanglement.

Each source owns a detection head on a shared base network.  An image from
source k trains head k normally, while every other head sees the same
features through a gradient reversal layer: those heads still learn to fit
the image, but the base receives the reversed (and ``mu``-scaled) signal.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .detector import BaseNet, DetHead, GridTargets, ModelConfig, detection_loss, encode_targets
from .optim import SGD, TrainingDivergedError, decayed_lr
from .scenes import Scene

log = logging.getLogger(__name__)


@dataclass
class AmsdConfig:
    lam: float = 0.2
    mu: float = 0.01
    lr: float = 0.01
    batch_size: int = 16
    epochs: int = 10
    disentangle_cls: bool = True
    disentangle_reg: bool = True
    momentum: float = 0.9
    seed: int = 0
    # "batch": divide the weighted batch loss by the sum of weights, so
    # relevance weights shift emphasis without shrinking the step size;
    # "count": divide by the number of images (a literal mean)
    weight_norm: str = "batch"

    def __post_init__(self):
        if not (np.isfinite(self.lam) and np.isfinite(self.mu)) or self.lam < 0 or self.mu < 0:
            raise ValueError("lambda and mu must be finite and non-negative")
        if self.lr <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("lr and batch size must be positive, epochs non-negative")
        if self.weight_norm not in ("batch", "count"):
            raise ValueError(f"unknown weight normalisation {self.weight_norm!r}")


@dataclass
class WeightedSample:
    scene: Scene
    domain_id: str
    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


def average_heads(outputs: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean of head outputs, independent of head order.

    Values are sorted along the head axis before summing so that any
    permutation of heads yields bit-identical results.
    """
    stack = np.stack(list(outputs))
    if stack.shape[0] == 1:
        return stack[0]
    return np.sort(stack, axis=0).sum(axis=0) / stack.shape[0]


class TeacherModel:
    """Shared base network plus one head per source domain."""

    def __init__(self, cfg: ModelConfig, domain_ids: Sequence[str], seed: int = 0, dtype=np.float32):
        if not domain_ids:
            raise ValueError("a teacher needs at least one source head")
        if len(set(domain_ids)) != len(domain_ids):
            raise ValueError("duplicate domain ids")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.base = BaseNet(cfg, rng, dtype)
        head = DetHead(cfg, rng, dtype)
        # identical initial heads: parameter-averaging them stays meaningful
        self.heads: dict[str, DetHead] = {}
        for d in domain_ids:
            h = copy.deepcopy(head)
            self.heads[d] = h

    @property
    def domain_ids(self) -> list[str]:
        return list(self.heads)

    @property
    def K(self) -> int:
        return len(self.heads)

    @property
    def dtype(self):
        return self.base.dtype

    def head_index(self, domain_id: str) -> int:
        try:
            return self.domain_ids.index(domain_id)
        except ValueError:
            raise KeyError(f"unknown source domain {domain_id!r}; heads: {self.domain_ids}") from None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = self.base.named_parameters("base.")
        for d, h in self.heads.items():
            out += h.named_parameters(f"head.{d}.")
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, t in self.named_parameters():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ad.ShapeError(f"{k}: {arr.shape} vs {t.shape}")
            t.data = arr.astype(t.dtype).copy()

    def head_outputs(self, images) -> np.ndarray:
        """Raw outputs of every head, shape (K, N, G, G, C+5)."""
        feats = self.base(images)
        return np.stack([h(feats).data for h in self.heads.values()])

    def predict(self, images) -> np.ndarray:
        return average_heads(list(self.head_outputs(images)))

    def features(self, images) -> np.ndarray:
        return self.base(images).data


def amsd_combine(own, adversarial: Sequence, lam: float, num_heads: int, alpha=1.0):
    """``alpha * (own + lam / (K-1) * sum(adversarial))``.

    Works on floats and on tensors; ``adversarial`` may be empty (K = 1 or
    the adversarial branch disabled), leaving the plain detection loss.
    """
    if not adversarial or lam == 0 or num_heads < 2:
        return own * alpha
    total = adversarial[0]
    for a in adversarial[1:]:
        total = total + a
    return (own + total * (lam / (num_heads - 1))) * alpha


def _adv_part(lb, cfg: AmsdConfig):
    if cfg.disentangle_cls and cfg.disentangle_reg:
        return lb.total
    return lb.cls if cfg.disentangle_cls else lb.reg


def _uses_adversary(model: TeacherModel, cfg: AmsdConfig) -> bool:
    return model.K > 1 and cfg.lam > 0 and (cfg.disentangle_cls or cfg.disentangle_reg)


@dataclass
class BatchTerms:
    own: Tensor            # (N,) own-head detection loss
    adversarial: Tensor | None   # (N,) summed adversarial head losses, or None
    per_sample: Tensor     # (N,) un-weighted Eq.-style per-image loss
    loss: Tensor           # scalar: alpha-weighted mean of per_sample


def amsd_terms_from_features(model: TeacherModel, feats: Tensor, adv_feats: Tensor | None,
                             targets: GridTargets, domain_idx: np.ndarray, alphas: np.ndarray,
                             cfg: AmsdConfig) -> BatchTerms:
    """Compose the batch loss from already-computed (and possibly reversed) features."""
    dt = feats.dtype
    n = len(targets)
    own = None
    for k, head in enumerate(model.heads.values()):
        mask = Tensor((domain_idx == k).astype(dt))
        term = detection_loss(head(feats), targets).total * mask
        own = term if own is None else own + term
    adv_terms = []
    if adv_feats is not None:
        for k, head in enumerate(model.heads.values()):
            mask = Tensor((domain_idx != k).astype(dt))
            adv_terms.append(_adv_part(detection_loss(head(adv_feats), targets), cfg) * mask)
    adv = None
    for t in adv_terms:
        adv = t if adv is None else adv + t
    # masked per-head terms already sum to the j != k total
    per_sample = amsd_combine(own, [adv] if adv is not None else [], cfg.lam, model.K)
    alphas = np.asarray(alphas, dtype=dt)
    weighted = per_sample * Tensor(alphas)
    denom = float(alphas.sum()) if cfg.weight_norm == "batch" else n
    loss = ad.tensor_sum(weighted) * (1.0 / denom if denom > 0 else 0.0)
    return BatchTerms(own, adv, per_sample, loss)


def amsd_batch_terms(model: TeacherModel, images: np.ndarray, targets: GridTargets,
                     domain_idx: np.ndarray, alphas: np.ndarray, cfg: AmsdConfig) -> BatchTerms:
    feats = model.base(Tensor(images, dtype=model.dtype))
    # the reversal node is built before the own-head branch on purpose: the
    # backward sweep then adds its contribution to the base features last
    adv_feats = ad.grl(feats, cfg.mu) if _uses_adversary(model, cfg) else None
    return amsd_terms_from_features(model, feats, adv_feats, targets, domain_idx, alphas, cfg)


def amsd_loss(model: TeacherModel, sample: WeightedSample, cfg: AmsdConfig) -> Tensor:
    """Scalar weighted loss for one labelled source image."""
    k = model.head_index(sample.domain_id)
    h, w = sample.scene.image.shape[:2]
    targets = encode_targets([sample.scene.boxes], h, w)
    terms = amsd_batch_terms(model, sample.scene.image[None], targets, np.array([k]),
                             np.array([sample.alpha]), cfg)
    return terms.loss


@dataclass
class SourcePool:
    images: np.ndarray
    targets: GridTargets
    domain_idx: np.ndarray
    image_idx: np.ndarray
    alphas: np.ndarray

    def __len__(self):
        return len(self.images)


def build_source_pool(model: TeacherModel, datasets: Mapping[str, Sequence[Scene]],
                      weights=None) -> SourcePool:
    imgs, tgts, dom, idx, alphas = [], [], [], [], []
    for d, scenes in datasets.items():
        if not scenes:
            raise ValueError(f"source dataset {d!r} is empty")
        k = model.head_index(d)
        h, w = scenes[0].image.shape[:2]
        imgs.append(np.stack([s.image for s in scenes]))
        tgts.append(encode_targets([s.boxes for s in scenes], h, w))
        dom.append(np.full(len(scenes), k))
        idx.append(np.arange(len(scenes)))
        if weights is None:
            alphas.append(np.ones(len(scenes)))
        else:
            a = np.array([weights.alpha(d, i) for i in range(len(scenes))])
            alphas.append(a)
    return SourcePool(np.concatenate(imgs), GridTargets.concat(tgts), np.concatenate(dom),
                      np.concatenate(idx), np.concatenate(alphas))


@dataclass
class TeacherHistory:
    """Per-epoch means; ``own`` is keyed by domain id."""

    own: dict[str, list[float]] = field(default_factory=dict)
    adversarial: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)

    def rows(self):
        for e, tot in enumerate(self.total):
            yield {"epoch": e, **{f"own_{d}": v[e] for d, v in self.own.items()},
                   "adversarial": self.adversarial[e], "total": tot}


def train_teacher(model: TeacherModel, datasets: Mapping[str, Sequence[Scene]], cfg: AmsdConfig,
                  weights=None, epochs: int | None = None) -> tuple[TeacherModel, TeacherHistory]:
    """Mini-batch SGD over shuffled, mixed-source batches.

    ``weights`` (a :class:`~trkp.htrm.RelevanceWeights`) scales every
    image's loss by its relevance; without it every image weighs 1.
    """
    pool = build_source_pool(model, datasets, weights)
    epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum)
    hist = TeacherHistory(own={d: [] for d in model.domain_ids})
    step = 0
    # zero-weight images contribute nothing; leave them out of the batches
    active = np.flatnonzero(pool.alphas > 0)
    if len(active) == 0 and epochs:
        log.warning("every relevance weight is zero; teacher left unchanged")
        epochs = 0
    for epoch in range(epochs):
        lr = decayed_lr(cfg.lr, epoch, epochs)
        order = active[rng.permutation(len(active))]
        own_sum = np.zeros(model.K)
        own_cnt = np.zeros(model.K)
        adv_sum = tot_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            terms = amsd_batch_terms(model, pool.images[b], pool.targets.subset(b),
                                     pool.domain_idx[b], pool.alphas[b], cfg)
            value = float(terms.loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(step, value)
            grads = ad.backward(terms.loss)
            opt.step(grads, lr)
            step += 1
            np.add.at(own_sum, pool.domain_idx[b], terms.own.data)
            np.add.at(own_cnt, pool.domain_idx[b], 1)
            if terms.adversarial is not None:
                adv_sum += float(terms.adversarial.data.sum())
            tot_sum += float(terms.per_sample.data.sum())
        for k, d in enumerate(model.domain_ids):
            hist.own[d].append(float(own_sum[k] / max(own_cnt[k], 1)))
        hist.adversarial.append(adv_sum / len(active))
        hist.total.append(tot_sum / len(active))
    return model, hist


def head_loss_matrix(model: TeacherModel, datasets: Mapping[str, Sequence[Scene]],
                     batch_size: int = 64) -> np.ndarray:
    """``M[k, j]``: mean detection loss of head j on the images of source k."""
    out = np.zeros((len(datasets), model.K))
    for k, (d, scenes) in enumerate(datasets.items()):
        h, w = scenes[0].image.shape[:2]
        acc = np.zeros(model.K)
        for start in range(0, len(scenes), batch_size):
            chunk = scenes[start:start + batch_size]
            tg = encode_targets([s.boxes for s in chunk], h, w)
            feats = model.base(np.stack([s.image for s in chunk]))
            for j, head in enumerate(model.heads.values()):
                acc[j] += float(detection_loss(head(feats), tg).total.data.sum())
        out[k] = acc / len(scenes)
    return out
