"""Teacher-to-student adaptation on the unlabelled target domain."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .amsd import AmsdConfig, TeacherModel, average_heads, train_teacher
from .autodiff import Tensor
from .detector import BaseNet, DetHead, Detection, decode, detection_loss, encode_targets, nms
from .htrm import HtrmConfig, mine_relevance, source_pool, target_pool
from .metrics import EvalResult, evaluate
from .optim import SGD, TrainingDivergedError, decayed_lr
from .scenes import Scene

log = logging.getLogger(__name__)


class NoSupervisionError(RuntimeError):
    """Every target image ended up without a pseudo box."""


class StructureError(ValueError):
    """Teacher and student parameters do not line up."""


@dataclass
class DistillConfig:
    confidence_threshold: float = 0.7
    ema: float = 0.99
    epochs: int = 5
    lr: float = 0.01
    batch_size: int = 16
    momentum: float = 0.9
    nms_iou: float = 0.5
    seed: int = 0
    use_ground_truth: bool = False   # oracle pseudo labels, for the degenerate check

    def __post_init__(self):
        if not 0 < self.confidence_threshold < 1:
            raise ValueError("confidence threshold must lie in (0, 1)")
        if not 0 <= self.ema <= 1:
            raise ValueError("EMA coefficient must lie in [0, 1]")
        if self.lr <= 0 or self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("invalid student optimiser settings")



class StudentModel:
    """Single-head detector on its own base network."""

    def __init__(self, base: BaseNet, head: DetHead):
        self.base = base
        self.head = head

    @classmethod
    def from_teacher(cls, teacher: TeacherModel) -> "StudentModel":
        """Copy the teacher base; the head starts at the parameter mean of the teacher heads."""
        base = copy.deepcopy(teacher.base)
        heads = list(teacher.heads.values())
        out = copy.deepcopy(heads[0])
        for name, t in out.params.items():
            t.data = average_heads([h.params[name].data for h in heads]).astype(t.dtype)
        return cls(base, out)

    @property
    def dtype(self):
        return self.base.dtype

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.base.named_parameters("base.") + self.head.named_parameters("head.")

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

    def __call__(self, images) -> Tensor:
        return self.head(self.base(images))

    def predict(self, images) -> np.ndarray:
        return self(images).data


@dataclass
class PseudoLabel:
    boxes: list[Detection]
    image_index: int

    def labels(self):
        return [d.as_label() for d in self.boxes]


def pseudo_labels_from_outputs(head_outputs: Sequence[np.ndarray], threshold: float,
                               nms_iou: float = 0.5, start_index: int = 0) -> list[PseudoLabel]:
    """Average per-head raw outputs, then decode, threshold and suppress.

    ``head_outputs`` holds K arrays of shape (N, G, G, C+5).
    """
    avg = average_heads(head_outputs)
    return [PseudoLabel(nms(decode(avg[i], threshold), nms_iou), start_index + i)
            for i in range(avg.shape[0])]


def generate_pseudo_labels(teacher: TeacherModel, images: np.ndarray, cfg: DistillConfig,
                           batch_size: int = 64) -> list[PseudoLabel]:
    out = []
    for start in range(0, len(images), batch_size):
        outs = teacher.head_outputs(images[start:start + batch_size])
        out.extend(pseudo_labels_from_outputs(list(outs), cfg.confidence_threshold, cfg.nms_iou, start))
    return out


def ema_update(teacher: TeacherModel, student: StudentModel, m: float) -> None:
    """``teacher <- m * teacher + (1 - m) * student`` for the base and every head."""
    pairs = [(teacher.base, student.base)] + [(h, student.head) for h in teacher.heads.values()]
    for tmod, smod in pairs:
        if list(tmod.params) != list(smod.params):
            raise StructureError("teacher and student parameter names differ")
        for name, tp in tmod.params.items():
            sp = smod.params[name]
            if tp.shape != sp.shape:
                raise StructureError(f"{name}: teacher {tp.shape} vs student {sp.shape}")
            new = m * tp.data + (1 - m) * sp.data
            # rounding may land one ulp outside the segment; keep the convex hull
            tp.data = np.clip(new, np.minimum(tp.data, sp.data), np.maximum(tp.data, sp.data)).astype(tp.dtype)


def _student_epoch(student: StudentModel, images: np.ndarray, targets, opt: SGD, lr: float,
                   rng: np.random.Generator, batch_size: int, step0: int,
                   on_step: Callable[[], None] | None) -> tuple[float, int]:
    order = rng.permutation(len(images))
    total = 0.0
    step = step0
    for start in range(0, len(order), batch_size):
        b = order[start:start + batch_size]
        out = student(Tensor(images[b], dtype=student.dtype))
        per_image = detection_loss(out, targets.subset(b)).total
        loss = ad.tensor_sum(per_image) * (1.0 / len(b))
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDivergedError(step, value)
        opt.step(ad.backward(loss), lr)
        step += 1
        total += float(per_image.data.sum())
        if on_step is not None:
            on_step()
    return total / max(len(images), 1), step


def _check_supervision(boxes_per_image: Sequence[Sequence]) -> None:
    if not any(len(b) for b in boxes_per_image):
        raise NoSupervisionError("no pseudo boxes survived filtering on any target image")


def train_student(student: StudentModel, images: np.ndarray, boxes_per_image: Sequence[Sequence],
                  cfg: DistillConfig, on_step: Callable[[], None] | None = None) -> tuple[StudentModel, list[float]]:
    """Fit the student to fixed (pseudo) labels; returns the per-epoch loss history."""
    _check_supervision(boxes_per_image)
    h, w = images.shape[1:3]
    labels = [[b.as_label() if isinstance(b, Detection) else b for b in bs] for bs in boxes_per_image]
    targets = encode_targets(labels, h, w)
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(student.parameters(), cfg.lr, cfg.momentum)
    hist = []
    step = 0
    for epoch in range(cfg.epochs):
        loss, step = _student_epoch(student, images, targets, opt, decayed_lr(cfg.lr, epoch, cfg.epochs),
                                    rng, cfg.batch_size, step, on_step)
        hist.append(loss)
    return student, hist


@dataclass
class RoundConfig:
    amsd: AmsdConfig = field(default_factory=AmsdConfig)
    htrm: HtrmConfig | None = field(default_factory=HtrmConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    finetune_epochs: int = 5
    eval_score_threshold: float = 0.05
    eval_nms_iou: float = 0.5
    eval_match_iou: float = 0.5
    threads: int = 1


@dataclass
class EpochMetrics:
    epoch: int
    target_map: float
    pseudo_boxes: int
    mean_pseudo_score: float
    student_loss: float


@dataclass
class RoundResult:
    student: StudentModel
    teacher: TeacherModel
    metrics: list[EpochMetrics]
    weights: object | None
    final: EvalResult
    finetune_history: object | None = None
    teacher_map: float = float("nan")   # target mAP of the teacher right before distillation

    @property
    def final_map(self) -> float:
        return self.final.mAP


def mine_for_teacher(teacher: TeacherModel, sources: Mapping[str, Sequence[Scene]],
                     target_images: np.ndarray, htrm: HtrmConfig, threshold: float,
                     nms_iou: float = 0.5, threads: int = 1):
    """Pool features with the teacher base and pseudo boxes, then mine weights."""
    pseudo = generate_pseudo_labels(teacher, target_images,
                                    DistillConfig(confidence_threshold=threshold, nms_iou=nms_iou))
    G = source_pool(teacher.features, sources, htrm.level)
    Q = target_pool(teacher.features, target_images, [p.boxes for p in pseudo], htrm.level)
    return mine_relevance(G, Q, htrm, {d: len(s) for d, s in sources.items()}, threads)


def run_adaptation_round(teacher: TeacherModel, sources: Mapping[str, Sequence[Scene]],
                         target_train: Sequence[Scene], target_test: Sequence[Scene], cfg: RoundConfig,
                         student: StudentModel | None = None, weights=None) -> RoundResult:
    """Mine relevance, fine-tune the teacher, then distil into the student with EMA.

    The teacher is expected to be pre-trained already.  Passing ``weights``
    skips mining and fine-tunes with those relevance weights instead.
    """
    images = np.stack([s.image for s in target_train])
    num_classes = teacher.cfg.num_classes
    if weights is None and cfg.htrm is not None:
        weights = mine_for_teacher(teacher, sources, images, cfg.htrm,
                                   cfg.distill.confidence_threshold, cfg.distill.nms_iou, cfg.threads)
    ft_hist = None
    if cfg.finetune_epochs:
        _, ft_hist = train_teacher(teacher, sources, replace(cfg.amsd, seed=cfg.amsd.seed + 1), weights,
                                   epochs=cfg.finetune_epochs)
    teacher_res = evaluate(teacher, target_test, num_classes, cfg.eval_score_threshold,
                           cfg.eval_nms_iou, cfg.eval_match_iou)
    log.info("teacher before distillation: mAP %.4f", teacher_res.mAP)
    dcfg = cfg.distill
    if student is None:
        student = StudentModel.from_teacher(teacher)
    opt = SGD(student.parameters(), dcfg.lr, dcfg.momentum)
    rng = np.random.default_rng(dcfg.seed)
    h, w = images.shape[1:3]
    metrics = []
    step = 0

    def pull():
        if dcfg.ema < 1:
            ema_update(teacher, student, dcfg.ema)

    for epoch in range(dcfg.epochs):
        if dcfg.use_ground_truth:
            boxes = [s.boxes for s in target_train]
            n_boxes, mean_score = sum(len(b) for b in boxes), 1.0
        else:
            pseudo = generate_pseudo_labels(teacher, images, dcfg)
            boxes = [p.labels() for p in pseudo]
            scores = [d.score for p in pseudo for d in p.boxes]
            n_boxes, mean_score = len(scores), float(np.mean(scores)) if scores else 0.0
        _check_supervision(boxes)
        targets = encode_targets(boxes, h, w)
        loss, step = _student_epoch(student, images, targets, opt,
                                    decayed_lr(dcfg.lr, epoch, dcfg.epochs), rng, dcfg.batch_size, step, pull)
        res = evaluate(student, target_test, num_classes, cfg.eval_score_threshold,
                       cfg.eval_nms_iou, cfg.eval_match_iou)
        log.info("distill epoch %d: mAP %.4f, %d pseudo boxes", epoch, res.mAP, n_boxes)
        metrics.append(EpochMetrics(epoch, res.mAP, n_boxes, mean_score, loss))
    final = evaluate(student, target_test, num_classes, cfg.eval_score_threshold,
                     cfg.eval_nms_iou, cfg.eval_match_iou)
    return RoundResult(student, teacher, metrics, weights, final, ft_hist, teacher_res.mAP)
