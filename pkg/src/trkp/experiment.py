"""Ablation matrix: pre-train, mine, fine-tune, distil and evaluate per cell.

Cells
  baseline    one shared head on the pooled sources, uniform weights
  amsd        one head per source with adversarial disentanglement
  htrm        one shared head, relevance-weighted fine-tune
  trkp        both
  htrm_image  as htrm, with image-level instead of instance-level mining
  trkp_image  as trkp, with image-level mining
"""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .amsd import TeacherHistory, TeacherModel, head_loss_matrix, train_teacher
from .autodiff import resolve_dtype
from .config import ExperimentConfig, derive_seed
from .detector import ModelConfig
from .distill import RoundConfig, RoundResult, run_adaptation_round
from .htrm import RelevanceWeights
from .scenes import Scene, synthesize_domain

log = logging.getLogger(__name__)

POOLED = "pooled"
MULTI_HEAD = {"baseline": False, "htrm": False, "htrm_image": False,
              "amsd": True, "trkp": True, "trkp_image": True}


@dataclass
class RunData:
    sources: dict[str, list[Scene]]
    source_test: dict[str, list[Scene]]
    target_train: list[Scene]
    target_test: list[Scene]

    def pooled(self) -> dict[str, list[Scene]]:
        return {POOLED: [s for scenes in self.sources.values() for s in scenes]}

    def pooled_offsets(self) -> dict[str, tuple[int, int]]:
        out, start = {}, 0
        for d, scenes in self.sources.items():
            out[d] = (start, start + len(scenes))
            start += len(scenes)
        return out


def _reseed(spec, salt: int):
    return replace(spec, seed=spec.seed + salt)


def build_data(cfg: ExperimentConfig, run_seed: int) -> RunData:
    sc = cfg.scenes
    specs, mix = cfg.domain_specs(run_seed)
    syn = lambda spec, n: synthesize_domain(spec, n, sc.height, sc.width)
    return RunData(
        {s.domain_id: syn(s, sc.n_source) for s in specs},
        {s.domain_id: syn(_reseed(s, 500), sc.n_source_test) for s in specs},
        syn(mix, sc.n_target_train),
        syn(_reseed(mix, 500), sc.n_target_test),
    )


def model_config(cfg: ExperimentConfig) -> ModelConfig:
    m = cfg.model
    return ModelConfig(tuple(m.channels), tuple(m.kernels), m.hidden, cfg.scenes.num_classes)


def teacher_sources(data: RunData, multi_head: bool) -> dict[str, list[Scene]]:
    return data.sources if multi_head else data.pooled()


def pretrain_teacher(cfg: ExperimentConfig, data: RunData, multi_head: bool,
                     run_seed: int) -> tuple[TeacherModel, TeacherHistory]:
    srcs = teacher_sources(data, multi_head)
    seed = derive_seed(run_seed, 11)
    teacher = TeacherModel(model_config(cfg), list(srcs), seed, resolve_dtype(cfg.precision))
    return train_teacher(teacher, srcs, replace(cfg.amsd, seed=seed))


def round_config(cfg: ExperimentConfig, cell: str, run_seed: int) -> RoundConfig:
    htrm = None
    if cell in ("htrm", "trkp"):
        htrm = cfg.htrm
    elif cell in ("htrm_image", "trkp_image"):
        htrm = replace(cfg.htrm, level="image")
    return RoundConfig(
        amsd=replace(cfg.amsd, seed=derive_seed(run_seed, 11)),
        htrm=htrm,
        distill=replace(cfg.distill, seed=derive_seed(run_seed, 13)),
        finetune_epochs=cfg.experiment.finetune_epochs,
        eval_score_threshold=cfg.eval.score_threshold,
        eval_nms_iou=cfg.eval.nms_iou,
        eval_match_iou=cfg.eval.match_iou,
        threads=cfg.threads,
    )


def split_pooled_weights(weights: RelevanceWeights | None, data: RunData) -> RelevanceWeights | None:
    """Map weights mined on the pooled source list back to per-source keys."""
    if weights is None or all(d != POOLED for d, _ in weights.counts):
        return weights
    out = RelevanceWeights()
    for d, (a, b) in data.pooled_offsets().items():
        for i in range(a, b):
            out.counts[(d, i - a)] = weights.count(POOLED, i)
            out.alphas[(d, i - a)] = weights.alpha(POOLED, i)
    return out


def run_cell(cfg: ExperimentConfig, cell: str, data: RunData, pretrained: TeacherModel,
             run_seed: int) -> RoundResult:
    teacher = copy.deepcopy(pretrained)
    srcs = teacher_sources(data, MULTI_HEAD[cell])
    res = run_adaptation_round(teacher, srcs, data.target_train, data.target_test,
                               round_config(cfg, cell, run_seed))
    res.weights = split_pooled_weights(res.weights, data)
    return res


@dataclass
class MatrixResult:
    summary: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    teacher_log: list[dict] = field(default_factory=list)
    disentangle: list[dict] = field(default_factory=list)

    def final_maps(self, cell: str) -> dict[int, float]:
        return {r["seed"]: r["final_map"] for r in self.summary if r["cell"] == cell}


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.6f}"
    return str(x)


def _history_rows(hist: TeacherHistory, seed: int, variant: str, phase: str,
                  domains: Sequence[str]) -> list[dict]:
    rows = []
    for r in hist.rows():
        own = [r.get(f"own_{d}", "") for d in domains]
        if len(hist.own) == 1:     # pooled head: one shared own-loss column
            own = [r[f"own_{POOLED}"]] * len(domains)
        rows.append({"seed": seed, "teacher": variant, "phase": phase, "epoch": r["epoch"],
                     **{f"own_{d}": v for d, v in zip(domains, own)},
                     "adversarial": r["adversarial"], "total": r["total"]})
    return rows


def run_matrix(cfg: ExperimentConfig, seeds: Sequence[int] | None = None,
               cells: Sequence[str] | None = None) -> MatrixResult:
    seeds = list(cfg.experiment.seeds if seeds is None else seeds)
    cells = list(cfg.experiment.cells if cells is None else cells)
    domains = [s.domain_id for s in cfg.sources]
    out = MatrixResult()
    for seed in seeds:
        t0 = time.perf_counter()
        data = build_data(cfg, seed)
        cache: dict[bool, TeacherModel] = {}
        for cell in cells:
            multi = MULTI_HEAD[cell]
            variant = "multi" if multi else "pooled"
            if multi not in cache:
                teacher, hist = pretrain_teacher(cfg, data, multi, seed)
                cache[multi] = teacher
                out.teacher_log += _history_rows(hist, seed, variant, "pretrain", domains)
                if multi:
                    m = head_loss_matrix(teacher, data.source_test)
                    for k, d in enumerate(domains):
                        out.disentangle.append({"seed": seed, "source": d,
                                                **{f"head_{h}": m[k, j] for j, h in enumerate(domains)}})
            res = run_cell(cfg, cell, data, cache[multi], seed)
            if res.finetune_history is not None:
                out.teacher_log += _history_rows(res.finetune_history, seed, variant,
                                                 f"finetune_{cell}", domains)
            row = {"seed": seed, "cell": cell, "final_map": res.final_map, "teacher_map": res.teacher_map}
            for d in domains:
                row[f"mean_alpha_{d}"] = res.weights.mean_alpha(d) if res.weights is not None else 1.0
            row["pseudo_boxes"] = res.metrics[-1].pseudo_boxes if res.metrics else 0
            out.summary.append(row)
            out.epochs += [{"seed": seed, "cell": cell, "epoch": m.epoch, "target_map": m.target_map,
                            "pseudo_boxes": m.pseudo_boxes, "mean_pseudo_score": m.mean_pseudo_score,
                            "student_loss": m.student_loss} for m in res.metrics]
            log.info("seed %d cell %s: final mAP %.4f", seed, cell, res.final_map)
        log.info("seed %d done in %.1fs", seed, time.perf_counter() - t0)
    return out


def write_rows(rows: Sequence[dict], path) -> None:
    """CSV with fixed float formatting so reruns compare byte for byte."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        if not rows:
            return
        cols = list(rows[0])
        wr.writerow(cols)
        for r in rows:
            wr.writerow([_fmt(r.get(c, "")) for c in cols])


def write_matrix(result: MatrixResult, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "summary": out_dir / "summary.csv",
        "epochs": out_dir / "epoch_metrics.csv",
        "teacher_log": out_dir / "teacher_log.csv",
        "disentangle": out_dir / "head_losses.csv",
    }
    write_rows(result.summary, paths["summary"])
    write_rows(result.epochs, paths["epochs"])
    write_rows(result.teacher_log, paths["teacher_log"])
    write_rows(result.disentangle, paths["disentangle"])
    return paths
