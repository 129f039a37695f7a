"""Command-line entry point: ``trkp <stage> [options]``.

Stages share one output directory; later stages read what earlier ones
wrote and fail with a message naming any missing artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .amsd import TeacherModel
from .autodiff import resolve_dtype
from .config import CELLS, ConfigError, ExperimentConfig, load_config
from .detector import BaseNet, CheckpointError, DetHead, load_checkpoint, save_checkpoint
from .distill import NoSupervisionError, StudentModel, generate_pseudo_labels, run_adaptation_round
from .htrm import (RelevanceWeights, mine_relevance, read_manifest, source_pool, target_pool,
                   write_features, write_manifest)
from .metrics import evaluate
from .optim import TrainingDivergedError
from .scenes import DatasetFormatError, read_dataset, write_dataset

log = logging.getLogger("trkp")


class StageError(RuntimeError):
    """A stage could not run, usually because an earlier artifact is missing."""


# ---------------------------------------------------------------------------
# artifact bookkeeping


def _sidecar(path: Path, cfg: ExperimentConfig, seed, stage: str) -> None:
    meta = {"file": path.name, "stage": stage, "config_hash": cfg.hash(), "seed": seed}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(f"missing artifact {path} (run `trkp {stage}` first)")
    return path


class Layout:
    """File names inside the output directory."""

    def __init__(self, out):
        self.root = Path(out)

    def data(self, name: str) -> Path:
        return self.root / "data" / f"{name}.trkpds"

    def teacher(self, variant: str) -> Path:
        return self.root / f"teacher_{variant}.trkpck"

    def manifest(self, variant: str, level: str, k: int) -> Path:
        return self.root / f"weights_{variant}_{level}_k{k}.csv"

    def features(self, variant: str, level: str, which: str) -> Path:
        return self.root / f"features_{variant}_{level}_{which}.trkpft"

    def student(self, cell: str) -> Path:
        return self.root / f"student_{cell}.trkpck"


def _write_config(cfg: ExperimentConfig, out: Path, stage: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved.yaml"
    cfg.dump(path)
    _sidecar(path, cfg, cfg.seed, stage)


def _variant(cell: str) -> str:
    return "multi" if ex.MULTI_HEAD[cell] else "pooled"


def _level(cfg: ExperimentConfig, cell: str) -> str:
    return "image" if cell.endswith("_image") else cfg.htrm.level


def _save_model(model, path: Path, cfg: ExperimentConfig, kind: str, stage: str) -> None:
    meta = {"kind": kind, "config_hash": cfg.hash(), "seed": cfg.seed}
    if isinstance(model, TeacherModel):
        meta["domains"] = model.domain_ids
    save_checkpoint(path, model.state_dict(), json.dumps(meta, sort_keys=True))
    _sidecar(path, cfg, cfg.seed, stage)


def _checkpoint_meta(version: str) -> dict:
    _, _, meta = version.partition(";")
    try:
        return json.loads(meta) if meta else {}
    except json.JSONDecodeError:
        return {}


def _load_model(path: Path, cfg: ExperimentConfig):
    try:
        tensors, version = load_checkpoint(path)
    except CheckpointError as exc:
        raise StageError(str(exc)) from None
    meta = _checkpoint_meta(version)
    dtype = resolve_dtype(cfg.precision)
    mcfg = ex.model_config(cfg)
    if meta.get("kind") == "student":
        rng = np.random.default_rng(0)
        model = StudentModel(BaseNet(mcfg, rng, dtype), DetHead(mcfg, rng, dtype))
    else:
        domains = meta.get("domains") or sorted({k.split(".")[1] for k in tensors if k.startswith("head.")})
        model = TeacherModel(mcfg, domains, 0, dtype)
    try:
        model.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise StageError(f"{path}: checkpoint does not match the configured model ({exc})") from None
    return model


def _load_data(cfg: ExperimentConfig, lay: Layout) -> ex.RunData:
    def rd(name):
        try:
            return read_dataset(_require(lay.data(name), "synth")).scenes
        except DatasetFormatError as exc:
            raise StageError(str(exc)) from None

    domains = [s.domain_id for s in cfg.sources]
    return ex.RunData({d: rd(d) for d in domains}, {d: rd(f"{d}_test") for d in domains},
                      rd("target_train"), rd("target_test"))


def _to_pooled(weights: RelevanceWeights, data: ex.RunData) -> RelevanceWeights:
    out = RelevanceWeights()
    for d, (a, _) in data.pooled_offsets().items():
        for (dom, i), c in weights.counts.items():
            if dom == d:
                out.counts[(ex.POOLED, a + i)] = c
                out.alphas[(ex.POOLED, a + i)] = weights.alphas[(dom, i)]
    return out


def _write_rows(rows, path: Path, cfg: ExperimentConfig, seed, stage: str) -> None:
    ex.write_rows(rows, path)
    _sidecar(path, cfg, seed, stage)


# ---------------------------------------------------------------------------
# stages


def cmd_synth(cfg: ExperimentConfig, args) -> int:
    lay = Layout(cfg.out)
    (lay.root / "data").mkdir(parents=True, exist_ok=True)
    _write_config(cfg, lay.root, "synth")
    data = ex.build_data(cfg, cfg.seed)
    c = cfg.scenes.num_classes
    files = {d: (s, d) for d, s in data.sources.items()}
    files.update({f"{d}_test": (s, d) for d, s in data.source_test.items()})
    files["target_train"] = (data.target_train, cfg.target.domain_id)
    files["target_test"] = (data.target_test, cfg.target.domain_id)
    for name, (scenes, dom) in files.items():
        path = lay.data(name)
        write_dataset(scenes, path, dom, c)
        _sidecar(path, cfg, cfg.seed, "synth")
    print(f"wrote {len(files)} datasets to {lay.root / 'data'}")
    return 0


def cmd_train_teacher(cfg: ExperimentConfig, args) -> int:
    lay = Layout(cfg.out)
    data = _load_data(cfg, lay)
    _write_config(cfg, lay.root, "train-teacher")
    cell = args.cell or cfg.experiment.cell
    variant = _variant(cell)
    teacher, hist = ex.pretrain_teacher(cfg, data, ex.MULTI_HEAD[cell], cfg.seed)
    _save_model(teacher, lay.teacher(variant), cfg, "teacher", "train-teacher")
    domains = [s.domain_id for s in cfg.sources]
    _write_rows(ex._history_rows(hist, cfg.seed, variant, "pretrain", domains),
                lay.root / f"teacher_{variant}_log.csv", cfg, cfg.seed, "train-teacher")
    print(f"wrote {lay.teacher(variant)}")
    return 0


def cmd_mine(cfg: ExperimentConfig, args) -> int:
    lay = Layout(cfg.out)
    data = _load_data(cfg, lay)
    cell = args.cell or cfg.experiment.cell
    variant = _variant(cell)
    teacher = _load_model(_require(lay.teacher(variant), "train-teacher"), cfg)
    _write_config(cfg, lay.root, "mine")
    level = _level(cfg, cell)
    srcs = ex.teacher_sources(data, ex.MULTI_HEAD[cell])
    images = np.stack([s.image for s in data.target_train])
    pseudo = generate_pseudo_labels(teacher, images, cfg.distill)
    G = source_pool(teacher.features, srcs, level)
    Q = target_pool(teacher.features, images, [p.boxes for p in pseudo], level)
    for which, fs in (("source", G), ("target", Q)):
        path = lay.features(variant, level, which)
        write_features(fs, path)
        _sidecar(path, cfg, cfg.seed, "mine")
    ks = args.k_prime or [cfg.htrm.k_prime]
    for k in ks:
        hcfg = type(cfg.htrm)(k, cfg.htrm.gamma, cfg.htrm.beta, level, cfg.htrm.count_mode)
        try:
            w = mine_relevance(G, Q, hcfg, {d: len(s) for d, s in srcs.items()}, cfg.threads)
        except ValueError as exc:
            raise StageError(f"mining with K'={k} failed: {exc}") from None
        w = ex.split_pooled_weights(w, data)
        path = lay.manifest(variant, level, k)
        write_manifest(w, path)
        _sidecar(path, cfg, cfg.seed, "mine")
        means = ", ".join(f"{d} {w.mean_alpha(d):.4f}" for d in data.sources)
        print(f"K'={k}: wrote {path} (mean alpha: {means})")
    return 0


def cmd_distill(cfg: ExperimentConfig, args) -> int:
    lay = Layout(cfg.out)
    data = _load_data(cfg, lay)
    cell = args.cell or cfg.experiment.cell
    variant = _variant(cell)
    teacher = _load_model(_require(lay.teacher(variant), "train-teacher"), cfg)
    rcfg = ex.round_config(cfg, cell, cfg.seed)
    weights = None
    if rcfg.htrm is not None:
        weights = read_manifest(_require(lay.manifest(variant, _level(cfg, cell), cfg.htrm.k_prime), "mine"))
        if variant == "pooled":
            weights = _to_pooled(weights, data)
    _write_config(cfg, lay.root, "distill")
    srcs = ex.teacher_sources(data, ex.MULTI_HEAD[cell])
    res = run_adaptation_round(teacher, srcs, data.target_train, data.target_test, rcfg, weights=weights)
    _save_model(res.student, lay.student(cell), cfg, "student", "distill")
    _save_model(res.teacher, lay.root / f"teacher_{cell}_adapted.trkpck", cfg, "teacher", "distill")
    rows = [{"epoch": m.epoch, "target_map": m.target_map, "pseudo_boxes": m.pseudo_boxes,
             "mean_pseudo_score": m.mean_pseudo_score, "student_loss": m.student_loss} for m in res.metrics]
    _write_rows(rows, lay.root / f"epoch_metrics_{cell}.csv", cfg, cfg.seed, "distill")
    print(f"final target mAP {res.final_map:.4f} ({cell})")
    return 0


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    lay = Layout(cfg.out)
    ckpt = Path(args.checkpoint) if args.checkpoint else lay.student(args.cell or cfg.experiment.cell)
    model = _load_model(_require(ckpt, "distill"), cfg)
    split = args.split or "target_test"
    try:
        scenes = read_dataset(_require(lay.data(split), "synth")).scenes
    except DatasetFormatError as exc:
        raise StageError(str(exc)) from None
    ev = cfg.eval
    res = evaluate(model, scenes, cfg.scenes.num_classes, ev.score_threshold, ev.nms_iou, ev.match_iou)
    path = lay.root / f"eval_{ckpt.stem}_{split}.csv"
    rows = [{"class": c, "AP": res.per_class_ap[c]} for c in sorted(res.per_class_ap)]
    _write_rows(rows or [{"class": "", "AP": ""}], path, cfg, cfg.seed, "eval")
    print(f"mAP {res.mAP:.4f}")
    return 0


def cmd_experiment(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out)
    _write_config(cfg, out, "experiment")
    seeds = [args.seed] if args.seed is not None else cfg.experiment.seeds
    cells = args.cells or cfg.experiment.cells
    result = ex.run_matrix(cfg, seeds, cells)
    for name, path in ex.write_matrix(result, out).items():
        _sidecar(path, cfg, seeds, "experiment")
    for cell in cells:
        maps = list(result.final_maps(cell).values())
        print(f"{cell}: mean final mAP {np.mean(maps):.4f} over {len(maps)} seed(s)")
    return 0


def cmd_report(cfg: ExperimentConfig, args) -> int:
    from .report import render_report

    out = Path(cfg.out)
    _require(out / "summary.csv", "experiment")
    paths = render_report(out, out / "figures")
    for p in paths:
        _sidecar(p, cfg, cfg.seed, "report")
        print(f"wrote {p}")
    return 0


STAGES = {
    "synth": cmd_synth,
    "train-teacher": cmd_train_teacher,
    "mine": cmd_mine,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--threads", type=int, help="worker threads; 1 is bit-exact reproducible")
    common.add_argument("--out", help="output directory")
    common.add_argument("--precision", choices=("f32", "f64"))
    p = argparse.ArgumentParser(prog="trkp", description="TRKP desk lab")
    sub = p.add_subparsers(dest="stage", required=True)
    for name in STAGES:
        sp = sub.add_parser(name, parents=[common])
        if name in ("train-teacher", "mine", "distill", "eval"):
            sp.add_argument("--cell", choices=CELLS, help="ablation cell (default: experiment.cell)")
        if name == "mine":
            sp.add_argument("--k-prime", type=int, nargs="+", help="one manifest per K' value")
        if name == "eval":
            sp.add_argument("--checkpoint", help="model checkpoint (default: the cell's student)")
            sp.add_argument("--split", help="dataset name under data/ (default: target_test)")
        if name == "experiment":
            sp.add_argument("--cells", nargs="+", choices=CELLS)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("TRKP_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {"seed": args.seed, "threads": args.threads,
                                        "out": args.out, "precision": args.precision})
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=cfg.threads):
            return STAGES[args.stage](cfg, args)
    except (StageError, NoSupervisionError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
