import csv
import json
from pathlib import Path

import pytest

from trkp.cli import main

TINY = """\
seed: 3
scenes: {n_source: 24, n_source_test: 8, n_target_train: 32, n_target_test: 16}
amsd: {epochs: 2}
distill: {epochs: 1, confidence_threshold: 0.002}
experiment: {finetune_epochs: 1, seeds: [1]}
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY)
    out = root / "run"
    base = ["--config", str(cfg), "--out", str(out), "--threads", "1"]
    codes = {}
    codes["synth"] = main(["synth", *base])
    codes["train-teacher"] = main(["train-teacher", *base])
    codes["mine"] = main(["mine", *base, "--k-prime", "3", "5", "10", "30"])
    codes["distill"] = main(["distill", *base])
    codes["eval"] = main(["eval", *base])
    return out, base, codes


def test_stages_succeed(run):
    out, _, codes = run
    assert codes == {k: 0 for k in codes}
    for name in ("config.resolved.yaml", "teacher_multi.trkpck", "teacher_multi_log.csv", "student_trkp.trkpck",
                 "epoch_metrics_trkp.csv", "eval_student_trkp_target_test.csv"):
        assert (out / name).exists(), name


def test_k_prime_sweep_manifests(run):
    out = run[0]
    for k in (3, 5, 10, 30):
        assert (out / f"weights_multi_instance_k{k}.csv").exists()


def test_every_output_has_sidecar(run):
    out = run[0]
    files = [p for p in out.rglob("*") if p.is_file() and not p.name.endswith(".meta.json")]
    assert files
    for p in files:
        meta = json.loads(Path(str(p) + ".meta.json").read_text())
        assert meta["seed"] == 3 and len(meta["config_hash"]) == 16


def test_stage_idempotent(run):
    out, base, _ = run
    before = (out / "weights_multi_instance_k5.csv").read_bytes()
    assert main(["mine", *base, "--k-prime", "5"]) == 0
    assert (out / "weights_multi_instance_k5.csv").read_bytes() == before


def test_eval_untrained_model_scores_zero(run, tmp_path, capsys):
    out, base, _ = run
    from trkp.config import load_config
    from trkp.distill import StudentModel
    from trkp.amsd import TeacherModel
    from trkp.detector import ModelConfig, save_checkpoint

    cfg = load_config()
    mc = ModelConfig(tuple(cfg.model.channels), tuple(cfg.model.kernels), cfg.model.hidden, 3)
    student = StudentModel.from_teacher(TeacherModel(mc, ["S1"], seed=0))
    for t in student.head.parameters():
        t.data[...] = 0
    student.head.params[sorted(student.head.params)[-1]].data[...] = -30.0
    ck = tmp_path / "untrained.trkpck"
    save_checkpoint(ck, student.state_dict(), json.dumps({"kind": "student"}))
    assert main(["eval", *base, "--checkpoint", str(ck)]) == 0
    assert "mAP 0.0000" in capsys.readouterr().out
    rows = (out / "eval_untrained_target_test.csv").read_text().splitlines()
    assert rows[0] == "class,AP" and all(float(r.split(",")[1]) == 0.0 for r in rows[1:])


def test_missing_prerequisite(tmp_path, capsys):
    code = main(["train-teacher", "--out", str(tmp_path / "empty")])
    assert code == 1
    assert "missing artifact" in capsys.readouterr().err


def test_config_error_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("amsd:\n  lamda: 1\n")
    assert main(["synth", "--config", str(p), "--out", str(tmp_path / "x")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_experiment_and_report(tmp_path):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(TINY)
    out = tmp_path / "exp"
    assert main(["experiment", "--config", str(cfg), "--out", str(out), "--cells", "baseline", "trkp"]) == 0
    for name in ("summary.csv", "epoch_metrics.csv", "teacher_log.csv", "head_losses.csv"):
        assert (out / name).exists() and (out / (name + ".meta.json")).exists()
    with open(out / "summary.csv", newline="") as fh:
        assert [r["cell"] for r in csv.DictReader(fh)] == ["baseline", "trkp"]
    assert main(["report", "--config", str(cfg), "--out", str(out)]) == 0
    figs = out / "figures"
    assert (figs / "cell_means.csv").exists()
    assert (figs / "final_map.png").read_bytes()[:4] == b"\x89PNG"
