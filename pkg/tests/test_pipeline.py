import json
import math

import numpy as np
import pytest

from deskdistill import autodiff as ad
from deskdistill.errors import AbortedRunError, ConfigError
from deskdistill.losses import LossConfig, ProjectionParams
from deskdistill.mapping import BlockPartition, MappingState
from deskdistill.model import forward_with_trace, init_params, predict
from deskdistill.pipeline import (
    RunConfig,
    dev_metric,
    finetune_teacher,
    prepare_data,
    read_report,
    run_experiment,
    stage1_transformer_distill,
    stage2_prediction_distill,
)

TINY = dict(teacher_layers=2, teacher_dim=8, teacher_ff=16, student_layers=1, student_dim=4, student_ff=8,
            heads=2, vocab_size=12, seq_len=8, train_size=48, dev_size=24, teacher_epochs=2,
            stage1_epochs=2, stage2_epochs=1, batch1=16, batch2=16, teacher_batch=16)


def tiny(task="cola-like", **kw):
    return RunConfig(task=task, **{**TINY, **kw}).resolved()


@pytest.fixture(scope="module")
def data():
    return prepare_data(tiny())


@pytest.fixture(scope="module")
def teacher(data):
    full, _, dev = data
    cfg = tiny()
    return finetune_teacher(full, dev, cfg.teacher_config(), cfg.seed, cfg.teacher_epochs, cfg.teacher_lr, 16)[0]


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]


# ---------------------------------------------------------------- config

def test_defaults_match_reference_recipe():
    cfg = RunConfig(task="cola-like").resolved()
    assert (cfg.seed, cfg.lr1, cfg.batch1, cfg.stage1_epochs, cfg.stage2_epochs) == (42, 5e-5, 32, 30, 3)
    assert cfg.map_lr == 5e-5
    assert RunConfig(task="stsb-like").resolved().stage1_epochs == 20


def test_missing_task_lists_valid_tasks():
    with pytest.raises(ConfigError, match="cola-like, stsb-like"):
        RunConfig().resolved()


def test_incompatible_layers_rejected():
    with pytest.raises(ConfigError):
        tiny(teacher_layers=3, student_layers=2)


# ---------------------------------------------------------------- teacher

def test_teacher_zero_epochs_returns_init(data):
    full, _, dev = data
    cfg = tiny()
    params, *_ = finetune_teacher(full, dev, cfg.teacher_config(), 5, 0, 1e-3)
    assert params.digest() == init_params(cfg.teacher_config(), 5).digest()


def test_teacher_training_is_deterministic(data, teacher):
    full, _, dev = data
    cfg = tiny()
    again = finetune_teacher(full, dev, cfg.teacher_config(), cfg.seed, cfg.teacher_epochs, cfg.teacher_lr, 16)[0]
    assert again.digest() == teacher.digest()


# ---------------------------------------------------------------- stage 1

def test_self_distillation_fixed_point(data, teacher):
    _, train, _ = data
    cfg = tiny(stage1_epochs=1)
    student = teacher.clone()
    before = student.digest()
    mapping = MappingState("base", BlockPartition(2, 2))
    proj = ProjectionParams.identity(8)
    cfg = RunConfig(**{**cfg.__dict__, "student_layers": 2, "student_dim": 8, "student_ff": 16})
    _, _, report = stage1_transformer_distill(teacher, student, mapping, LossConfig(), cfg, train, proj=proj)
    assert report.steps[0]["loss_total"] == 0.0
    assert all(r["loss_total"] == 0.0 for r in report.steps)
    assert student.digest() == before
    assert np.array_equal(proj.W_h.data, np.eye(8))


def test_stage1_leaves_head_and_teacher_alone(data, teacher):
    _, train, _ = data
    cfg = tiny()
    student = init_params(cfg.student_config(), 1)
    head, body, t_hash = student.digest("head."), student.digest("layer"), teacher.digest()
    mapping = MappingState("learnable", BlockPartition(2, 1))
    _, proj, report = stage1_transformer_distill(teacher, student, mapping, cfg.loss_config(), cfg, train)
    assert student.digest("head.") == head
    assert student.digest("layer") != body
    assert teacher.digest() == t_hash
    audit = report.grad_audit
    assert audit["student"] and audit["W_h"] and audit["W_e"] and audit["theta"]
    assert not audit["teacher"] and not audit["student_head"]
    n_steps = cfg.stage1_epochs * math.ceil(len(train) / cfg.batch1)
    assert len(report.steps) == n_steps
    assert len(mapping.trajectory) == n_steps * 1 * 2


def test_gradient_audit_has_no_theta_for_fixed_maps(data, teacher):
    _, train, _ = data
    cfg = tiny(stage1_epochs=1)
    mapping = MappingState("mean", BlockPartition(2, 1))
    _, _, report = stage1_transformer_distill(teacher, init_params(cfg.student_config(), 1), mapping,
                                              cfg.loss_config(), cfg, train)
    assert "theta" not in report.grad_audit


@pytest.mark.parametrize("alpha,zero_key", [(1.0, "loss_attn"), (0.0, "loss_hidn")])
def test_alpha_endpoint_logged_exactly_zero(data, teacher, alpha, zero_key):
    _, train, _ = data
    cfg = tiny(alpha=alpha)
    mapping = MappingState("base", BlockPartition(2, 1))
    _, _, report = stage1_transformer_distill(teacher, init_params(cfg.student_config(), 1), mapping,
                                              cfg.loss_config(), cfg, train)
    assert all(r[zero_key] == 0.0 for r in report.steps)


def test_stage1_aborts_on_nan(data, teacher):
    _, train, _ = data
    cfg = tiny()
    bad = teacher.clone()
    bad["layer1.ff1.weight"].data[0, 0] = np.nan
    with pytest.raises(AbortedRunError) as info:
        stage1_transformer_distill(bad, init_params(cfg.student_config(), 1),
                                   MappingState("base", BlockPartition(2, 1)), cfg.loss_config(), cfg, train)
    assert info.value.stage == "stage1" and info.value.step == 0


# ---------------------------------------------------------------- stage 2

def test_stage2_self_distillation_sits_at_entropy(data, teacher):
    _, train, dev = data
    cfg = tiny(batch2=len(train))
    student = teacher.clone()
    assert dev_metric(student, dev) == dev_metric(teacher, dev)
    with ad.no_grad():
        z = predict(teacher, train.tokens).data
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    entropy = float(np.mean(-(p * np.log(p)).sum(axis=1)))
    _, report = stage2_prediction_distill(teacher, student, cfg, train, dev)
    first = next(r for r in report.steps if r["stage"] == "stage2")
    assert first["loss_pred"] == pytest.approx(entropy, abs=1e-12)


def test_stage2_updates_head_and_logs_dev_metric(data, teacher):
    _, train, dev = data
    cfg = tiny(stage2_epochs=2)
    student = init_params(cfg.student_config(), 1)
    head = student.digest("head.")
    _, report = stage2_prediction_distill(teacher, student, cfg, train, dev)
    assert student.digest("head.") != head
    epochs = [e for e in report.epochs if e["stage"] == "stage2"]
    assert len(epochs) == 2 and all("dev_metric" in e for e in epochs)


# ---------------------------------------------------------------- end to end

def test_run_experiment_artifacts_and_determinism(tmp_path, teacher):
    cfg = tiny(map="learnable", map_init="base-like")
    a = run_experiment(cfg, tmp_path / "a", teacher=teacher)
    b = run_experiment(cfg, tmp_path / "b", teacher=teacher)
    assert a.final_dev_metric == b.final_dev_metric
    for name in ("metrics.jsonl", "trajectory.csv", "config.resolved", "student.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    records = read_jsonl(tmp_path / "a" / "metrics.jsonl")
    events = [r["event"] for r in records]
    assert events[0] == "data" and events[-1] == "final" and "map_weights" in events
    weights0 = next(r for r in records if r["event"] == "map_weights")["weights"]
    # block size 2: base-like theta row (-1, 1)
    assert np.allclose(weights0[0], [1 / (1 + math.e ** 2), math.e ** 2 / (1 + math.e ** 2)], rtol=0, atol=1e-15)
    report = read_report(tmp_path / "a" / "report.txt")
    assert report["status"] == "ok" and report["metric"] == "mcc"
    assert (tmp_path / "a" / "config.resolved").read_text() == a.config_echo


def test_data_fraction_halves_distillation_split(tmp_path, teacher):
    report = run_experiment(tiny(data_fraction=0.5, stage1_epochs=1), teacher=teacher)
    assert report.train_count == 24


def test_skip_stage1_has_no_stage1_records(tmp_path, teacher):
    report = run_experiment(tiny(skip_stage1=True, map="learnable"), tmp_path, teacher=teacher)
    records = read_jsonl(tmp_path / "metrics.jsonl")
    assert not any(r.get("stage") == "stage1" for r in records)
    assert not (tmp_path / "trajectory.csv").exists()
    assert report.status == "ok" and report.trajectory_path is None


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_aborted_run_keeps_labeled_partial_artifacts(tmp_path, teacher):
    bad = teacher.clone()
    bad["embed.token"].data[:] = np.inf
    with pytest.raises(AbortedRunError):
        run_experiment(tiny(), tmp_path, teacher=bad)
    assert (tmp_path / "student.partial.ckpt").exists() and not (tmp_path / "student.ckpt").exists()
    assert read_report(tmp_path / "report.txt")["status"].startswith("aborted")
    last = read_jsonl(tmp_path / "metrics.jsonl")[-1]
    assert last["event"] == "aborted" and last["stage"] == "stage1" and last["step"] == 0


def test_regression_pipeline_reports_pearson(tmp_path):
    cfg = tiny("stsb-like", seq_len=8)
    report = run_experiment(cfg, tmp_path)
    assert read_report(tmp_path / "report.txt")["metric"] == "pearson"
    assert report.status == "ok"
