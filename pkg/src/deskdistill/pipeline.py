"""Teacher fine-tuning and two-stage task distillation."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import load_params, save_params
from .errors import AbortedRunError, ConfigError, UndefinedMetricError
from .losses import LossConfig, ProjectionParams, prediction_loss, transformer_layer_loss
from .mapping import BlockPartition, MappingKind, MappingState
from .model import EncoderParams, ModelConfig, check_compatible, forward_with_trace, init_params, predict
from .optim import Adam
from .tasks import TASKS, Split, apply_data_fraction, batch_iterator, generate_task, matthews_corrcoef, pearson_corr, task_spec


def _opt(default, help, **extra):
    return field(default=default, metadata={"help": help, **extra})


@dataclass
class RunConfig:
    """Every knob of a run. Field names double as config keys and (dashed) CLI flags."""

    task: str = _opt(None, "synthetic task", choices=tuple(TASKS))
    seed: int = _opt(42, "random seed for data order, init, and random maps")
    stage1_epochs: int = _opt(None, "transformer-layer stage epochs (default: 30 cola-like, 20 stsb-like)")
    stage2_epochs: int = _opt(3, "prediction-layer stage epochs")
    lr1: float = _opt(5e-5, "learning rate of the transformer-layer stage")
    lr2: float = _opt(1e-3, "learning rate of the prediction-layer stage")
    batch1: int = _opt(32, "batch size of the transformer-layer stage")
    batch2: int = _opt(16, "batch size of the prediction-layer stage")
    alpha: float = _opt(0.5, "hidden-vs-attention weight; 0.5 is the unweighted baseline")
    attn_loss: str = _opt("mse", "attention loss", choices=("mse", "kl"))
    map: str = _opt("base", "layer mapping", choices=tuple(k.value for k in MappingKind))
    map_init: str = _opt("uniform", "learnable map initialization", choices=("uniform", "base-like"))
    map_lr: float = _opt(5e-5, "learning rate of the learnable map parameters")
    data_fraction: float = _opt(1.0, "fraction of the training split to use")
    skip_stage1: bool = _opt(False, "skip the transformer-layer stage")
    kl_epsilon: float = _opt(1e-8, "floor for the denominator distribution inside the KL log")
    kl_direction: str = _opt("student-first", "KL argument order", choices=("student-first", "teacher-first"))
    attn_space: str = _opt("logits", "aggregate teacher attention as logits or probabilities (KL only)",
                           choices=("logits", "probs"))
    temperature: float = _opt(1.0, "prediction-loss temperature")
    teacher_epochs: int = _opt(30, "teacher fine-tuning epochs")
    teacher_lr: float = _opt(1e-3, "teacher fine-tuning learning rate")
    teacher_batch: int = _opt(32, "teacher fine-tuning batch size")
    teacher_layers: int = _opt(6, "teacher transformer layers")
    teacher_dim: int = _opt(32, "teacher hidden width")
    teacher_ff: int = _opt(64, "teacher feed-forward width")
    student_layers: int = _opt(2, "student transformer layers")
    student_dim: int = _opt(16, "student hidden width")
    student_ff: int = _opt(32, "student feed-forward width")
    heads: int = _opt(4, "attention heads (shared by teacher and student)")
    vocab_size: int = _opt(32, "vocabulary size")
    seq_len: int = _opt(None, "sequence length (default: 16 cola-like, 20 stsb-like)")
    train_size: int = _opt(3000, "generated training examples before subsampling")
    dev_size: int = _opt(500, "generated dev examples")
    teacher: str = _opt(None, "teacher checkpoint path")
    out: str = _opt(None, "output directory")

    def resolved(self) -> RunConfig:
        """Fill task-dependent defaults and validate."""
        if self.task is None:
            raise ConfigError(f"task is required; valid tasks: {', '.join(TASKS)}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; valid tasks: {', '.join(TASKS)}")
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        kind = TASKS[self.task]
        if values["stage1_epochs"] is None:
            values["stage1_epochs"] = 30 if kind == "classification" else 20
        if values["seq_len"] is None:
            values["seq_len"] = 16 if kind == "classification" else 20
        cfg = RunConfig(**values)
        cfg.loss_config()
        cfg.task_spec()
        cfg.teacher_config(), cfg.student_config()
        check_compatible(cfg.teacher_config(), cfg.student_config())
        for key in ("stage1_epochs", "stage2_epochs", "teacher_epochs"):
            if getattr(cfg, key) < 0:
                raise ConfigError(f"{key} must be non-negative")
        for key in ("batch1", "batch2", "teacher_batch"):
            if getattr(cfg, key) < 1:
                raise ConfigError(f"{key} must be positive")
        return cfg

    @property
    def kind(self) -> str:
        return TASKS[self.task]

    def task_spec(self):
        return task_spec(self.task, vocab_size=self.vocab_size, seq_len=self.seq_len,
                         train_size=self.train_size, dev_size=self.dev_size, seed=self.seed,
                         data_fraction=self.data_fraction)

    def _model(self, layers, dim, ff) -> ModelConfig:
        return ModelConfig(layers, dim, self.heads, ff, self.vocab_size, self.seq_len,
                           2 if self.kind == "classification" else 1)

    def teacher_config(self) -> ModelConfig:
        return self._model(self.teacher_layers, self.teacher_dim, self.teacher_ff)

    def student_config(self) -> ModelConfig:
        return self._model(self.student_layers, self.student_dim, self.student_ff)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.attn_loss, self.alpha, self.kl_epsilon, self.temperature,
                          self.kl_direction, self.attn_space)


@dataclass
class RunReport:
    config_echo: str = ""
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    final_dev_metric: float | None = None
    teacher_dev_metric: float | None = None
    teacher_train_metric: float | None = None
    train_count: int = 0
    wall_clock: float = 0.0
    trajectory_path: str | None = None
    final_map_weights: list | None = None
    grad_audit: dict | None = None
    status: str = "ok"

    def stage_epoch_means(self, stage: str) -> list[float]:
        return [e["mean_loss"] for e in self.epochs if e["stage"] == stage]


class MetricsWriter:
    """Append-only line-delimited JSON; each record is flushed as written."""

    def __init__(self, path=None):
        self.path = path
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def write(self, record: dict) -> None:
        if self._fh is not None:
            clean = {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
                     for k, v in record.items()}
            self._fh.write(json.dumps(clean) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


# ------------------------------------------------------------------ evaluation

def model_outputs(params: EncoderParams, split: Split, batch_size: int = 256) -> np.ndarray:
    outs = []
    with ad.no_grad():
        for tokens, _ in batch_iterator(split, batch_size, None):
            outs.append(predict(params, tokens).data)
    return np.concatenate(outs)


def dev_metric(params: EncoderParams, split: Split) -> float | None:
    """MCC for classification, Pearson for regression; None when undefined."""
    out = model_outputs(params, split)
    if split.kind == "classification":
        return matthews_corrcoef(out.argmax(axis=1), split.labels)
    try:
        return pearson_corr(out[:, 0], split.labels)
    except UndefinedMetricError:
        return None


def train_accuracy(params: EncoderParams, split: Split) -> float:
    out = model_outputs(params, split)
    if split.kind == "classification":
        return float(np.mean(out.argmax(axis=1) == split.labels))
    return pearson_corr(out[:, 0], split.labels)


def _check_finite(loss, stage, step):
    if not np.isfinite(loss.data):
        raise AbortedRunError(f"{stage}: loss became {float(loss.data)} at step {step}", stage, step)


# --------------------------------------------------------------------- teacher

def finetune_teacher(train: Split, dev: Split, config: ModelConfig, seed: int, epochs: int,
                     lr: float, batch_size: int = 32, metrics: MetricsWriter | None = None):
    """Supervised training from a seeded init. Returns (params, dev metric, train metric)."""
    params = init_params(config, seed)
    opt = Adam(params.parameters(), lr)
    metrics = metrics or MetricsWriter()
    step = 0
    for epoch in range(epochs):
        losses = []
        for tokens, labels in batch_iterator(train, batch_size, seed, epoch):
            logits = predict(params, tokens)
            if train.kind == "classification":
                onehot = np.eye(config.n_outputs)[labels]
                loss = ad.scale(ad.mean(ad.tensor_sum(ad.log_softmax_rows(logits) * onehot, axis=-1)), -1.0)
            else:
                loss = ad.mean(ad.square(logits - labels[:, None]))
            _check_finite(loss, "teacher", step)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            losses.append(float(loss.data))
            step += 1
        metrics.write({"event": "epoch", "stage": "teacher", "epoch": epoch,
                       "mean_loss": float(np.mean(losses)), "dev_metric": dev_metric(params, dev)})
    opt.zero_grad()  # a finished teacher carries no gradients into distillation
    return params, dev_metric(params, dev), train_accuracy(params, train)


# --------------------------------------------------------------------- stage 1

def stage1_transformer_distill(teacher: EncoderParams, student: EncoderParams, mapping: MappingState,
                               loss_cfg: LossConfig, run_cfg: RunConfig, train: Split,
                               proj: ProjectionParams | None = None,
                               metrics: MetricsWriter | None = None, report: RunReport | None = None):
    """Embedding + transformer-layer distillation; the prediction head is left untouched."""
    check_compatible(teacher.config, student.config)
    if mapping.partition.block_size != teacher.config.n_layers // student.config.n_layers:
        raise ConfigError("mapping partition does not match the teacher/student layer counts")
    metrics = metrics or MetricsWriter()
    report = report or RunReport()
    if proj is None:
        proj = ProjectionParams.init(student.config.d_model, teacher.config.d_model, run_cfg.seed)
    opt = Adam(student.parameters(include_head=False) + proj.parameters(), run_cfg.lr1)
    learnable = mapping.kind is MappingKind.LEARNABLE
    map_opt = Adam([mapping.theta], mapping.map_lr) if learnable else None

    k = 0
    for epoch in range(run_cfg.stage1_epochs):
        losses = []
        for tokens, _ in batch_iterator(train, run_cfg.batch1, run_cfg.seed + 1, epoch):
            with ad.no_grad():
                t_trace = forward_with_trace(teacher, tokens)
            s_trace = forward_with_trace(student, tokens)
            loss, parts = transformer_layer_loss(s_trace, t_trace, mapping, proj, loss_cfg, k)
            _check_finite(loss, "stage1", k)
            opt.zero_grad()
            if learnable:
                mapping.theta.grad = None
            ad.backward(loss)
            if k == 0:
                report.grad_audit = gradient_audit(teacher, student, proj, mapping)
            opt.step()
            if learnable:
                mapping.map_step(map_opt, k)
            record = {"event": "step", "stage": "stage1", "epoch": epoch, "step": k,
                      "loss_total": parts["loss_total"], "loss_embd": parts["loss_embd"],
                      "loss_hidn": parts["loss_hidn"], "loss_attn": parts["loss_attn"], "loss_pred": None,
                      "loss_hidn_raw": parts["loss_hidn_raw"], "loss_attn_raw": parts["loss_attn_raw"],
                      "alpha": loss_cfg.alpha, "map_kind": mapping.kind.value}
            metrics.write(record)
            report.steps.append(record)
            losses.append(parts["loss_total"])
            k += 1
        summary = {"event": "epoch", "stage": "stage1", "epoch": epoch, "mean_loss": float(np.mean(losses))}
        if learnable:
            summary["map_weights"] = mapping.current_weights(k).tolist()
        metrics.write(summary)
        report.epochs.append(summary)
    return student, proj, report


def gradient_audit(teacher, student, proj, mapping) -> dict:
    """Which parameter groups hold nonzero gradients after a backward pass."""
    def nonzero(ts):
        return any(t.grad is not None and np.any(t.grad != 0) for t in ts)

    audit = {
        "student": nonzero(student.parameters(include_head=False)),
        "student_head": nonzero(student.head_parameters()),
        "W_h": nonzero([proj.W_h]),
        "W_e": nonzero([proj.W_e]),
        "teacher": any(t.grad is not None for t in teacher.parameters()),
    }
    if mapping.theta is not None:
        audit["theta"] = nonzero([mapping.theta])
    return audit


# --------------------------------------------------------------------- stage 2

def stage2_prediction_distill(teacher: EncoderParams, student: EncoderParams, run_cfg: RunConfig,
                              train: Split, dev: Split, metrics: MetricsWriter | None = None,
                              report: RunReport | None = None):
    """Prediction-layer distillation over every student parameter, head included."""
    metrics = metrics or MetricsWriter()
    report = report or RunReport()
    opt = Adam(student.parameters(), run_cfg.lr2)
    k = 0
    for epoch in range(run_cfg.stage2_epochs):
        losses = []
        for tokens, _ in batch_iterator(train, run_cfg.batch2, run_cfg.seed + 2, epoch):
            with ad.no_grad():
                t_logits = predict(teacher, tokens)
            loss = prediction_loss(predict(student, tokens), t_logits, train.kind, run_cfg.temperature)
            _check_finite(loss, "stage2", k)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            record = {"event": "step", "stage": "stage2", "epoch": epoch, "step": k,
                      "loss_total": float(loss.data), "loss_embd": None, "loss_hidn": None,
                      "loss_attn": None, "loss_pred": float(loss.data),
                      "alpha": run_cfg.alpha, "map_kind": run_cfg.map}
            metrics.write(record)
            report.steps.append(record)
            losses.append(float(loss.data))
            k += 1
        summary = {"event": "epoch", "stage": "stage2", "epoch": epoch,
                   "mean_loss": float(np.mean(losses)) if losses else None,
                   "dev_metric": dev_metric(student, dev)}
        metrics.write(summary)
        report.epochs.append(summary)
    return student, report


# ------------------------------------------------------------------ experiment

def prepare_data(cfg: RunConfig):
    """Return (full train split, distillation train split, dev split)."""
    full, dev = generate_task(replace(cfg.task_spec(), data_fraction=1.0))
    return full, apply_data_fraction(full, cfg.data_fraction, cfg.seed), dev


def obtain_teacher(cfg: RunConfig, train: Split, dev: Split, metrics=None):
    """Load ``cfg.teacher`` if set, else fine-tune one on ``train``.

    Returns (params, dev metric, train metric).
    """
    if cfg.teacher:
        params, meta = load_params(cfg.teacher)
        if params.config != cfg.teacher_config():
            raise ConfigError(f"teacher checkpoint config {params.config} does not match the run")
        if meta.get("task") not in (None, cfg.task):
            raise ConfigError(f"teacher was trained on {meta['task']}, run uses {cfg.task}")
        return params, dev_metric(params, dev), meta.get("train_metric")
    return finetune_teacher(train, dev, cfg.teacher_config(), cfg.seed, cfg.teacher_epochs,
                            cfg.teacher_lr, cfg.teacher_batch, metrics)


def run_experiment(cfg: RunConfig, out_dir=None, teacher: EncoderParams | None = None,
                   config_echo: str | None = None) -> RunReport:
    """Teacher (given, loaded, or fine-tuned) -> optional stage 1 -> stage 2 -> final dev metric."""
    from .config import format_config

    cfg = cfg.resolved()
    start = time.perf_counter()
    out = Path(out_dir) if out_dir else None
    echo = config_echo if config_echo is not None else format_config(cfg)
    report = RunReport(config_echo=echo)
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(echo, encoding="utf-8")
        metrics_path = out / "metrics.jsonl"
        metrics_path.unlink(missing_ok=True)
        metrics = MetricsWriter(metrics_path)
    else:
        metrics = MetricsWriter()

    mapping = None
    student = None
    try:
        full_train, train, dev = prepare_data(cfg)
        report.train_count = len(train)
        metrics.write({"event": "data", "task": cfg.task, "train_count": len(train), "dev_count": len(dev),
                       "data_fraction": cfg.data_fraction})
        if teacher is None:
            # the teacher always sees the full split; data_fraction limits distillation only
            teacher, t_dev, t_train = obtain_teacher(cfg, full_train, dev, metrics)
        else:
            t_dev, t_train = dev_metric(teacher, dev), None
        report.teacher_dev_metric, report.teacher_train_metric = t_dev, t_train
        metrics.write({"event": "teacher", "dev_metric": t_dev, "train_metric": t_train})
        if out:
            save_params(teacher, out / "teacher.ckpt", {"task": cfg.task, "train_metric": t_train})

        student = init_params(cfg.student_config(), cfg.seed + 1)
        if not cfg.skip_stage1:
            partition = BlockPartition(cfg.teacher_layers, cfg.student_layers)
            mapping = MappingState(cfg.map, partition, cfg.map_init, cfg.map_lr, cfg.seed, cfg.attn_space)
            if mapping.kind is MappingKind.LEARNABLE:
                metrics.write({"event": "map_weights", "step": 0, "weights": mapping.current_weights(0).tolist()})
                if out:
                    report.trajectory_path = str(out / "trajectory.csv")
                    mapping.open_trajectory(report.trajectory_path)
            head_before = student.digest("head.")
            stage1_transformer_distill(teacher, student, mapping, cfg.loss_config(), cfg, train,
                                       metrics=metrics, report=report)
            if student.digest("head.") != head_before:
                raise AbortedRunError("stage 1 modified the prediction head", "stage1")
            if mapping.theta is not None:
                report.final_map_weights = mapping.current_weights().tolist()
            mapping.close_trajectory()
        stage2_prediction_distill(teacher, student, cfg, train, dev, metrics=metrics, report=report)
        report.final_dev_metric = dev_metric(student, dev)
        metrics.write({"event": "final", "dev_metric": report.final_dev_metric})
    except Exception as exc:
        report.status = f"aborted: {exc}"
        metrics.write({"event": "aborted", "error": str(exc),
                       "stage": getattr(exc, "stage", None), "step": getattr(exc, "step", None)})
        if mapping is not None:
            mapping.close_trajectory()
        if out and student is not None:
            save_params(student, out / "student.partial.ckpt", {"task": cfg.task, "status": "partial"})
        raise
    finally:
        report.wall_clock = time.perf_counter() - start
        metrics.close()
        if out:
            write_report(report, cfg, out / "report.txt")
    if out:
        save_params(student, out / "student.ckpt", {"task": cfg.task})
    return report


def _fmt(x):
    if x is None:
        return "none"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_report(report: RunReport, cfg: RunConfig, path) -> None:
    s1 = report.stage_epoch_means("stage1")
    lines = [
        "[report]",
        f"status = {report.status}",
        f"task = {cfg.task}",
        f"metric = {'mcc' if cfg.kind == 'classification' else 'pearson'}",
        f"final_dev_metric = {_fmt(report.final_dev_metric)}",
        f"teacher_dev_metric = {_fmt(report.teacher_dev_metric)}",
        f"teacher_train_metric = {_fmt(report.teacher_train_metric)}",
        f"train_count = {report.train_count}",
        f"stage1_first_epoch_loss = {_fmt(s1[0] if s1 else None)}",
        f"stage1_last_epoch_loss = {_fmt(s1[-1] if s1 else None)}",
        f"final_map_weights = {json.dumps(report.final_map_weights)}",
        f"trajectory = {_fmt(report.trajectory_path)}",
        f"wall_clock_seconds = {report.wall_clock:.3f}",
        "",
        "[config]",
        report.config_echo.rstrip("\n"),
        "",
    ]
    Path(path).write_text("\n".join(lines), encoding="utf-8")


def read_report(path) -> dict:
    """Parse the ``[report]`` section of a report.txt into a dict of strings."""
    out, section = {}, None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            continue
        if section == "report" and " = " in line:
            key, value = line.split(" = ", 1)
            out[key] = value
    return out


def parse_metric(value: str) -> float | None:
    if value in (None, "none", "nan"):
        return None
    x = float(value)
    return None if math.isnan(x) else x
