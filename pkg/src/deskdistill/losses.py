"""Distillation losses: embedding, hidden, attention (MSE / KL), prediction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .mapping import MappingKind, MappingState, aggregate_attention, aggregate_hidden
from .model import ForwardTrace


@dataclass(frozen=True)
class LossConfig:
    attention_kind: str = "mse"  # "mse" on raw logits or "kl" on row-softmaxed ones
    alpha: float = 0.5
    kl_epsilon: float = 1e-8
    temperature: float = 1.0
    kl_direction: str = "student-first"  # or "teacher-first"
    attention_space: str = "logits"  # KL path only: aggregate logits ("logits") or probabilities ("probs")

    def __post_init__(self):
        if self.attention_kind not in ("mse", "kl"):
            raise ConfigError(f"attention loss must be 'mse' or 'kl', got {self.attention_kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.kl_direction not in ("student-first", "teacher-first"):
            raise ConfigError(f"unknown KL direction {self.kl_direction!r}")
        if self.attention_space not in ("logits", "probs"):
            raise ConfigError(f"unknown attention aggregation space {self.attention_space!r}")


class ProjectionParams:
    """Learned maps from student width to teacher width (hidden layers, embeddings)."""

    def __init__(self, W_h, W_e):
        self.W_h = W_h if isinstance(W_h, Tensor) else Tensor(W_h, requires_grad=True)
        self.W_e = W_e if isinstance(W_e, Tensor) else Tensor(W_e, requires_grad=True)
        self.W_h.name, self.W_e.name = "proj.W_h", "proj.W_e"

    @classmethod
    def init(cls, d_student: int, d_teacher: int, seed: int) -> ProjectionParams:
        rng = np.random.default_rng([seed, 7])
        bound = 1.0 / math.sqrt(d_student)
        return cls(rng.uniform(-bound, bound, (d_student, d_teacher)),
                   rng.uniform(-bound, bound, (d_student, d_teacher)))

    @classmethod
    def identity(cls, d: int) -> ProjectionParams:
        return cls(np.eye(d), np.eye(d))

    def parameters(self) -> list[Tensor]:
        return [self.W_h, self.W_e]

    def tensors(self) -> dict[str, Tensor]:
        return {"proj.W_h": self.W_h, "proj.W_e": self.W_e}


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    return ad.mean(ad.square(a - b))


def _projected_mse(student: Tensor, target: Tensor, W: Tensor, what: str) -> Tensor:
    if student.ndim != target.ndim or student.shape[:-1] != target.shape[:-1]:
        raise ShapeError(f"{what}: student {student.shape} and teacher {target.shape} disagree")
    if W.shape != (student.shape[-1], target.shape[-1]):
        raise ShapeError(f"{what}: projection {W.shape} cannot map {student.shape[-1]} -> {target.shape[-1]}")
    return mse(student @ W, target)


def embedding_loss(E_S: Tensor, E_T: Tensor, W_e: Tensor) -> Tensor:
    return _projected_mse(E_S, E_T, W_e, "embedding loss")


def hidden_loss(H_S: Tensor, H_T: Tensor, W_h: Tensor) -> Tensor:
    return _projected_mse(H_S, H_T, W_h, "hidden loss")


def _check_heads(A_S, A_T):
    if len(A_S) != len(A_T):
        raise ConfigError(f"head count mismatch: student {len(A_S)}, teacher {len(A_T)}")
    for a, b in zip(A_S, A_T):
        if a.shape != b.shape:
            raise ShapeError(f"attention shapes differ: {a.shape} vs {b.shape}")


def attention_loss_mse(A_S: list[Tensor], A_T: list[Tensor]) -> Tensor:
    _check_heads(A_S, A_T)
    total = None
    for a, b in zip(A_S, A_T):
        term = mse(a, b)
        total = term if total is None else total + term
    return ad.scale(total, 1.0 / len(A_S))


def _row_kl(log_p: Tensor, p: Tensor, log_q: Tensor) -> Tensor:
    # sum_j p (log p - log q) per row, then mean over every leading index
    return ad.mean(ad.tensor_sum(p * (log_p - log_q), axis=-1))


def attention_loss_kl(A_S: list[Tensor], A_T: list[Tensor], kl_epsilon: float = 1e-8,
                      direction: str = "student-first", teacher_probs: bool = False) -> Tensor:
    """Head-averaged row-wise KL between softmaxed attention matrices.

    ``student-first`` computes KL(softmax(A_S) || softmax(A_T)). The second
    distribution (the one under the log in the denominator) is clamped below
    by ``kl_epsilon``. With ``teacher_probs`` the teacher entries are already
    row distributions and are not softmaxed again.
    """
    _check_heads(A_S, A_T)
    log_floor = math.log(kl_epsilon)
    total = None
    for a_s, a_t in zip(A_S, A_T):
        log_p_s = ad.log_softmax_rows(a_s)
        p_s = ad.softmax_rows(a_s)
        if teacher_probs:
            q_t = a_t
            log_q_t = ad.log(ad.clamp_min(a_t, 1e-300))
        else:
            q_t = ad.softmax_rows(a_t)
            log_q_t = ad.log_softmax_rows(a_t)
        # clamping q at eps is the same as clamping log q at log(eps)
        if direction == "student-first":
            term = _row_kl(log_p_s, p_s, ad.clamp_min(log_q_t, log_floor))
        else:
            term = _row_kl(log_q_t, q_t, ad.clamp_min(log_p_s, log_floor))
        total = term if total is None else total + term
    return ad.scale(total, 1.0 / len(A_S))


def transformer_layer_loss(student: ForwardTrace, teacher: ForwardTrace, mapping: MappingState,
                           proj: ProjectionParams, cfg: LossConfig, k: int = 0):
    """Stage-1 objective: embedding loss plus alpha-weighted hidden/attention terms per layer.

    Returns ``(total, breakdown)``. ``loss_hidn`` and ``loss_attn`` in the
    breakdown are the weighted contributions; the ``*_raw`` keys are unweighted.
    """
    M = len(student.hidden_states)
    if M != mapping.partition.n_student or len(teacher.hidden_states) != mapping.partition.n_teacher:
        raise ConfigError(
            f"traces have {M} student / {len(teacher.hidden_states)} teacher layers, "
            f"mapping expects {mapping.partition.n_student} / {mapping.partition.n_teacher}"
        )
    w_h = 2.0 * cfg.alpha
    w_a = 2.0 * (1.0 - cfg.alpha)
    embd = embedding_loss(student.embedding_output, teacher.embedding_output, proj.W_e)
    total = embd
    hid_w = attn_w = hid_raw = attn_raw = 0.0
    use_probs = cfg.attention_kind == "kl" and cfg.attention_space == "probs"
    for m in range(1, M + 1):
        v = mapping.weights_for(m, k)
        target_h = aggregate_hidden(teacher, mapping.partition, m, v)
        target_a = aggregate_attention(teacher, mapping.partition, m, v,
                                       n_heads=len(student.attention_logits[m - 1]),
                                       space="probs" if use_probs else "logits")
        hid = hidden_loss(student.hidden_states[m - 1], target_h, proj.W_h)
        if cfg.attention_kind == "mse":
            att = attention_loss_mse(student.attention_logits[m - 1], target_a)
        else:
            att = attention_loss_kl(student.attention_logits[m - 1], target_a, cfg.kl_epsilon,
                                    cfg.kl_direction, teacher_probs=use_probs)
        wh_term = ad.scale(hid, w_h)
        wa_term = ad.scale(att, w_a)
        total = total + (wh_term + wa_term)
        hid_w += float(wh_term.data)
        attn_w += float(wa_term.data)
        hid_raw += float(hid.data)
        attn_raw += float(att.data)
    breakdown = {
        "loss_total": float(total.data),
        "loss_embd": float(embd.data),
        "loss_hidn": hid_w,
        "loss_attn": attn_w,
        "loss_hidn_raw": hid_raw,
        "loss_attn_raw": attn_raw,
    }
    return total, breakdown


def prediction_loss(student_logits: Tensor, teacher_logits: Tensor, task_kind: str,
                    temperature: float = 1.0) -> Tensor:
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError(f"prediction loss: shapes {student_logits.shape} and {teacher_logits.shape} differ")
    if task_kind == "classification":
        if student_logits.ndim != 2 or student_logits.shape[1] < 2:
            raise ShapeError(f"classification logits must be [batch, classes>=2], got {student_logits.shape}")
        t = 1.0 / temperature
        target = ad.softmax_rows(ad.scale(teacher_logits, t))
        log_s = ad.log_softmax_rows(ad.scale(student_logits, t))
        return ad.scale(ad.mean(ad.tensor_sum(target * log_s, axis=-1)), -1.0)
    if task_kind == "regression":
        if student_logits.shape[-1] != 1:
            raise ShapeError(f"regression head must emit one score, got {student_logits.shape}")
        return mse(student_logits, teacher_logits)
    raise ValueError(f"unknown task kind {task_kind!r}")


def uses_theta(mapping: MappingState) -> bool:
    return mapping.kind is MappingKind.LEARNABLE
