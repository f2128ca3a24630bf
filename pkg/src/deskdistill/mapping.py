"""Block-based teacher-to-student layer mapping.

Teacher layers are split into M contiguous blocks of N/M layers. Student
layer m learns from a convex combination of the layers of block m, with the
weight vector chosen by one of four strategies (base, random, mean,
learnable).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, OrderingError, ShapeError
from .model import ForwardTrace

DEFAULT_MAP_LR = 5e-5


class MappingKind(str, Enum):
    BASE = "base"
    RANDOM = "random"
    MEAN = "mean"
    LEARNABLE = "learnable"


LEARNABLE_INITS = {
    "uniform": lambda size: np.zeros(size),
    # softmax(-1, ..., -1, 1): closest finite start to the last-layer one-hot
    "base-like": lambda size: np.concatenate([-np.ones(size - 1), [1.0]]),
}


@dataclass(frozen=True)
class BlockPartition:
    n_teacher: int
    n_student: int

    def __post_init__(self):
        if self.n_student < 1 or self.n_teacher < 1 or self.n_teacher % self.n_student:
            raise ConfigError(
                f"teacher layers ({self.n_teacher}) must be a positive multiple of student layers ({self.n_student})"
            )

    @property
    def block_size(self) -> int:
        return self.n_teacher // self.n_student

    def block(self, m: int) -> list[int]:
        """1-based teacher layer indices of block ``m`` (1-based)."""
        self._check(m)
        b = self.block_size
        return list(range((m - 1) * b + 1, m * b + 1))

    def _check(self, m):
        if not 1 <= m <= self.n_student:
            raise ValueError(f"student layer {m} outside 1..{self.n_student}")


class MappingState:
    """Mapping kind, partition, and (for learnable maps) the taped logits theta."""

    def __init__(self, kind, partition: BlockPartition, init: str = "uniform",
                 map_lr: float = DEFAULT_MAP_LR, seed: int = 42, attention_space: str = "logits"):
        self.kind = MappingKind(kind)
        self.partition = partition
        self.init = init
        self.map_lr = map_lr
        self.seed = seed
        if attention_space not in ("logits", "probs"):
            raise ConfigError(f"attention_space must be 'logits' or 'probs', got {attention_space!r}")
        self.attention_space = attention_space
        self.theta: Tensor | None = None
        self.trajectory: list[tuple[int, int, int, float]] = []
        self._csv = None
        self._csv_file = None
        if self.kind is MappingKind.LEARNABLE:
            if init not in LEARNABLE_INITS:
                raise ConfigError(f"unknown learnable init {init!r}; choose from {sorted(LEARNABLE_INITS)}")
            row = LEARNABLE_INITS[init](partition.block_size)
            self.theta = Tensor(np.tile(row, (partition.n_student, 1)), requires_grad=True, name="theta")

    @property
    def block_size(self) -> int:
        return self.partition.block_size

    def weights_for(self, m: int, k: int = 0) -> Tensor:
        self.partition._check(m)
        size = self.block_size
        if self.kind is MappingKind.BASE:
            v = np.zeros(size)
            v[-1] = 1.0
            return Tensor(v)
        if self.kind is MappingKind.MEAN:
            return Tensor(np.full(size, 1.0 / size))
        if self.kind is MappingKind.RANDOM:
            # stateless draw keyed on (seed, step, layer): reproducible, independent across m
            j = int(np.random.default_rng([self.seed, k, m]).integers(size))
            v = np.zeros(size)
            v[j] = 1.0
            return Tensor(v)
        return ad.softmax_rows(ad.take(self.theta, m - 1))

    def current_weights(self, k: int = 0) -> np.ndarray:
        with ad.no_grad():
            return np.stack([self.weights_for(m, k).data for m in range(1, self.partition.n_student + 1)])

    # ------------------------------------------------------------ learnable updates

    def open_trajectory(self, path) -> None:
        self._csv_file = open(path, "w", newline="")
        self._csv = csv.writer(self._csv_file)
        self._csv.writerow(["step", "student_layer", "block_index", "weight"])
        self._csv_file.flush()

    def close_trajectory(self) -> None:
        if self._csv_file is not None:
            self._csv_file.close()
            self._csv_file = self._csv = None

    def log_weights(self, k: int) -> None:
        w = self.current_weights(k)
        rows = [(k, m + 1, j + 1, float(w[m, j])) for m in range(w.shape[0]) for j in range(w.shape[1])]
        self.trajectory.extend(rows)
        if self._csv is not None:
            self._csv.writerows((s, m, j, repr(x)) for s, m, j, x in rows)
            self._csv_file.flush()

    def map_step(self, optimizer, k: int) -> None:
        """Log the weights used at step ``k``, then update theta from its gradient."""
        if self.kind is not MappingKind.LEARNABLE:
            raise ConfigError("map_step applies to learnable mappings only")
        if self.theta.grad is None:
            raise OrderingError("theta has no gradient; call backward before map_step")
        self.log_weights(k)
        optimizer.step()
        self.theta.grad = None


def aggregate_hidden(trace: ForwardTrace, partition: BlockPartition, m: int, v: Tensor) -> Tensor:
    layers = partition.block(m)
    if v.shape != (len(layers),):
        raise ShapeError(f"weight vector shape {v.shape} does not match block size {len(layers)}")
    if len(trace.hidden_states) < layers[-1]:
        raise ShapeError(f"trace has {len(trace.hidden_states)} hidden states, block needs {layers[-1]}")
    out = None
    for j, layer in enumerate(layers):
        term = ad.take(v, j) * trace.hidden_states[layer - 1]
        out = term if out is None else out + term
    return out


def aggregate_attention(trace: ForwardTrace, partition: BlockPartition, m: int, v: Tensor,
                        n_heads: int | None = None, space: str = "logits") -> list[Tensor]:
    """Per-head weighted sum over the block; ``space="probs"`` softmaxes each layer first."""
    layers = partition.block(m)
    if v.shape != (len(layers),):
        raise ShapeError(f"weight vector shape {v.shape} does not match block size {len(layers)}")
    heads = len(trace.attention_logits[layers[0] - 1])
    if n_heads is not None and heads != n_heads:
        raise ConfigError(f"teacher has {heads} heads, student expects {n_heads}")
    out = []
    for i in range(heads):
        acc = None
        for j, layer in enumerate(layers):
            a = trace.attention_logits[layer - 1][i]
            if space == "probs":
                a = ad.softmax_rows(a)
            term = ad.take(v, j) * a
            acc = term if acc is None else acc + term
        out.append(acc)
    return out
