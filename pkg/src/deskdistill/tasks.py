"""Synthetic classification / regression tasks, metrics, and batching.

Token layout shared by both tasks: 0 is the leading summary token, 1 the
segment separator, 2 and 3 the open/close brackets; the rest are content.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ShapeError, UndefinedMetricError

CLS, SEP, OPEN, CLOSE = 0, 1, 2, 3
FIRST_CONTENT = 4

TASKS = {"cola-like": "classification", "stsb-like": "regression"}


@dataclass(frozen=True)
class TaskSpec:
    kind: str  # "classification" | "regression"
    vocab_size: int = 32
    seq_len: int = 16
    train_size: int = 1000
    dev_size: int = 500
    seed: int = 42
    data_fraction: float = 1.0
    max_depth: int = 4

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ConfigError(f"data_fraction must lie in (0, 1], got {self.data_fraction}")
        if self.vocab_size < FIRST_CONTENT + 2:
            raise ConfigError(f"vocab_size must be at least {FIRST_CONTENT + 2}")
        if self.kind == "regression" and self.seq_len % 2:
            raise ConfigError("regression seq_len must be even ([CLS] a [SEP] b with equal halves)")


def task_spec(name: str, **overrides) -> TaskSpec:
    if name not in TASKS:
        raise ConfigError(f"unknown task {name!r}; valid tasks: {', '.join(TASKS)}")
    base = {"classification": dict(seq_len=16), "regression": dict(seq_len=20)}[TASKS[name]]
    base.update({k: v for k, v in overrides.items() if v is not None})
    return TaskSpec(kind=TASKS[name], **base)


@dataclass(frozen=True)
class Example:
    tokens: tuple[int, ...]
    label: float


@dataclass
class Split:
    kind: str
    vocab_size: int
    tokens: np.ndarray  # [n, seq] int64
    labels: np.ndarray  # [n] int64 for classification, float64 for regression
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]

    def examples(self) -> list[Example]:
        return [Example(tuple(int(t) for t in row), float(y)) for row, y in zip(self.tokens, self.labels)]

    def subset(self, idx) -> Split:
        return Split(self.kind, self.vocab_size, self.tokens[idx], self.labels[idx], dict(self.meta))

    @classmethod
    def from_examples(cls, kind, vocab_size, examples) -> Split:
        tokens = np.array([e.tokens for e in examples], dtype=np.int64)
        dtype = np.int64 if kind == "classification" else np.float64
        labels = np.array([e.label for e in examples], dtype=dtype)
        return cls(kind, vocab_size, tokens, labels)


# --------------------------------------------------------------- classification

def is_well_formed(tokens, max_depth: int = 4) -> bool:
    """Brackets balance, never close below zero, and nest at most ``max_depth`` deep."""
    depth = 0
    for t in tokens:
        if t == OPEN:
            depth += 1
            if depth > max_depth:
                return False
        elif t == CLOSE:
            depth -= 1
            if depth < 0:
                return False
    return depth == 0


def _random_dyck(rng, pairs: int, max_depth: int) -> list[int]:
    out, depth, opens = [], 0, 0
    while len(out) < 2 * pairs:
        can_open = opens < pairs and depth < max_depth
        can_close = depth > 0
        if can_open and (not can_close or rng.random() < 0.5):
            out.append(OPEN)
            depth += 1
            opens += 1
        else:
            out.append(CLOSE)
            depth -= 1
    return out


def _classification_candidate(rng, spec: TaskSpec, positive: bool) -> list[int]:
    body_len = spec.seq_len - 1
    pairs = int(rng.integers(1, body_len // 2 + 1))
    brackets = _random_dyck(rng, pairs, spec.max_depth)
    if not positive:
        mode = rng.integers(3)
        if mode == 0:  # flip one bracket
            i = int(rng.integers(len(brackets)))
            brackets[i] = OPEN + CLOSE - brackets[i]
        elif mode == 1:  # reverse the order, usually closing before opening
            brackets = brackets[::-1]
        else:  # shuffle the brackets
            rng.shuffle(brackets)
    body = list(rng.integers(FIRST_CONTENT, spec.vocab_size, size=body_len))
    slots = np.sort(rng.choice(body_len, size=len(brackets), replace=False))
    for s, b in zip(slots, brackets):
        body[s] = b
    return [CLS] + [int(t) for t in body]


def _generate_classification(rng, spec: TaskSpec, n: int, exclude: set) -> list[Example]:
    out, seen = [], set(exclude)
    want = [1] * (n - n // 2) + [0] * (n // 2)
    rng.shuffle(want)
    for label in want:
        while True:
            toks = _classification_candidate(rng, spec, positive=bool(label))
            if int(is_well_formed(toks, spec.max_depth)) != label:
                continue
            key = tuple(toks)
            if key in seen:
                continue
            seen.add(key)
            out.append(Example(key, float(label)))
            break
    return out


# ------------------------------------------------------------------ regression

def overlap_score(seg_a, seg_b) -> float:
    """Multiset overlap of two equal-length segments, normalized to [0, 1]."""
    common = sum((Counter(seg_a) & Counter(seg_b)).values())
    return common / max(len(seg_a), len(seg_b))


def _regression_candidate(rng, spec: TaskSpec) -> list[int]:
    half = (spec.seq_len - 2) // 2
    content = np.arange(FIRST_CONTENT, spec.vocab_size)
    a = list(rng.choice(content, size=half, replace=True))
    shared = int(rng.integers(half + 1))
    kept = [a[i] for i in rng.choice(half, size=shared, replace=False)]
    fresh_pool = np.setdiff1d(content, a)
    fresh = list(rng.choice(fresh_pool, size=half - shared, replace=True)) if half > shared else []
    b = kept + fresh
    rng.shuffle(b)
    return [CLS] + [int(t) for t in a] + [SEP] + [int(t) for t in b]


def _generate_regression(rng, spec: TaskSpec, n: int, exclude: set) -> list[Example]:
    half = (spec.seq_len - 2) // 2
    out, seen = [], set(exclude)
    while len(out) < n:
        toks = _regression_candidate(rng, spec)
        key = tuple(toks)
        if key in seen:
            continue
        seen.add(key)
        out.append(Example(key, overlap_score(toks[1:1 + half], toks[2 + half:])))
    return out


# ------------------------------------------------------------------ generation

def _generate(spec: TaskSpec, generator) -> tuple[Split, Split]:
    train_ex = generator(np.random.default_rng([spec.seed, 0]), spec, spec.train_size, set())
    dev_ex = generator(np.random.default_rng([spec.seed, 1]), spec, spec.dev_size,
                       {e.tokens for e in train_ex})
    train = Split.from_examples(spec.kind, spec.vocab_size, train_ex)
    dev = Split.from_examples(spec.kind, spec.vocab_size, dev_ex)
    return apply_data_fraction(train, spec.data_fraction, spec.seed), dev


def generate_classification_task(spec: TaskSpec) -> tuple[Split, Split]:
    if spec.kind != "classification":
        raise ConfigError(f"expected a classification spec, got {spec.kind}")
    return _generate(spec, _generate_classification)


def generate_regression_task(spec: TaskSpec) -> tuple[Split, Split]:
    if spec.kind != "regression":
        raise ConfigError(f"expected a regression spec, got {spec.kind}")
    return _generate(spec, _generate_regression)


def generate_task(spec: TaskSpec) -> tuple[Split, Split]:
    if spec.kind == "classification":
        return generate_classification_task(spec)
    return generate_regression_task(spec)


def apply_data_fraction(train: Split, fraction: float, seed: int) -> Split:
    """Keep a ceil(n * fraction) prefix of a seeded permutation of the train split."""
    if fraction == 1.0:
        return train
    n = len(train)
    keep = math.ceil(n * fraction)
    order = np.random.default_rng([seed, 2]).permutation(n)
    sub = train.subset(order[:keep])
    sub.meta["data_fraction"] = fraction
    return sub


def batch_iterator(split: Split, batch_size: int, shuffle_seed: int | None, epoch: int = 0):
    """Yield ``(tokens, labels)`` batches; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    n = len(split)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield split.tokens[idx], split.labels[idx]


# --------------------------------------------------------------------- metrics

def matthews_corrcoef(predictions, labels) -> float:
    p = np.asarray(predictions).astype(bool)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape:
        raise ShapeError(f"predictions {p.shape} and labels {y.shape} differ in length")
    tp = float(np.sum(p & y))
    tn = float(np.sum(~p & ~y))
    fp = float(np.sum(p & ~y))
    fn = float(np.sum(~p & y))
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


def pearson_corr(predictions, labels) -> float:
    x = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ShapeError(f"predictions {x.shape} and labels {y.shape} differ in length")
    if len(x) < 2:
        raise UndefinedMetricError("Pearson correlation needs at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedMetricError("Pearson correlation is undefined for a constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


# ------------------------------------------------------------------- dump/load

def dump_split(split: Split, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{split.kind},{split.vocab_size},{split.seq_len},{len(split)}\n")
        for row, label in zip(split.tokens, split.labels):
            lab = str(int(label)) if split.kind == "classification" else repr(float(label))
            fh.write(",".join(str(int(t)) for t in row) + "\t" + lab + "\n")


def load_split(path) -> Split:
    with open(path, encoding="utf-8") as fh:
        kind, vocab, seq_len, count = fh.readline().strip().split(",")
        examples = []
        for line in fh:
            if not line.strip():
                continue
            toks, label = line.rstrip("\n").split("\t")
            examples.append(Example(tuple(int(t) for t in toks.split(",")), float(label)))
    if len(examples) != int(count):
        raise ValueError(f"{path}: header promises {count} examples, found {len(examples)}")
    split = Split.from_examples(kind, int(vocab), examples)
    if examples and split.seq_len != int(seq_len):
        raise ValueError(f"{path}: header seq_len {seq_len} does not match rows ({split.seq_len})")
    return split
