"""Finite-difference audit of the stage-1 objective on a tiny teacher/student pair."""
from __future__ import annotations

import itertools

import numpy as np

from . import autodiff as ad
from .losses import LossConfig, ProjectionParams, transformer_layer_loss
from .mapping import BlockPartition, MappingKind, MappingState
from .model import ModelConfig, forward_with_trace, init_params

TOLERANCE = 1e-4
ATTN_KINDS = ("mse", "kl")
MAP_KINDS = tuple(k.value for k in MappingKind)
ALPHAS = (0.0, 0.5, 1.0)

TINY_TEACHER = ModelConfig(n_layers=6, d_model=8, n_heads=2, d_ff=16, vocab_size=7, max_seq_len=5, n_outputs=2)
TINY_STUDENT = ModelConfig(n_layers=2, d_model=4, n_heads=2, d_ff=8, vocab_size=7, max_seq_len=5, n_outputs=2)


def group_of(name: str) -> str:
    if name.startswith("proj."):
        return name.split(".", 1)[1]
    if name == "theta":
        return "theta"
    if name.startswith("embed."):
        return "student.embedding"
    part = name.split(".", 1)[1]
    if part.startswith("attn."):
        return "student.attention"
    if part.startswith("ff"):
        return "student.feedforward"
    return "student.layernorm"


def _jitter(params, rng):
    # move LN gains/biases off 1/0 so no coordinate sits at a symmetric special case
    for name, t in params.tensors.items():
        if name.endswith(".gain"):
            t.data = t.data + rng.uniform(-0.2, 0.2, t.shape)
        elif name.endswith(".bias"):
            t.data = t.data + rng.uniform(-0.2, 0.2, t.shape)
    return params


def stage1_problem(attn: str, kind: str, alpha: float, seed: int = 0, map_init: str = "base-like"):
    """Build (loss closure, params, names) for one variant of the stage-1 loss."""
    rng = np.random.default_rng(seed)
    teacher = _jitter(init_params(TINY_TEACHER, seed), rng)
    student = _jitter(init_params(TINY_STUDENT, seed + 1), rng)
    proj = ProjectionParams.init(TINY_STUDENT.d_model, TINY_TEACHER.d_model, seed)
    mapping = MappingState(kind, BlockPartition(6, 2), init=map_init, seed=seed)
    if mapping.theta is not None:
        mapping.theta.data = mapping.theta.data + rng.uniform(-0.3, 0.3, mapping.theta.shape)
    cfg = LossConfig(attention_kind=attn, alpha=alpha)
    tokens = rng.integers(0, TINY_TEACHER.vocab_size, size=(3, 5))
    with ad.no_grad():
        t_trace = forward_with_trace(teacher, tokens)

    def f():
        s_trace = forward_with_trace(student, tokens)
        return transformer_layer_loss(s_trace, t_trace, mapping, proj, cfg, k=0)[0]

    named = {n: t for n, t in student.tensors.items() if not n.startswith("head.")}
    named.update(proj.tensors())
    if mapping.theta is not None:
        named["theta"] = mapping.theta
    return f, list(named.values()), list(named)


def check_variant(attn: str, kind: str, alpha: float, step: float = 1e-5, max_coords: int = 6,
                  seed: int = 0, corrupt: bool = False) -> dict[str, dict]:
    """Max relative error per parameter group for one (loss, mapping, alpha) variant."""
    f, params, names = stage1_problem(attn, kind, alpha, seed)
    reports = ad.grad_check_report(f, params, step=step, max_coords=max_coords, seed=seed,
                                   names=names, corrupt=corrupt)
    groups: dict[str, dict] = {}
    for r in reports:
        g = group_of(r["name"])
        if g not in groups or r["max_rel_error"] > groups[g]["max_rel_error"]:
            groups[g] = r
    return groups


def run_suite(attns=ATTN_KINDS, kinds=MAP_KINDS, alphas=ALPHAS, corrupt: bool = False, **kwargs):
    """Yield ((attn, kind, alpha), groups) for every requested combination."""
    for i, (attn, kind, alpha) in enumerate(itertools.product(attns, kinds, alphas)):
        yield (attn, kind, alpha), check_variant(attn, kind, alpha, corrupt=corrupt and i == 0, **kwargs)
