"""Miniature post-LN transformer encoder with a full forward trace."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    n_outputs: int = 2  # class count, or 1 for a regression head

    def __post_init__(self):
        for key in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len", "n_outputs"):
            value = getattr(self, key)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{key} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model < 2:
            raise ConfigError("d_model must be at least 2 for layer norm")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


def check_compatible(teacher: ModelConfig, student: ModelConfig) -> int:
    """Validate a teacher/student pair and return the block size N/M."""
    if teacher.n_layers % student.n_layers:
        raise ConfigError(
            f"teacher layers ({teacher.n_layers}) not divisible by student layers ({student.n_layers})"
        )
    if teacher.n_heads != student.n_heads:
        raise ConfigError(f"head counts differ: teacher {teacher.n_heads}, student {student.n_heads}")
    if teacher.max_seq_len != student.max_seq_len or teacher.vocab_size != student.vocab_size:
        raise ConfigError("teacher and student must share vocabulary and sequence length")
    if teacher.n_outputs != student.n_outputs:
        raise ConfigError("teacher and student heads disagree on output count")
    return teacher.n_layers // student.n_layers


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {
        "embed.token": (cfg.vocab_size, d),
        "embed.position": (cfg.max_seq_len, d),
        "embed.ln.gain": (d,),
        "embed.ln.bias": (d,),
    }
    for l in range(1, cfg.n_layers + 1):
        p = f"layer{l}."
        # No key bias: it shifts every score in a row equally and cancels under softmax.
        shapes.update({
            p + "attn.q.weight": (d, d), p + "attn.q.bias": (d,),
            p + "attn.k.weight": (d, d),
            p + "attn.v.weight": (d, d), p + "attn.v.bias": (d,),
            p + "attn.o.weight": (d, d), p + "attn.o.bias": (d,),
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "ff1.weight": (d, f), p + "ff1.bias": (f,),
            p + "ff2.weight": (f, d), p + "ff2.bias": (d,),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
        })
    shapes["head.weight"] = (d, cfg.n_outputs)
    shapes["head.bias"] = (cfg.n_outputs,)
    return shapes


@dataclass
class EncoderParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def parameters(self, include_head: bool = True) -> list[Tensor]:
        return [t for n, t in self.tensors.items() if include_head or not n.startswith("head.")]

    def head_parameters(self) -> list[Tensor]:
        return [t for n, t in self.tensors.items() if n.startswith("head.")]

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def clone(self) -> EncoderParams:
        return EncoderParams(
            self.config,
            {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in self.tensors.items()},
        )

    def digest(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for n, t in self.tensors.items():
            if n.startswith(prefix):
                h.update(n.encode())
                h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors.values())


def init_params(config: ModelConfig, seed: int) -> EncoderParams:
    """Seeded init: weights U(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases 0, LN gains 1."""
    if not isinstance(config, ModelConfig):
        raise ConfigError(f"expected ModelConfig, got {type(config).__name__}")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            # embedding tables are indexed by row, so their fan-in is the width
            fan_in = shape[-1] if name.startswith("embed.") else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return EncoderParams(config, tensors)


@dataclass
class ForwardTrace:
    embedding_output: Tensor
    hidden_states: list[Tensor]
    attention_logits: list[list[Tensor]]  # [layer][head] -> [batch, seq, seq], pre-softmax
    logits: Tensor


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    ids = np.asarray(tokens)
    if ids.ndim != 2:
        raise ShapeError(f"tokens must be a [batch, seq] matrix, got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"token ids must be integers, got dtype {ids.dtype}")
    if ids.shape[1] > config.max_seq_len:
        raise ShapeError(f"sequence length {ids.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    bad = np.argwhere((ids < 0) | (ids >= config.vocab_size))
    if len(bad):
        b, s = bad[0]
        raise ValueError(
            f"token id {ids[b, s]} at position (batch={b}, seq={s}) is outside [0, {config.vocab_size})"
        )
    return ids.astype(np.int64)


def forward_with_trace(params: EncoderParams, tokens) -> ForwardTrace:
    cfg = params.config
    ids = _check_tokens(cfg, tokens)
    batch, seq = ids.shape
    h, hd = cfg.n_heads, cfg.head_dim
    P = params.tensors

    x = ad.embedding(P["embed.token"], ids) + ad.take(P["embed.position"], slice(0, seq))
    x = ad.layer_norm(x, P["embed.ln.gain"], P["embed.ln.bias"])
    embedding_output = x

    hidden, attention = [], []
    inv_sqrt = 1.0 / math.sqrt(hd)
    for l in range(1, cfg.n_layers + 1):
        p = f"layer{l}."

        def heads(t):
            return ad.transpose(ad.reshape(t, (batch, seq, h, hd)), (0, 2, 1, 3))

        q = heads(x @ P[p + "attn.q.weight"] + P[p + "attn.q.bias"])
        k = heads(x @ P[p + "attn.k.weight"])
        v = heads(x @ P[p + "attn.v.weight"] + P[p + "attn.v.bias"])
        scores = ad.scale(q @ ad.swapaxes(k, -1, -2), inv_sqrt)  # [b, h, s, s]
        attention.append([ad.take(scores, (slice(None), i)) for i in range(h)])
        ctx = ad.softmax_rows(scores) @ v
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (batch, seq, cfg.d_model))
        attn_out = ctx @ P[p + "attn.o.weight"] + P[p + "attn.o.bias"]
        x = ad.layer_norm(x + attn_out, P[p + "ln1.gain"], P[p + "ln1.bias"])
        ff = ad.gelu(x @ P[p + "ff1.weight"] + P[p + "ff1.bias"]) @ P[p + "ff2.weight"] + P[p + "ff2.bias"]
        x = ad.layer_norm(x + ff, P[p + "ln2.gain"], P[p + "ln2.bias"])
        hidden.append(x)

    pooled = ad.take(x, (slice(None), 0))
    logits = pooled @ P["head.weight"] + P["head.bias"]
    return ForwardTrace(embedding_output, hidden, attention, logits)


def predict(params: EncoderParams, tokens) -> Tensor:
    return forward_with_trace(params, tokens).logits
