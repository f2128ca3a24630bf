import struct

import numpy as np
import pytest

from deskdistill import autodiff as ad
from deskdistill.checkpoint import MAGIC, load_params, read_tensors, save_params, write_tensors
from deskdistill.errors import ConfigError, ShapeError
from deskdistill.model import ModelConfig, check_compatible, forward_with_trace, init_params, predict

SMALL = ModelConfig(n_layers=2, d_model=16, n_heads=4, d_ff=32, vocab_size=32, max_seq_len=16, n_outputs=2)


def tally_params(n_layers, d, d_ff, vocab, seq, n_out):
    # independent count: embeddings + LN, then per layer q(w,b) k(w) v(w,b) o(w,b), 2 LNs, 2 FF layers, then head
    embed = vocab * d + seq * d + 2 * d
    attn = (d * d + d) + (d * d) + (d * d + d) + (d * d + d)
    ff = (d * d_ff + d_ff) + (d_ff * d + d)
    norms = 2 * (2 * d)
    head = d * n_out + n_out
    return embed + n_layers * (attn + ff + norms) + head


def tokens(batch=2, seq=8, seed=0):
    return np.random.default_rng(seed).integers(0, 32, size=(batch, seq))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(2, 15, 4, 32, 32, 16)
    with pytest.raises(ConfigError):
        ModelConfig(0, 16, 4, 32, 32, 16)


def test_teacher_student_compatibility():
    teacher = ModelConfig(6, 32, 4, 64, 32, 16)
    assert check_compatible(teacher, SMALL) == 3
    with pytest.raises(ConfigError):
        check_compatible(ModelConfig(5, 32, 4, 64, 32, 16), SMALL)
    with pytest.raises(ConfigError):
        check_compatible(ModelConfig(6, 32, 2, 64, 32, 16), SMALL)


def test_init_is_deterministic():
    a, b = init_params(SMALL, 7), init_params(SMALL, 7)
    for name in a.names():
        assert np.array_equal(a[name].data, b[name].data)
    assert a.digest() == b.digest()
    assert init_params(SMALL, 8).digest() != a.digest()


def test_layer_norm_gains_start_at_one():
    p = init_params(SMALL, 0)
    gains = [t for n, t in p.tensors.items() if n.endswith(".gain")]
    assert gains and all(np.all(g.data == 1.0) for g in gains)


def test_weights_within_fan_in_bound():
    p = init_params(SMALL, 0)
    w = p["layer1.ff1.weight"].data
    assert np.all(np.abs(w) <= 1 / np.sqrt(16))


def test_parameter_count_matches_tally():
    assert init_params(SMALL, 0).count() == tally_params(2, 16, 32, 32, 16, 2)


def test_trace_shapes():
    trace = forward_with_trace(init_params(SMALL, 0), tokens())
    assert trace.embedding_output.shape == (2, 8, 16)
    assert len(trace.hidden_states) == 2
    assert all(h.shape == (2, 8, 16) for h in trace.hidden_states)
    assert len(trace.attention_logits) == 2 and all(len(layer) == 4 for layer in trace.attention_logits)
    assert all(a.shape == (2, 8, 8) for layer in trace.attention_logits for a in layer)
    assert trace.logits.shape == (2, 2)


def test_attention_probabilities_normalized():
    trace = forward_with_trace(init_params(SMALL, 0), tokens())
    for layer in trace.attention_logits:
        for a in layer:
            rows = ad.softmax_rows(a).data.sum(axis=-1)
            assert np.max(np.abs(rows - 1.0)) < 1e-12


def test_batch_permutation_equivariance():
    params = init_params(SMALL, 0)
    x = tokens(batch=5)
    perm = np.array([3, 0, 4, 1, 2])
    a = forward_with_trace(params, x)
    b = forward_with_trace(params, x[perm])
    # BLAS may sum in a different order per batch layout, so allow a few ulps
    assert np.allclose(a.hidden_states[-1].data[perm], b.hidden_states[-1].data, rtol=0, atol=1e-12)
    assert np.allclose(a.attention_logits[1][2].data[perm], b.attention_logits[1][2].data, rtol=0, atol=1e-12)
    assert np.allclose(a.logits.data[perm], b.logits.data, rtol=0, atol=1e-12)


def test_forward_is_deterministic():
    params = init_params(SMALL, 0)
    x = tokens()
    a, b = forward_with_trace(params, x), forward_with_trace(params, x)
    assert np.array_equal(a.logits.data, b.logits.data)
    assert np.array_equal(a.attention_logits[0][0].data, b.attention_logits[0][0].data)


def test_predict_equals_trace_logits():
    params = init_params(SMALL, 0)
    x = tokens()
    assert np.array_equal(predict(params, x).data, forward_with_trace(params, x).logits.data)


def test_regression_head_shape():
    cfg = ModelConfig(2, 16, 4, 32, 32, 16, n_outputs=1)
    assert predict(init_params(cfg, 0), tokens()).shape == (2, 1)


def test_out_of_range_token_reports_position():
    x = tokens()
    x[1, 5] = 99
    with pytest.raises(ValueError, match=r"batch=1, seq=5"):
        forward_with_trace(init_params(SMALL, 0), x)


def test_sequence_longer_than_max_rejected():
    with pytest.raises(ShapeError):
        forward_with_trace(init_params(SMALL, 0), tokens(seq=17))


def test_teacher_trace_under_no_grad_has_no_tape():
    params = init_params(SMALL, 0)
    with ad.no_grad():
        trace = forward_with_trace(params, tokens())
    assert not trace.logits.requires_grad
    assert not any(h.requires_grad for h in trace.hidden_states)


def test_model_gradient_check():
    cfg = ModelConfig(1, 4, 2, 8, 6, 4, n_outputs=2)
    params = init_params(cfg, 3)
    x = np.array([[0, 1, 2, 5], [3, 3, 4, 1]])
    f = lambda: ad.tensor_sum(ad.square(predict(params, x)))
    assert ad.grad_check(f, params.parameters(), max_coords=None) < 1e-4


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(tmp_path):
    params = init_params(SMALL, 5)
    path = tmp_path / "m.ckpt"
    save_params(params, path, {"task": "cola-like"})
    loaded, meta = load_params(path)
    assert loaded.config == SMALL and meta["task"] == "cola-like"
    assert loaded.digest() == params.digest()


def test_checkpoint_byte_layout(tmp_path):
    path = tmp_path / "t.ckpt"
    write_tensors(path, {"a": np.array([[1.0, 2.0]]), "b": np.array([-3.5])})
    raw = path.read_bytes()
    assert raw[:4] == MAGIC == b"MDST"
    version, hlen = struct.unpack_from("<HI", raw, 4)
    assert version == 1
    import json

    header = json.loads(raw[10:10 + hlen].decode("utf-8"))
    assert header == {"a": {"shape": [1, 2], "offset": 0}, "b": {"shape": [1], "offset": 16}}
    data = raw[10 + hlen:]
    assert struct.unpack("<3d", data) == (1.0, 2.0, -3.5)
    arrays, meta = read_tensors(path)
    assert meta is None and arrays["b"].tolist() == [-3.5]


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(ValueError):
        read_tensors(path)
