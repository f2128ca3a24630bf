import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskdistill import autodiff as ad
from deskdistill.autodiff import Tensor
from deskdistill.errors import ConfigError, OrderingError, ShapeError
from deskdistill.gradsuite import check_variant
from deskdistill.mapping import (
    BlockPartition,
    MappingKind,
    MappingState,
    aggregate_attention,
    aggregate_hidden,
)
from deskdistill.model import ForwardTrace
from deskdistill.optim import Adam

PART = BlockPartition(6, 2)


def fake_trace(seed=0, n_layers=6, heads=2, batch=2, seq=3, d=4):
    rng = np.random.default_rng(seed)
    hidden = [Tensor(rng.normal(size=(batch, seq, d))) for _ in range(n_layers)]
    attn = [[Tensor(rng.normal(size=(batch, seq, seq))) for _ in range(heads)] for _ in range(n_layers)]
    return ForwardTrace(Tensor(rng.normal(size=(batch, seq, d))), hidden, attn, Tensor(np.zeros((batch, 2))))


def naive_weighted_sum(arrays, v):
    # explicit element loop, no vectorized arithmetic
    out = np.zeros_like(arrays[0])
    for idx in np.ndindex(out.shape):
        total = 0.0
        for j, a in enumerate(arrays):
            total += v[j] * a[idx]
        out[idx] = total
    return out


# ---------------------------------------------------------------- partition

def test_blocks_are_disjoint_and_ordered():
    assert PART.block(1) == [1, 2, 3] and PART.block(2) == [4, 5, 6]
    assert BlockPartition(12, 4).block(4) == [10, 11, 12]


def test_non_divisible_partition_rejected():
    with pytest.raises(ConfigError):
        BlockPartition(5, 2)


def test_out_of_range_layer_rejected():
    with pytest.raises(ValueError):
        MappingState("base", PART).weights_for(3)
    with pytest.raises(ValueError):
        MappingState("mean", PART).weights_for(0)


# ---------------------------------------------------------------- weights_for

def test_base_selects_last_layer_of_block():
    v = MappingState("base", PART).weights_for(1).data
    assert v.tolist() == [0.0, 0.0, 1.0]


def test_mean_is_uniform():
    assert np.allclose(MappingState("mean", PART).weights_for(2).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_learnable_inits():
    uni = MappingState("learnable", PART, init="uniform")
    assert np.allclose(uni.weights_for(1).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    base_like = MappingState("learnable", PART, init="base-like")
    assert np.allclose(base_like.weights_for(2).data, [0.10651, 0.10651, 0.78698], atol=1e-5)


def test_unknown_init_rejected():
    with pytest.raises(ConfigError):
        MappingState("learnable", PART, init="zeros")


def test_learnable_weights_are_taped():
    state = MappingState("learnable", PART)
    v = state.weights_for(1)
    ad.backward(ad.tensor_sum(v * Tensor([1.0, 2.0, 3.0])))
    assert state.theta.grad is not None
    assert np.all(state.theta.grad[1] == 0) and np.any(state.theta.grad[0] != 0)


def test_weights_are_probability_vectors_over_many_calls():
    rng = np.random.default_rng(0)
    states = [MappingState(kind, BlockPartition(12, 4), seed=3) for kind in MappingKind]
    learn = states[-1]
    worst = 0.0
    for i in range(10_000):
        state = states[i % 4]
        if state is learn and i % 40 == 3:
            learn.theta.data = rng.uniform(-5, 5, learn.theta.shape)
        v = state.weights_for(int(rng.integers(1, 5)), k=i).data
        assert np.all(v >= 0)
        worst = max(worst, abs(v.sum() - 1.0))
    assert worst <= 1e-12


def test_random_is_one_hot_and_reproducible():
    a = MappingState("random", PART, seed=7)
    b = MappingState("random", PART, seed=7)
    for k in range(50):
        for m in (1, 2):
            va, vb = a.weights_for(m, k).data, b.weights_for(m, k).data
            assert np.array_equal(va, vb)
            assert sorted(va.tolist()) == [0.0, 0.0, 1.0]


def test_random_selection_frequencies_within_three_sigma():
    state = MappingState("random", PART, seed=42)
    n = 10_000
    counts = np.zeros(3)
    for k in range(n):
        counts += state.weights_for(1, k).data
    p = 1 / 3
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_random_layers_draw_independently():
    state = MappingState("random", PART, seed=1)
    same = sum(np.array_equal(state.weights_for(1, k).data, state.weights_for(2, k).data) for k in range(3000))
    # independent draws agree with probability 1/3
    assert abs(same / 3000 - 1 / 3) < 3 * np.sqrt((1 / 3) * (2 / 3) / 3000)


# ---------------------------------------------------------------- aggregation

def test_one_hot_aggregation_selects_layer_exactly():
    trace = fake_trace()
    v = Tensor([0.0, 0.0, 1.0])
    assert np.array_equal(aggregate_hidden(trace, PART, 2, v).data, trace.hidden_states[5].data)
    heads = aggregate_attention(trace, PART, 1, v)
    for i in range(2):
        assert np.array_equal(heads[i].data, trace.attention_logits[2][i].data)


def test_mean_of_constant_tensors():
    consts = [Tensor(np.full((1, 2, 2), c)) for c in (1.0, 2.0, 6.0)]
    trace = ForwardTrace(None, consts, [[c] for c in consts], None)
    out = aggregate_hidden(trace, BlockPartition(3, 1), 1, Tensor(np.full(3, 1 / 3)))
    assert np.allclose(out.data, 3.0, rtol=0, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 2))
def test_aggregation_matches_naive_loop(seed, m):
    trace = fake_trace(seed)
    v = np.random.default_rng(seed + 1).dirichlet(np.ones(3))
    layers = PART.block(m)
    got = aggregate_hidden(trace, PART, m, Tensor(v)).data
    want = naive_weighted_sum([trace.hidden_states[l - 1].data for l in layers], v)
    assert np.max(np.abs(got - want)) <= 1e-12
    heads = aggregate_attention(trace, PART, m, Tensor(v))
    for i, h in enumerate(heads):
        want = naive_weighted_sum([trace.attention_logits[l - 1][i].data for l in layers], v)
        assert np.max(np.abs(h.data - want)) <= 1e-12


def test_aggregation_commutes_with_head_indexing():
    trace = fake_trace(3, heads=3)
    v = Tensor([0.2, 0.5, 0.3])
    stacked = [ad.stack(layer, axis=0) for layer in trace.attention_logits]
    combined = ad.scale(stacked[0], 0.2) + ad.scale(stacked[1], 0.5) + ad.scale(stacked[2], 0.3)
    heads = aggregate_attention(trace, PART, 1, v)
    for i in range(3):
        assert np.allclose(combined.data[i], heads[i].data, rtol=0, atol=1e-14)


def test_probs_space_softmaxes_before_combining():
    trace = fake_trace(4)
    v = Tensor([0.5, 0.25, 0.25])
    heads = aggregate_attention(trace, PART, 1, v, space="probs")
    rows = heads[0].data.sum(axis=-1)
    assert np.allclose(rows, 1.0, rtol=0, atol=1e-12)


def test_head_count_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        aggregate_attention(fake_trace(heads=2), PART, 1, Tensor([0.0, 0.0, 1.0]), n_heads=4)


def test_wrong_weight_shape_rejected():
    with pytest.raises(ShapeError):
        aggregate_hidden(fake_trace(), PART, 1, Tensor([0.5, 0.5]))


# ---------------------------------------------------------------- map_step

def test_map_step_requires_gradient():
    state = MappingState("learnable", PART)
    opt = Adam([state.theta], lr=state.map_lr)
    with pytest.raises(OrderingError):
        state.map_step(opt, 0)


def test_zero_gradient_leaves_theta_unchanged():
    state = MappingState("learnable", PART, init="base-like")
    before = state.theta.data.copy()
    opt = Adam([state.theta], lr=1e-3)
    state.theta.grad = np.zeros_like(before)
    state.map_step(opt, 0)
    assert np.array_equal(state.theta.data, before)


def test_map_step_updates_and_logs(tmp_path):
    state = MappingState("learnable", PART, map_lr=1e-2)
    opt = Adam([state.theta], lr=state.map_lr)
    path = tmp_path / "trajectory.csv"
    state.open_trajectory(path)
    target = Tensor([0.7, 0.2, 0.1])
    steps = 5
    for k in range(steps):
        v = state.weights_for(1, k)
        ad.backward(ad.tensor_sum(ad.square(v - target)))
        state.map_step(opt, k)
        assert abs(state.weights_for(1).data.sum() - 1.0) <= 1e-12
    state.close_trajectory()
    assert len(state.trajectory) == steps * 2 * 3
    lines = path.read_text().splitlines()
    assert lines[0] == "step,student_layer,block_index,weight"
    assert len(lines) == 1 + steps * 2 * 3
    # first logged weights are the pre-update ones at step 0
    assert lines[1].startswith("0,1,1,") and float(lines[1].split(",")[3]) == pytest.approx(1 / 3, abs=1e-15)
    assert state.weights_for(1).data[0] > 1 / 3


def test_map_step_rejected_for_fixed_maps():
    state = MappingState("mean", PART)
    with pytest.raises(ConfigError):
        state.map_step(None, 0)


@pytest.mark.parametrize("attn", ["mse", "kl"])
def test_theta_gradient_matches_finite_differences(attn):
    groups = check_variant(attn, "learnable", 0.5, max_coords=None)
    assert groups["theta"]["max_rel_error"] < 1e-4
