import math

import numpy as np
import pytest

from streetnav import tensor as T
from streetnav.errors import GradCheckError, OptimizerError, ShapeError
from streetnav.gradcheck import grad_check
from streetnav.layers import (
    BiLSTM,
    Dense,
    LSTMCell,
    MultiHeadAttention,
    lstm_layer,
    stack_time,
)
from streetnav.optim import Adam, AdamConfig
from streetnav.tensor import Tensor


def test_softmax_of_zeros_is_uniform():
    out = T.softmax(Tensor(np.zeros(4)))
    assert np.allclose(out.data, 0.25)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    out = T.softmax(Tensor(rng.normal(0, 3, (5, 7))), axis=-1)
    assert np.allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((3, 4)))
    loss = T.cross_entropy(logits, np.array([0, 1, 3]))
    assert loss.item() == pytest.approx(math.log(4.0), abs=1e-6)


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(1)
    a = T.parameter(rng.normal(0, 1, (5, 4)))
    b = T.parameter(rng.normal(0, 1, (4, 3)))

    def f():
        return T.sum_all(T.tanh(T.matmul(a, b)))

    assert grad_check(f, {"a": a, "b": b}) < 1e-4


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


@pytest.mark.parametrize(
    "op",
    [
        lambda x: T.sigmoid(x),
        lambda x: T.tanh(x),
        lambda x: T.relu(x),
        lambda x: T.softmax(x, axis=-1),
        lambda x: T.mul(x, x),
        lambda x: T.add(x, T.tanh(x)),
        lambda x: T.slice_axis(x, -1, 1, 3),
        lambda x: T.reshape(x, (2, 2, 3)),
        lambda x: T.swap_axes(x, 0, 1),
        lambda x: T.mean_axis(x, 0),
    ],
)
def test_elementwise_and_shape_op_gradients(op):
    rng = np.random.default_rng(2)
    x = T.parameter(rng.normal(0, 1, (4, 3)) + 0.1)

    def f():
        return T.sum_all(T.mul(op(x), op(x)))

    assert grad_check(f, {"x": x}) < 1e-4


def test_concat_routes_gradients_to_segments():
    a = T.parameter(np.zeros((2, 2)))
    b = T.parameter(np.zeros((2, 3)))
    out = T.concat([a, b], axis=-1)
    seed = np.arange(10.0).reshape(2, 5)
    out.backward(seed)
    assert np.array_equal(a.grad, seed[:, :2])
    assert np.array_equal(b.grad, seed[:, 2:])


def test_embedding_gradients_accumulate_duplicates():
    table = T.parameter(np.zeros((6, 3)))
    ids = np.array([1, 1, 4])
    out = T.embedding(table, ids)
    out.backward(np.ones((3, 3)))
    assert np.array_equal(table.grad[1], [2.0, 2.0, 2.0])
    assert np.array_equal(table.grad[4], [1.0, 1.0, 1.0])
    assert np.array_equal(table.grad[0], [0.0, 0.0, 0.0])


def test_embedding_rejects_out_of_range():
    table = T.parameter(np.zeros((6, 3)))
    with pytest.raises(ShapeError):
        T.embedding(table, np.array([6]))


def test_layer_norm_statistics():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(5.0, 3.0, (8, 16)))
    out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
    assert np.allclose(out.data.mean(axis=-1), 0.0, atol=1e-5)
    assert np.allclose(out.data.var(axis=-1), 1.0, atol=1e-3)


def test_layer_norm_and_cross_entropy_gradients():
    rng = np.random.default_rng(4)
    x = T.parameter(rng.normal(0, 1, (3, 6)))
    g = T.parameter(np.ones(6))
    b = T.parameter(np.zeros(6))

    def f():
        y = T.layer_norm(x, g, b)
        return T.cross_entropy(y, np.array([0, 2, 5]))

    assert grad_check(f, {"x": x, "g": g, "b": b}) < 1e-4


def test_dropout_eval_is_identity():
    x = Tensor(np.ones((4, 4)))
    assert T.dropout(x, 0.5, training=False, rng=None) is x


def test_dropout_scales_retained_units():
    rng = np.random.default_rng(5)
    x = Tensor(np.ones((2000,)))
    out = T.dropout(x, 0.25, training=True, rng=rng)
    kept = out.data[out.data != 0.0]
    assert np.allclose(kept, 1.0 / 0.75)
    assert abs(len(kept) / 2000 - 0.75) < 0.05


def test_dropout_rejects_bad_rate():
    with pytest.raises(ShapeError):
        T.dropout(Tensor(np.ones(3)), 1.0, training=True, rng=np.random.default_rng(0))


def test_no_grad_blocks_graph_recording():
    x = T.parameter(np.ones(3))
    with T.no_grad():
        out = T.sum_all(T.mul(x, x))
    assert not out.requires_grad


# --- LSTM ops --------------------------------------------------------------


def test_lstm_zero_params_gives_zero_hidden():
    rng = np.random.default_rng(6)
    cell = LSTMCell(3, 4, rng)
    for p in cell.params().values():
        p.data[...] = 0.0
    h, c = cell.step(Tensor(np.ones((2, 3))), T.zeros((2, 4)), T.zeros((2, 4)))
    assert np.allclose(h.data, 0.0)


def test_lstm_saturated_forget_gate_preserves_cell():
    rng = np.random.default_rng(7)
    cell = LSTMCell(3, 4, rng)
    for p in cell.params().values():
        p.data[...] = 0.0
    # forget-gate bias large positive, input-gate bias large negative
    cell.b.data[4:8] = 20.0
    cell.b.data[0:4] = -20.0
    c_prev = Tensor(np.full((1, 4), 0.7, dtype=np.float32))
    _, c = cell.step(Tensor(np.ones((1, 3))), T.zeros((1, 4)), c_prev)
    assert np.allclose(c.data, 0.7, atol=1e-4)


def test_lstm_step_gradients():
    rng = np.random.default_rng(8)
    cell = LSTMCell(3, 4, rng)
    x = np.array(rng.normal(0, 1, (2, 3)), dtype=np.float32)
    h0 = T.parameter(rng.normal(0, 0.3, (2, 4)))
    c0 = T.parameter(rng.normal(0, 0.3, (2, 4)))

    def f():
        h, c = cell.step(Tensor(x), h0, c0)
        return T.sum_all(T.add(T.mul(h, c), T.tanh(h)))

    params = dict(cell.params()) | {"h0": h0, "c0": c0}
    assert grad_check(f, params) < 1e-4


def test_lstm_layer_gradients_with_ragged_lengths():
    rng = np.random.default_rng(9)
    cell = LSTMCell(3, 5, rng)
    seq = T.parameter(rng.normal(0, 1, (3, 6, 3)))
    lengths = np.array([6, 4, 1])

    def f():
        hs, c_final = cell.run(seq, lengths)
        return T.add(T.sum_all(T.mul(hs, hs)), T.sum_all(T.mul(c_final, c_final)))

    params = dict(cell.params()) | {"seq": seq}
    assert grad_check(f, params, max_coords_per_param=12) < 1e-4


def test_lstm_layer_rejects_bad_lengths():
    rng = np.random.default_rng(10)
    cell = LSTMCell(3, 5, rng)
    seq = Tensor(np.zeros((2, 4, 3)))
    with pytest.raises(ShapeError):
        lstm_layer(seq, cell.wx, cell.wh, cell.b, T.zeros((2, 5)), T.zeros((2, 5)),
                   np.array([4, 5]))


# --- BiLSTM ------------------------------------------------------------------


def test_bilstm_output_dims():
    rng = np.random.default_rng(11)
    bi = BiLSTM(8, 256, 2, rng)
    seq = Tensor(np.zeros((1, 1, 8), dtype=np.float32))
    out, cf, cb = bi(seq, np.array([1]))
    assert out.shape == (1, 1, 512)  # two directions of hidden size 256
    assert cf.shape == (1, 256) and cb.shape == (1, 256)


def test_bilstm_reversal_symmetry():
    """With tied direction weights, reversing the input swaps the forward and
    backward output roles at mirrored positions."""
    rng = np.random.default_rng(12)
    bi = BiLSTM(3, 4, 1, rng)
    fwd, bwd = bi.layers[0]
    for name, p in bwd.params().items():
        p.data = fwd.params()[name].data.copy()
    x = np.array(rng.normal(0, 1, (1, 5, 3)), dtype=np.float32)
    out_a, cf, cb = bi(Tensor(x), np.array([5]))
    out_b, cf_r, cb_r = bi(Tensor(x[:, ::-1].copy()), np.array([5]))
    h = 4
    assert np.allclose(out_a.data[0, :, :h], out_b.data[0, ::-1, h:], atol=1e-6)
    assert np.allclose(out_a.data[0, :, h:], out_b.data[0, ::-1, :h], atol=1e-6)
    assert np.allclose(cf.data, cb_r.data, atol=1e-6)


def test_bilstm_final_cells_ignore_padding():
    rng = np.random.default_rng(13)
    bi = BiLSTM(3, 4, 2, rng)
    x = np.array(rng.normal(0, 1, (1, 3, 3)), dtype=np.float32)
    padded = np.concatenate([x, np.ones((1, 4, 3), dtype=np.float32)], axis=1)
    _, cf_a, cb_a = bi(Tensor(x), np.array([3]))
    _, cf_b, cb_b = bi(Tensor(padded), np.array([3]))
    assert np.allclose(cf_a.data, cf_b.data, atol=1e-6)
    assert np.allclose(cb_a.data, cb_b.data, atol=1e-6)


def test_bilstm_rejects_empty_sequence():
    rng = np.random.default_rng(14)
    bi = BiLSTM(3, 4, 1, rng)
    with pytest.raises(ShapeError):
        bi(Tensor(np.zeros((1, 0, 3))), np.array([0]))


# --- attention ---------------------------------------------------------------


def test_attention_identical_keys_ignore_query():
    rng = np.random.default_rng(15)
    attn = MultiHeadAttention(6, 5, 2, rng)
    keys = Tensor(np.tile(rng.normal(0, 1, (1, 1, 5)).astype(np.float32), (1, 7, 1)))
    out_a = attn(Tensor(rng.normal(0, 1, (1, 6)).astype(np.float32)), keys)
    out_b = attn(Tensor(rng.normal(0, 1, (1, 6)).astype(np.float32)), keys)
    assert np.allclose(out_a.data, out_b.data, atol=1e-6)


def test_attention_single_key_weight_is_one():
    rng = np.random.default_rng(16)
    attn = MultiHeadAttention(6, 5, 2, rng)
    key = rng.normal(0, 1, (1, 1, 5)).astype(np.float32)
    out = attn(Tensor(rng.normal(0, 1, (1, 6)).astype(np.float32)), Tensor(key))
    # the context must equal the projected single value exactly
    v = key[0] @ attn.wv.data
    manual = v @ attn.wo.data
    mean = manual.mean()
    norm = (manual - mean) / np.sqrt(((manual - mean) ** 2).mean() + 1e-5)
    assert np.allclose(out.data[0], norm[0], atol=1e-5)


def test_attention_mask_excludes_padded_keys():
    rng = np.random.default_rng(17)
    attn = MultiHeadAttention(4, 3, 2, rng)
    keys = rng.normal(0, 1, (1, 6, 3)).astype(np.float32)
    query = Tensor(rng.normal(0, 1, (1, 4)).astype(np.float32))
    mask = np.array([[True, True, True, False, False, False]])
    out_masked = attn(query, Tensor(keys), mask)
    keys2 = keys.copy()
    keys2[0, 3:] = 99.0  # padded keys must not matter
    out_masked2 = attn(query, Tensor(keys2), mask)
    assert np.allclose(out_masked.data, out_masked2.data, atol=1e-6)


def test_attention_gradients_two_heads():
    rng = np.random.default_rng(18)
    attn = MultiHeadAttention(4, 6, 2, rng)
    q = np.array(rng.normal(0, 1, (2, 4)), dtype=np.float32)
    keys = np.array(rng.normal(0, 1, (2, 7, 6)), dtype=np.float32)
    mask = np.ones((2, 7), dtype=bool)
    mask[1, 4:] = False

    def f():
        out = attn(Tensor(q), Tensor(keys), mask)
        return T.sum_all(T.mul(out, out))

    assert grad_check(f, attn.params(), max_coords_per_param=8) < 1e-4


def test_attention_head_divisibility():
    with pytest.raises(ShapeError):
        MultiHeadAttention(5, 4, 2, np.random.default_rng(0))


# --- optimizer / gradcheck ---------------------------------------------------


def test_adam_defaults_match_training_recipe():
    cfg = AdamConfig()
    assert cfg.lr == 5e-4
    assert cfg.weight_decay == 1e-3


def test_adam_zero_grad_zero_decay_is_noop():
    p = T.parameter(np.array([1.0, -2.0], dtype=np.float32))
    opt = Adam({"p": p}, AdamConfig(weight_decay=0.0))
    p.grad = np.zeros(2, dtype=np.float32)
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_lr_sized():
    p = T.parameter(np.array([0.0], dtype=np.float32))
    opt = Adam({"p": p}, AdamConfig(lr=5e-4, weight_decay=0.0))
    p.grad = np.array([1.0], dtype=np.float32)
    opt.step()
    # bias-corrected m/sqrt(v) is exactly 1 after one step
    assert p.data[0] == pytest.approx(-5e-4, rel=1e-4)


def test_adam_missing_gradient_raises():
    p = T.parameter(np.zeros(2))
    opt = Adam({"p": p})
    with pytest.raises(OptimizerError):
        opt.step()


def test_adam_decoupled_weight_decay_applies_without_gradient_signal():
    p = T.parameter(np.array([1.0], dtype=np.float32))
    opt = Adam({"p": p}, AdamConfig(lr=0.1, weight_decay=0.5))
    p.grad = np.zeros(1, dtype=np.float32)
    opt.step()
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.5 * 1.0)


def test_grad_check_quadratic_is_nearly_exact():
    x = T.parameter(np.array([1.0, 2.0, 3.0]))

    def f():
        return T.sum_all(T.mul(x, x))

    assert grad_check(f, {"x": x}) < 1e-6


def test_grad_check_rejects_stochastic_function():
    rng = np.random.default_rng(19)
    x = T.parameter(np.ones(4))

    def f():
        return T.sum_all(T.dropout(x, 0.5, training=True, rng=rng))

    with pytest.raises(GradCheckError):
        grad_check(f, {"x": x})


def test_grad_check_requires_scalar():
    x = T.parameter(np.ones(4))
    with pytest.raises(GradCheckError):
        grad_check(lambda: T.mul(x, x), {"x": x})


def test_stack_time_round_trip():
    rng = np.random.default_rng(20)
    steps = [T.parameter(rng.normal(0, 1, (2, 3))) for _ in range(4)]
    out = stack_time(steps)
    assert out.shape == (2, 4, 3)
    out.backward(np.ones((2, 4, 3)))
    for s in steps:
        assert np.allclose(s.grad, 1.0)


def test_dense_layer_shapes_and_params():
    rng = np.random.default_rng(21)
    layer = Dense(4, 7, rng)
    out = layer(Tensor(np.zeros((3, 4))))
    assert out.shape == (3, 7)
    assert set(layer.params()) == {"w", "b"}


def test_determinism_same_seed_same_values():
    def build_and_run(seed):
        rng = np.random.default_rng(seed)
        layer = Dense(4, 4, rng)
        x = Tensor(rng.normal(0, 1, (2, 4)).astype(np.float32))
        out = T.sum_all(T.dropout(T.relu(layer(x)), 0.3, True, rng))
        return out.item()

    assert build_and_run(42) == build_and_run(42)
