import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import GRAD_CASES, brute_conv2d, gradcheck
from sernet.autograd import (Adam, AdamState, AvgPool2D, BatchNorm, Conv2D, Dense, ParallelConcat, ReLU, Sequential,
                             Tensor, adam_step, cast_fp16, lr_schedule, same_padding)
from sernet.autograd import functional as F
from sernet.errors import ShapeError


# -- tensor core ---------------------------------------------------------------


def test_tensor_basics():
    t = Tensor([1, 2, 3])
    assert t.dtype == "fp64" and t.shape == (3,) and t.is_leaf and t.grad is None
    assert Tensor(np.zeros(2, np.float32)).dtype == "fp32"
    assert cast_fp16(t).dtype == "fp16"


def test_backward_sums_over_uses():
    x = Tensor([1.0, -2.0], requires_grad=True)
    (x * x + x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 3)


def test_backward_accumulates_across_calls():
    x = Tensor([1.0], requires_grad=True)
    (x * 2.0).sum().backward()
    (x * 2.0).sum().backward()
    np.testing.assert_allclose(x.grad, [4.0])


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_relu_sum_example():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    F.relu(x).sum().backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_broadcast_gradients():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.arange(3.0), requires_grad=True)
    (a * b + b).sum().backward()
    np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])  # two rows of a, plus b broadcast twice
    np.testing.assert_allclose(a.grad, np.tile(np.arange(3.0), (2, 1)))


# -- forward definitions ---------------------------------------------------------


def test_same_padding_rule():
    assert same_padding(40, 9, 1) == (40, 4, 4)
    assert same_padding(184, 4, 1) == (184, 1, 2)  # extra cell bottom/right
    assert same_padding(5, 3, 2) == (3, 1, 1)
    assert same_padding(6, 1, 2) == (3, 0, 0)


def test_conv_identity_kernel():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 4, 5, 1)))
    out = F.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_same_shape():
    conv = Conv2D((9, 1), 1, 7)
    assert conv(Tensor(np.zeros((1, 40, 184, 1), np.float32))).shape == (1, 40, 184, 7)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        F.conv2d(Tensor(np.zeros((1, 3, 3, 2))), Tensor(np.zeros((3, 3, 3, 1))))


@pytest.mark.parametrize("seed", range(12))
def test_conv_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(1, 6), rng.integers(1, 8)
    cin, cout = rng.integers(1, 4), rng.integers(1, 5)
    kh, kw = rng.integers(1, 5, size=2)
    stride = tuple(int(s) for s in rng.integers(1, 3, size=2))
    x = rng.standard_normal((2, h, w, cin))
    k = rng.standard_normal((kh, kw, cin, cout))
    b = rng.standard_normal(cout)
    ours = F.conv2d(Tensor(x), Tensor(k), Tensor(b), stride).data
    np.testing.assert_allclose(ours, brute_conv2d(x, k, b, stride), rtol=0, atol=1e-12)


def test_conv_6x6_brute_force():
    rng = np.random.default_rng(66)
    x, k = rng.standard_normal((1, 6, 6, 1)), rng.standard_normal((3, 3, 1, 1))
    np.testing.assert_allclose(F.conv2d(Tensor(x), Tensor(k)).data, brute_conv2d(x, k, None, (1, 1)), atol=1e-12)


def test_multi_conv_equals_separate_convs():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((2, 7, 9, 2)))
    ks = [Tensor(rng.standard_normal(s)) for s in ((9, 1, 2, 3), (1, 11, 2, 2), (3, 3, 2, 4))]
    bs = [Tensor(rng.standard_normal(k.shape[3])) for k in ks]
    fused = F.multi_conv2d(x, ks, bs).data
    separate = np.concatenate([F.conv2d(x, k, b).data for k, b in zip(ks, bs)], axis=-1)
    np.testing.assert_allclose(fused, separate, atol=1e-12)


def test_fused_parallel_concat_matches_unfused():
    def build(fused):
        rng = np.random.default_rng(5)
        branches = [Sequential([Conv2D(k, 1, 3, rng=rng, dtype=np.float64), BatchNorm(3, dtype=np.float64), ReLU()])
                    for k in ((9, 1), (1, 11), (3, 3))]
        return ParallelConcat(branches, fused=fused)

    x = np.random.default_rng(2).standard_normal((4, 10, 12, 1))
    outs, grads, stats = [], [], []
    for fused in (True, False):
        layer = build(fused)
        assert layer._fusable()
        p = Tensor(x, requires_grad=True)
        y = layer(p, training=True)
        (y * Tensor(np.linspace(-1, 1, y.size).reshape(y.shape))).sum().backward()
        outs.append(y.data)
        grads.append([t.grad for t in layer.parameters()])
        stats.append([t.data.copy() for t in layer.buffers()])
    np.testing.assert_allclose(outs[0], outs[1], atol=1e-12)
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, atol=1e-10)
    for a, b in zip(*stats):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_batch_norm_examples():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((8, 4, 4, 3)) * 5 + 2)
    g, b = Tensor(np.ones(3)), Tensor(np.zeros(3))
    mm, mv = np.zeros(3), np.ones(3)
    y = F.batch_norm(x, g, b, mm, mv, True, eps=0.0).data.reshape(-1, 3)
    np.testing.assert_allclose(y.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(0), 1, atol=1e-9)
    stdized = Tensor(y.reshape(8, 4, 4, 3))
    y2 = F.batch_norm(stdized, Tensor(np.full(3, 2.0)), Tensor(np.full(3, 3.0)), np.zeros(3), np.ones(3), True,
                      eps=0.0).data.reshape(-1, 3)
    np.testing.assert_allclose(y2.mean(0), 3, atol=1e-9)
    np.testing.assert_allclose(y2.std(0), 2, atol=1e-9)
    aff = F.batch_norm(x, Tensor(np.full(3, 2.0)), Tensor(np.full(3, 1.0)), np.zeros(3), np.ones(3), False, eps=0.0)
    np.testing.assert_allclose(aff.data, 2 * x.data + 1)


def test_batch_norm_moving_update():
    x = np.random.default_rng(1).standard_normal((6, 2, 2, 2)) + 4
    mm, mv = np.zeros(2), np.ones(2)
    F.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), mm, mv, True, momentum=0.9)
    flat = x.reshape(-1, 2)
    np.testing.assert_allclose(mm, 0.1 * flat.mean(0))
    np.testing.assert_allclose(mv, 0.9 + 0.1 * flat.var(0))
    assert (mv >= 0).all()


def test_softmax_examples():
    np.testing.assert_allclose(F.softmax(Tensor(np.zeros((1, 4)))).data, [[0.25] * 4])


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
@settings(max_examples=50)
def test_softmax_normalized_and_shift_invariant(logits, shift):
    z = np.array([logits])
    p = F.softmax(Tensor(z)).data
    assert abs(p.sum() - 1) < 1e-12
    np.testing.assert_allclose(F.softmax(Tensor(z + shift)).data, p, atol=1e-12)


def test_pooling_examples():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
    assert F.avg_pool2d(x, (2, 2)).data.item() == 2.5
    const = Tensor(np.full((1, 5, 7, 2), 3.0))
    np.testing.assert_allclose(F.avg_pool2d(const, (2, 2)).data, 3.0)  # edge windows average valid cells
    assert F.avg_pool2d(const, (2, 2)).shape == (1, 3, 4, 2)
    np.testing.assert_allclose(F.global_avg_pool(const).data, np.full((1, 2), 3.0))


def test_avg_pool_edge_window_is_valid_mean():
    x = np.arange(15.0).reshape(1, 3, 5, 1)
    out = F.avg_pool2d(Tensor(x), (2, 2)).data[0, :, :, 0]
    # TF-style split puts the odd padding cell last, so the last window is partial
    assert out[1, 2] == x[0, 2, 4, 0]
    assert out[0, 0] == x[0, :2, :2, 0].mean()


def test_dense_and_shape_errors():
    out = F.dense(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))), Tensor(np.arange(4.0)))
    np.testing.assert_allclose(out.data, 3 + np.arange(4.0)[None].repeat(2, 0))
    with pytest.raises(ShapeError):
        F.dense(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 4))))
    with pytest.raises(ShapeError):
        F.global_avg_pool(Tensor(np.ones((2, 3))))


def test_dropout_identity_at_inference():
    x = Tensor(np.random.default_rng(0).standard_normal((5, 5)))
    assert F.dropout(x, 0.3, np.random.default_rng(0), False) is x


def test_dropout_expectation():
    x = np.linspace(0.5, 2.0, 10)
    rng = np.random.default_rng(0)
    draws = np.stack([F.dropout(Tensor(x), 0.3, rng, True).data for _ in range(10_000)])
    np.testing.assert_allclose(draws.mean(0), x, rtol=0.01 * 3)  # 3 sigma envelope of a 1% target
    assert abs(draws.mean() / x.mean() - 1) < 0.01


def test_concat_order():
    a, b = Tensor(np.zeros((1, 1, 1, 2))), Tensor(np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(F.concat([a, b]).data.ravel(), [0, 0, 1])


# -- gradients -------------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_finite_difference_gradients(name):
    rng = np.random.default_rng(abs(hash(name)) % (1 << 32))
    for _ in range(5):
        assert gradcheck(GRAD_CASES[name], rng) < 1e-4


def test_softmax_ce_gradient_closed_form():
    from sernet.losses import cross_entropy

    z = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    y = np.array([0, 3, 1])
    p = F.softmax(z)
    cross_entropy(p, y).backward()
    onehot = np.eye(4)[y]
    np.testing.assert_allclose(z.grad, (p.data - onehot) / 3, atol=1e-12)


# -- optimizer -------------------------------------------------------------------


def test_adam_zero_grad_is_noop():
    p = Tensor(np.arange(4.0), requires_grad=True)
    state = AdamState.for_params([p])
    adam_step([p], [np.zeros(4)], state, 1e-3)
    np.testing.assert_array_equal(p.data, np.arange(4.0))
    assert state.step == 1


def test_adam_first_step_hand_evaluated():
    p = Tensor(np.array([0.5]), requires_grad=True)
    state = AdamState.for_params([p])
    adam_step([p], [np.array([1.0])], state, 1e-4)
    m_hat = (0.1 * 1.0) / (1 - 0.9)
    v_hat = (0.001 * 1.0) / (1 - 0.999)
    assert p.data[0] == pytest.approx(0.5 - 1e-4 * m_hat / (math.sqrt(v_hat) + 1e-7), rel=1e-12)
    assert p.data[0] == pytest.approx(0.5 - 1e-4, rel=1e-6)


def test_adam_decay_only_on_flagged():
    a = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([1.0]), requires_grad=True)
    a.l2 = True
    opt = Adam([a, b], lr=1e-4, weight_decay=1e-6)
    opt.step()  # no grads: only the decay term moves ``a``
    assert a.data[0] < 1.0 and b.data[0] == 1.0
    assert a.data[0] == pytest.approx(1.0 - 1e-10)


def test_adam_moment_invariants():
    rng = np.random.default_rng(0)
    p = Tensor(rng.standard_normal(5), requires_grad=True)
    state = AdamState.for_params([p])
    for step in range(1, 6):
        adam_step([p], [rng.standard_normal(5)], state, 1e-3)
        assert state.step == step and (state.v[0] >= 0).all()


def test_lr_schedule_values():
    assert lr_schedule(0) == 1e-4
    assert lr_schedule(49) == 1e-4
    assert lr_schedule(50) == pytest.approx(8.607e-5, rel=1e-4)
    assert lr_schedule(69) == lr_schedule(50)
    assert lr_schedule(70) == pytest.approx(1e-4 * math.exp(-0.30))
    assert lr_schedule(299) == pytest.approx(1e-4 * math.exp(-0.15 * 13))


def test_cast_fp16():
    assert cast_fp16(np.array([1.0])).data[0] == 1.0
    assert cast_fp16(np.array([1e-8])).data[0] == 0.0
    np.testing.assert_array_equal(cast_fp16(np.array([1e6, -1e6])).data, [65504.0, -65504.0])
    src = np.random.default_rng(0).standard_normal(100).astype(np.float32)
    assert cast_fp16(src).data.nbytes == src.nbytes // 2
    # round to nearest even: 1 + 2^-11 sits halfway between 1 and 1 + 2^-10
    assert cast_fp16(np.array([1 + 2 ** -11])).data[0] == 1.0
    assert cast_fp16(np.array([1 + 3 * 2 ** -11])).data[0] == 1 + 2 ** -9


def test_layer_accounting():
    conv = Conv2D((9, 1), 1, 32)
    assert conv.n_params() == 9 * 32 + 32
    assert conv.flops((40, 184, 1)) == 2 * 9 * 32 * 40 * 184
    tiny = Conv2D((1, 1), 1, 1)
    assert tiny.flops((2, 2, 1)) == 8
    assert Dense(160, 4).n_params() == 160 * 4 + 4
    bn = BatchNorm(8)
    assert bn.n_params() == 16 and bn.n_buffers() == 16
    assert AvgPool2D((2, 1)).output_shape((5, 9, 3)) == (3, 9, 3)
