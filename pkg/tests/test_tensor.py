"""Gradient oracle for every primitive: central finite differences in float64."""

import numpy as np
import pytest

import fedexit.tensor as T
from fedexit.tensor import (NumericError, Parameter, ShapeError, Tape, TapeError,
                            Tensor, backward, set_finite_checks)

FD_STEP = 1e-5
RTOL = 1e-4
ATOL = 1e-8


def fd_grad(f, x, h=FD_STEP):
    """Central-difference gradient of scalar f() w.r.t. array x, mutated in place."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def weighted_loss(out, w):
    return T.sum_all(T.mul(out, Tensor(w)))


def check_grads(build, params, seed):
    """build() -> scalar loss Tensor. Checks tape grads of each param against FD."""
    with Tape() as tape:
        loss = build()
    backward(tape, loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}
    for name, p in params.items():
        num = fd_grad(lambda: float(build().data), p.data)
        np.testing.assert_allclose(analytic[name], num, rtol=RTOL, atol=ATOL,
                                   err_msg=f"grad mismatch for {name} (seed {seed})")


def rand_param(rng, shape, name):
    return Parameter(rng.normal(size=shape), name)


SEEDS = list(range(7))


@pytest.mark.parametrize("seed", SEEDS)
def test_add_broadcast_grad(seed):
    rng = np.random.default_rng(seed)
    a = rand_param(rng, (3, 4), "a")
    b = rand_param(rng, (4,), "b")
    w = rng.normal(size=(3, 4))
    check_grads(lambda: weighted_loss(T.add(a, b), w), {"a": a, "b": b}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_mul_grad(seed):
    rng = np.random.default_rng(seed)
    a = rand_param(rng, (2, 3), "a")
    b = rand_param(rng, (2, 3), "b")
    w = rng.normal(size=(2, 3))
    check_grads(lambda: weighted_loss(T.mul(a, b), w), {"a": a, "b": b}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_scale_grad(seed):
    rng = np.random.default_rng(seed)
    a = rand_param(rng, (5,), "a")
    w = rng.normal(size=(5,))
    check_grads(lambda: weighted_loss(T.scale(a, -1.7), w), {"a": a}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_grad(seed):
    rng = np.random.default_rng(seed)
    a = rand_param(rng, (3, 4), "a")
    b = rand_param(rng, (4, 2), "b")
    w = rng.normal(size=(3, 2))
    check_grads(lambda: weighted_loss(T.matmul(a, b), w), {"a": a, "b": b}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_batched_grad(seed):
    rng = np.random.default_rng(seed)
    a = rand_param(rng, (2, 3, 4), "a")
    b = rand_param(rng, (4, 5), "b")
    w = rng.normal(size=(2, 3, 5))
    check_grads(lambda: weighted_loss(T.matmul(a, b), w), {"a": a, "b": b}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_gelu_grad(seed):
    rng = np.random.default_rng(seed)
    a = rand_param(rng, (4, 3), "a")
    w = rng.normal(size=(4, 3))
    check_grads(lambda: weighted_loss(T.gelu(a), w), {"a": a}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_grad(seed):
    rng = np.random.default_rng(seed)
    a = rand_param(rng, (3, 5), "a")
    w = rng.normal(size=(3, 5))
    check_grads(lambda: weighted_loss(T.softmax(a), w), {"a": a}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_grad(seed):
    rng = np.random.default_rng(seed)
    a = rand_param(rng, (3, 6), "a")
    gamma = Parameter(rng.normal(size=6) + 1.0, "gamma")
    beta = rand_param(rng, (6,), "beta")
    w = rng.normal(size=(3, 6))
    check_grads(lambda: weighted_loss(T.layer_norm(a, gamma, beta), w),
                {"a": a, "gamma": gamma, "beta": beta}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_grad(seed):
    rng = np.random.default_rng(seed)
    logits = rand_param(rng, (4, 6), "logits")
    labels = rng.integers(0, 6, size=4)
    check_grads(lambda: T.cross_entropy(logits, labels), {"logits": logits}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_mean_sum_grad(seed):
    rng = np.random.default_rng(seed)
    a = rand_param(rng, (3, 4), "a")
    check_grads(lambda: T.mean_all(T.gelu(a)), {"a": a}, seed)
    b = rand_param(rng, (3, 4), "b")
    check_grads(lambda: T.sum_all(T.mul(b, b)), {"b": b}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_reshape_transpose_narrow_take_grad(seed):
    rng = np.random.default_rng(seed)
    a = rand_param(rng, (2, 3, 4), "a")
    w = rng.normal(size=(3,))

    def build():
        x = T.transpose(a, (1, 0, 2))          # (3, 2, 4)
        x = T.reshape(x, (3, 8))
        x = T.narrow(x, 1, 2, 3)               # (3, 3)
        x = T.take(x, 1, axis=1)               # (3,)
        return weighted_loss(x, w)

    check_grads(build, {"a": a}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_token_ops_grad(seed):
    rng = np.random.default_rng(seed)
    seq = rand_param(rng, (2, 4, 3), "seq")
    tok = rand_param(rng, (3,), "tok")
    w = rng.normal(size=(2, 4, 3))

    def build():
        z = T.with_token(seq, 2, tok)
        return weighted_loss(z, w)

    check_grads(build, {"seq": seq, "tok": tok}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_stack_expand_prepend_grad(seed):
    rng = np.random.default_rng(seed)
    t0 = rand_param(rng, (2, 3), "t0")
    t1 = rand_param(rng, (2, 3), "t1")
    v = rand_param(rng, (3,), "v")
    seq = rand_param(rng, (2, 2, 3), "seq")
    w1 = rng.normal(size=(2, 3, 3))
    w2 = rng.normal(size=(2, 3, 3))

    def build():
        stacked = T.stack_tokens([t0, t1, T.token_at(seq, 0)])
        pre = T.prepend_token(v, seq)
        return T.add(weighted_loss(stacked, w1), weighted_loss(pre, w2))

    check_grads(build, {"t0": t0, "t1": t1, "v": v, "seq": seq}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_dropout_grad(seed):
    rng = np.random.default_rng(seed)
    a = rand_param(rng, (4, 5), "a")
    w = rng.normal(size=(4, 5))

    def build():
        # same mask on every call so finite differences see a fixed function
        mask_rng = np.random.default_rng(999 + seed)
        return weighted_loss(T.dropout(a, 0.4, mask_rng, training=True), w)

    check_grads(build, {"a": a}, seed)


@pytest.mark.parametrize("seed", SEEDS)
def test_attention_grad(seed):
    rng = np.random.default_rng(seed)
    d, heads = 4, 2
    x = rand_param(rng, (2, 3, d), "x")
    w_qkv = Parameter(rng.normal(size=(d, 3 * d)) * 0.5, "w_qkv")
    b_qkv = rand_param(rng, (3 * d,), "b_qkv")
    w_proj = Parameter(rng.normal(size=(d, d)) * 0.5, "w_proj")
    b_proj = rand_param(rng, (d,), "b_proj")
    w = rng.normal(size=(2, 3, d))
    params = {"x": x, "w_qkv": w_qkv, "b_qkv": b_qkv, "w_proj": w_proj, "b_proj": b_proj}

    def build():
        out = T.multi_head_attention(x, w_qkv, b_qkv, w_proj, b_proj, heads)
        return weighted_loss(out, w)

    check_grads(build, params, seed)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = Tensor(rng.normal(size=(5, 7)) * 10)
        y = T.softmax(x)
        np.testing.assert_allclose(y.data.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_softmax_sum_has_zero_grad():
    rng = np.random.default_rng(4)
    x = Parameter(rng.normal(size=(3, 6)), "x")
    with Tape() as tape:
        loss = T.sum_all(T.softmax(x))
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)


def test_layer_norm_shift_invariance():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 8))
    gamma = Tensor(np.ones(8))
    beta = Tensor(np.zeros(8))
    y1 = T.layer_norm(Tensor(x), gamma, beta)
    y2 = T.layer_norm(Tensor(x + 13.5), gamma, beta)
    np.testing.assert_allclose(y1.data, y2.data, atol=1e-9)


def test_gelu_reference_points():
    x = Tensor(np.array([0.0, 10.0, -10.0, 1.0]))
    y = T.gelu(x).data
    assert y[0] == 0.0
    np.testing.assert_allclose(y[1], 10.0, rtol=1e-12)
    np.testing.assert_allclose(y[2], 0.0, atol=1e-12)
    np.testing.assert_allclose(y[3], 0.8413447460685429, rtol=1e-12)


def test_cross_entropy_uniform_logits():
    logits = Tensor(np.zeros((3, 10)))
    labels = np.array([0, 5, 9])
    loss = T.cross_entropy(logits, labels)
    np.testing.assert_allclose(loss.item(), np.log(10.0), rtol=1e-12)


def test_ops_off_tape_without_context():
    x = Parameter(np.ones((2, 2)), "x")
    y = T.gelu(x)
    assert y.requires_grad is False and y.tape is None


def test_constants_are_not_recorded():
    a = Tensor(np.ones((2, 2)))
    b = Tensor(np.ones((2, 2)))
    with Tape() as tape:
        T.matmul(a, b)
    assert len(tape) == 0


def test_frozen_parameter_never_accumulates():
    p = Parameter(np.ones((2, 2)), "p", trainable=False)
    q = Parameter(np.ones((2, 2)), "q")
    with Tape() as tape:
        loss = T.sum_all(T.matmul(p, q))
    backward(tape, loss)
    assert np.all(p.grad == 0.0)
    assert np.any(q.grad != 0.0)


def test_tape_consumed_twice_raises():
    p = Parameter(np.ones(3), "p")
    with Tape() as tape:
        loss = T.sum_all(p)
    backward(tape, loss)
    with pytest.raises(TapeError):
        backward(tape, loss)


def test_loss_from_other_tape_raises():
    p = Parameter(np.ones(3), "p")
    with Tape():
        loss = T.sum_all(p)
    with Tape() as other:
        T.sum_all(p)
        with pytest.raises(TapeError):
            backward(other, loss)


def test_non_scalar_loss_raises():
    p = Parameter(np.ones(3), "p")
    with Tape() as tape:
        out = T.gelu(p)
        with pytest.raises(ShapeError):
            backward(tape, out)


def test_shape_errors_name_both_shapes():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((4, 5)))
    with pytest.raises(ShapeError, match=r"2, 3"):
        T.matmul(a, b)
    with pytest.raises(ShapeError, match=r"4, 5"):
        T.add(a, b)


def test_finite_check_raises_and_can_be_disabled():
    big = Tensor(np.full((2, 2), 1e308))
    with np.errstate(over="ignore"):
        with pytest.raises(NumericError):
            T.mul(big, big)
        prev = set_finite_checks(False)
        try:
            out = T.mul(big, big)
            assert np.isinf(out.data).all()
        finally:
            set_finite_checks(prev)


def test_reused_tensor_accumulates_both_paths():
    rng = np.random.default_rng(11)
    a = rand_param(rng, (3, 3), "a")

    def build():
        return T.sum_all(T.add(T.mul(a, a), a))

    with Tape() as tape:
        loss = build()
    backward(tape, loss)
    np.testing.assert_allclose(a.grad, 2.0 * a.data + 1.0, rtol=1e-12)


def test_grad_buffers_do_not_alias():
    # one upstream grad feeding two inputs must land in distinct buffers
    x = Parameter(np.ones(4), "x")
    y = Parameter(np.full(4, 2.0), "y")
    with Tape() as tape:
        loss = T.sum_all(T.add(T.add(x, y), x))
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, 2.0)
    np.testing.assert_allclose(y.grad, 1.0)
