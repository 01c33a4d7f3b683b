import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dquant import autodiff as ad
from dquant.autodiff import constant, parameter, stop_gradient
from dquant.layers import Conv2d, Dense, ResBlock, Sequential, ReLU, Upsample
from dquant.optim import AdamState, AdamW, DivergenceError, optimizer_step
from dquant.quantizer import Codebook, DepthwiseQuantizer, dq_forward
from dquant.ste import straight_through_quantize
from fdcheck import check_gradients

TOL = 1e-4


def p(rng, *shape, positive=False):
    v = rng.standard_normal(shape)
    return parameter(np.abs(v) + 0.5 if positive else v)


def test_square_gradient():
    x = parameter(np.array(3.0))
    (x * x).backward()
    assert x.grad == 6.0


def test_reused_node_accumulates():
    x = parameter(np.array(2.0))
    y = x * 3.0
    (y + y * x).backward()
    # d/dx (3x + 3x^2) = 3 + 6x
    assert x.grad == 15.0


def test_leaf_grads_accumulate_across_calls():
    x = parameter(np.array(1.0))
    (x * 2.0).backward()
    (x * 2.0).backward()
    assert x.grad == 4.0
    x.zero_grad()
    assert x.grad is None


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        (parameter(np.ones(3)) * 2.0).backward()


def test_stop_gradient_examples():
    rng = np.random.default_rng(0)
    x, y = p(rng, 4), p(rng, 4)
    (stop_gradient(x) * y).sum().backward()
    assert x.grad is None
    assert np.array_equal(y.grad, x.value)

    x = p(rng, 3)
    d = x - stop_gradient(x)
    loss = (d * d).sum()
    assert loss.value == 0.0
    loss.backward()
    assert np.all(x.grad == 0)

    x, xh = p(rng, 5), rng.standard_normal(5)
    beta = 0.25
    diff = x - stop_gradient(constant(xh))
    (beta * (diff * diff).sum()).backward()
    assert np.allclose(x.grad, 2 * beta * (x.value - xh), rtol=0, atol=1e-15)


def test_parameters_behind_stop_gradient_get_nothing():
    rng = np.random.default_rng(1)
    a, b = p(rng, 3), p(rng, 3)
    hidden = a * 2.0
    loss = (stop_gradient(hidden) * b).sum() + (b * b).sum()
    loss.backward()
    assert a.grad is None and hidden.grad is None


# -- finite differences for every primitive ----------------------------------
def _prims(rng):
    a, b = p(rng, 3, 4), p(rng, 3, 4)
    row = p(rng, 1, 4)
    pos = p(rng, 3, 4, positive=True)
    m1, m2 = p(rng, 3, 5), p(rng, 5, 2)
    w = rng.standard_normal((3, 4))
    return {
        "add_broadcast": ([a, row], lambda: ((a + row) * w).sum()),
        "sub": ([a, b], lambda: ((a - b) * w).sum()),
        "rsub": ([a], lambda: ((1.5 - a) * w).sum()),
        "mul": ([a, b], lambda: (a * b).sum()),
        "div": ([a, pos], lambda: (a / pos).sum()),
        "pow": ([pos], lambda: (pos ** 2.5).sum()),
        "neg": ([a], lambda: (-a * w).sum()),
        "matmul": ([m1, m2], lambda: ((m1 @ m2) ** 2.0).sum()),
        "getitem": ([a], lambda: (a[1:, ::2] ** 2.0).sum()),
        "sum_axis": ([a], lambda: (a.sum(axis=0) ** 2.0).sum()),
        "mean_keepdims": ([a], lambda: ((a.mean(axis=1, keepdims=True) * a) ** 2.0).mean()),
        "reshape_transpose": ([a], lambda: ((a.reshape(4, 3).T * w) ** 2.0).sum()),
        "concat": ([a, b], lambda: ((ad.concat([a, b], axis=1) ** 2.0) * np.arange(8.0)).sum()),
        "pad_axis": ([a], lambda: (ad.pad_axis(a, 1, 2) * np.arange(18.0).reshape(3, 6)).sum()),
        "relu": ([a], lambda: (ad.relu(a) * w).sum()),
        "exp": ([a], lambda: ad.exp(a).sum()),
        "log": ([pos], lambda: (ad.log(pos) * w).sum()),
        "take_rows": ([m1], lambda: (ad.take_rows(m1, np.array([[0, 2], [2, 2]])) ** 2.0).sum()),
        "mse": ([a], lambda: ad.mse(a, w)),
    }


@pytest.mark.parametrize("name", list(_prims(np.random.default_rng(0))))
def test_primitive_finite_differences(name):
    params, fn = _prims(np.random.default_rng(42))[name]
    assert check_gradients(fn, params) < TOL


@pytest.mark.parametrize("cin,cout,k,stride,pad,size", [
    (2, 3, 3, 1, 1, 6), (3, 2, 4, 2, 1, 8), (2, 4, 1, 1, 0, 5), (1, 2, 3, 2, 0, 7), (2, 2, 4, 2, 1, 6),
])
def test_conv2d_finite_differences(cin, cout, k, stride, pad, size):
    rng = np.random.default_rng(3)
    x, w, b = p(rng, 2, cin, size, size), p(rng, cout, cin, k, k), p(rng, cout)
    r = None

    def fn():
        nonlocal r
        y = ad.conv2d(x, w, b, stride, pad)
        if r is None:
            r = rng.standard_normal(y.shape)
        return (y * r).sum()

    assert check_gradients(fn, [x, w, b]) < TOL


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(4)
    x, w = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    out = ad.conv2d(constant(x), constant(w), stride=2, padding=1).value
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = (xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum()
    assert np.allclose(out, ref, atol=1e-12)
    with pytest.raises(ValueError):
        ad.conv2d(constant(x), constant(rng.standard_normal((3, 4, 3, 3))))


def test_upsample_and_nll_finite_differences():
    rng = np.random.default_rng(5)
    x = p(rng, 2, 3, 2, 2)
    r = rng.standard_normal((2, 3, 4, 4))
    assert check_gradients(lambda: (ad.upsample_nearest(x, 2) * r).sum(), [x]) < TOL
    logits = p(rng, 4, 7, 3)
    targets = rng.integers(0, 7, size=(4, 3))
    assert check_gradients(lambda: ad.categorical_nll(logits, targets, axis=1), [logits]) < TOL


def test_categorical_nll_uniform_is_log_k():
    nll = ad.categorical_nll(constant(np.zeros((2, 256, 3))), np.zeros((2, 3), dtype=int), axis=1)
    assert nll.value == pytest.approx(np.log(256), abs=1e-12)


def test_layers_finite_differences():
    rng = np.random.default_rng(6)
    dense = Dense(4, 3, rng, dtype=np.float64)
    x = rng.standard_normal((8, 4))
    y = rng.standard_normal((8, 3))
    assert check_gradients(lambda: ad.mse(dense(constant(x)), y), dense.parameters()) < TOL
    net = Sequential(Conv2d(2, 4, 4, rng, stride=2, padding=1, dtype=np.float64), ReLU(),
                     ResBlock(4, 4, rng, dtype=np.float64), Upsample(2))
    xi = rng.standard_normal((2, 2, 4, 4))
    target = rng.standard_normal((2, 4, 4, 4))
    assert check_gradients(lambda: ad.mse(net(constant(xi)), target), net.parameters(), samples=6) < TOL


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_elementwise_chain_property(b, n, m, seed):
    rng = np.random.default_rng(seed)
    a, c = p(rng, b, n, m), p(rng, n, 1, positive=True)
    w = rng.standard_normal((b, n, m))
    fn = lambda: ((ad.exp(a * 0.3) / c - a * a) * w).sum()  # noqa: E731
    assert check_gradients(fn, [a, c]) < TOL


# -- straight-through quantization -------------------------------------------
def _ste_setup(seed=0, M=2, D=3):
    rng = np.random.default_rng(seed)
    q = DepthwiseQuantizer([Codebook(rng.standard_normal((5, D))) for _ in range(M)], axis=1)
    z = parameter(rng.standard_normal((4, M * D)))
    return rng, q, z


def test_ste_forward_is_dq_and_jacobian_is_identity():
    _, q, z = _ste_setup()
    out = straight_through_quantize(z, q)
    assert np.array_equal(out.quantized.value, dq_forward(q, z.value).quantized)
    for i in range(z.value.size):
        z.grad = None
        e = np.zeros(z.value.size)
        e[i] = 1.0
        out.quantized.backward(e.reshape(z.shape))
        assert np.array_equal(z.grad.reshape(-1), e)


def test_ste_commitment_gradient_exact():
    rng, q, z = _ste_setup(1)
    beta = 0.25
    out = straight_through_quantize(z, q, beta=beta)
    g = rng.standard_normal(z.shape)
    loss = (out.quantized * g).sum() + out.commitment_term + out.codebook_term
    loss.backward()
    N = out.result.codes.size
    expected = g + 2 * beta * (z.value - out.result.quantized) / N
    assert np.allclose(z.grad, expected, rtol=0, atol=1e-15)


def test_ste_loss_terms():
    q = DepthwiseQuantizer([Codebook(np.zeros((1, 2)))], axis=1)
    out = straight_through_quantize(parameter(np.array([[1.0, 0.0]])), q, beta=0.25)
    assert (float(out.codebook_term.value), float(out.commitment_term.value)) == (1.0, 0.25)


def test_ste_on_code_rows_has_zero_codebook_term():
    rng = np.random.default_rng(2)
    book = Codebook(rng.standard_normal((4, 2)))
    q = DepthwiseQuantizer([book], axis=1)
    z = parameter(book.codes[[1, 3, 0]].copy())
    out = straight_through_quantize(z, q)
    assert np.array_equal(out.quantized.value, z.value)
    assert out.codebook_term.value == 0.0


def test_ste_single_book_matches_vq_path():
    rng, q, z = _ste_setup(3, M=1, D=4)
    out = straight_through_quantize(z, q)
    from dquant.quantizer import vq_forward
    vq = vq_forward(q.books[0], z.value)
    assert np.array_equal(out.quantized.value, vq.quantized)
    assert float(out.commitment_term.value) == pytest.approx(0.25 * vq.mean_distance(), rel=1e-12)


def test_ste_codebook_term_trains_codes_without_ema():
    rng, q, z = _ste_setup(4)
    params = [parameter(b.codes) for b in q.books]
    out = straight_through_quantize(z, q, code_params=params)
    out.codebook_term.backward()
    assert z.grad is None
    assert any(np.any(cp.grad != 0) for cp in params)


def test_ste_frozen_assignment_finite_differences():
    rng, q, z = _ste_setup(5)
    frozen = straight_through_quantize(z, q).freeze(z)
    r = rng.standard_normal(z.shape)

    def fn():
        out = straight_through_quantize(z, q, beta=0.25, frozen=frozen)
        return (out.quantized * r).sum() + out.commitment_term

    assert check_gradients(fn, [z]) < TOL


# -- optimizer ---------------------------------------------------------------
def test_optimizer_zero_grad_zero_decay_is_noop():
    w = [np.array([1.0, -2.0])]
    new, state = optimizer_step(w, [np.zeros(2)], lr=0.1)
    assert np.array_equal(new[0], w[0]) and state.step == 1


def test_optimizer_square_step_shrinks():
    w = np.array([1.0])
    new, _ = optimizer_step([w], [2 * w], lr=0.1)
    assert abs(new[0][0]) < 1.0
    assert w[0] == 1.0  # inputs untouched


def test_optimizer_deterministic_and_matches_stateful():
    rng = np.random.default_rng(7)
    w0 = rng.standard_normal(5)
    traj = []
    for _ in range(2):
        w, state = [w0.copy()], AdamState()
        for _ in range(10):
            w, state = optimizer_step(w, [2 * w[0]], state, lr=0.05, weight_decay=0.01)
        traj.append(w[0])
    assert np.array_equal(*traj)
    node = parameter(w0.copy())
    opt = AdamW([node], lr=0.05, weight_decay=0.01)
    for _ in range(10):
        opt.zero_grad()
        (node * node).sum().backward()
        opt.step()
    assert np.array_equal(node.value, traj[0])


def test_optimizer_nan_gradient_aborts():
    with pytest.raises(DivergenceError, match="param\\[1\\]"):
        optimizer_step([np.ones(2), np.ones(2)], [np.ones(2), np.array([np.nan, 0.0])])
    with pytest.raises(ValueError):
        optimizer_step([np.ones(2)], [np.ones(3)])


def test_decoupled_weight_decay():
    new, _ = optimizer_step([np.array([2.0])], [None], lr=0.1, weight_decay=0.5)
    assert new[0][0] == pytest.approx(2.0 * (1 - 0.05))


def test_linear_autoencoder_loss_decreases():
    rng = np.random.default_rng(8)
    basis = np.linalg.qr(rng.standard_normal((8, 3)))[0]
    data = rng.standard_normal((64, 3)) @ basis.T
    enc, dec = Dense(8, 3, rng, dtype=np.float64), Dense(3, 8, rng, dtype=np.float64)
    opt = AdamW(enc.parameters() + dec.parameters(), lr=1e-2)
    losses = []
    for _ in range(50):
        opt.zero_grad()
        loss = ad.mse(dec(enc(constant(data))), data)
        loss.backward()
        opt.step()
        losses.append(float(loss.value))
    assert all(b < a for a, b in zip(losses, losses[1:]))
