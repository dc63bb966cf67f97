import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays as np_arrays

from selfeq import autodiff as ad
from fdcheck import check_op_gradient


def test_relu_definition():
    out = ad.relu(ad.Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_row_softmax_symmetry():
    out = ad.row_softmax(ad.Tensor([[0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-7)


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.uniform(-2, 2, (3, 4)).astype(np.float32)
    b = rng.uniform(-2, 2, (4, 2)).astype(np.float32)
    out = ad.matmul(ad.Tensor(a), ad.Tensor(b)).data
    expect = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expect[i, j] += float(a[i, k]) * float(b[k, j])
    np.testing.assert_allclose(out, expect, atol=1e-6)


def test_backward_square_sum():
    x = ad.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.tsum(ad.mul(x, x))
        tape.backward(loss)
        np.testing.assert_allclose(tape.grad(x), [2.0, 4.0, 6.0], atol=1e-6)


def test_detach_severs_flow():
    x = ad.Tensor([1.5, -0.5], requires_grad=True)
    y = ad.Tensor([2.0, 3.0], requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.tsum(ad.mul(ad.detach(x), y))
        tape.backward(loss)
        assert tape.grad(x) is None
        np.testing.assert_allclose(tape.grad(y), [1.5, -0.5])


def test_detached_branch_equals_constant_branch():
    rng = np.random.default_rng(3)
    xv = rng.uniform(-2, 2, (3, 3)).astype(np.float32)
    yv = rng.uniform(-2, 2, (3, 3)).astype(np.float32)

    def run(branch_const: bool):
        x = ad.Tensor(xv, requires_grad=True)
        y = ad.Tensor(yv, requires_grad=True)
        with ad.Tape() as tape:
            branch = ad.Tensor(np.square(xv)) if branch_const else ad.detach(ad.square(x))
            loss = ad.tsum(ad.mul(ad.add(branch, y), y))
            tape.backward(loss)
            return tape.grad(x), tape.grad(y)

    gx_d, gy_d = run(branch_const=False)
    gx_c, gy_c = run(branch_const=True)
    assert gx_d is None and gx_c is None
    np.testing.assert_array_equal(gy_d, gy_c)


def test_non_scalar_root_rejected():
    x = ad.Tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape() as tape:
        y = ad.mul(x, x)
        with pytest.raises(ad.ShapeError):
            tape.backward(y)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ad.ShapeError, match=r"add.*\(2,\).*\(3,\)"):
        ad.add(ad.Tensor([1.0, 2.0]), ad.Tensor([1.0, 2.0, 3.0]))


def test_log_domain_error():
    with pytest.raises(ad.DomainError):
        ad.log(ad.Tensor([1.0, 0.0]))


def test_forward_is_replay_deterministic():
    rng = np.random.default_rng(11)
    a = rng.uniform(-2, 2, (4, 4)).astype(np.float32)
    b = rng.uniform(-2, 2, (4, 4)).astype(np.float32)

    def run():
        with ad.Tape():
            x = ad.Tensor(a, requires_grad=True)
            out = ad.row_softmax(ad.matmul(x, ad.Tensor(b)))
            return out.data.copy()

    assert np.array_equal(run(), run())


@settings(max_examples=50, deadline=None)
@given(
    np_arrays(
        np.float32,
        st.tuples(st.integers(1, 5), st.integers(1, 6)),
        elements=st.floats(-30, 30, width=32),
    )
)
def test_row_softmax_rows_are_distributions(x):
    out = ad.row_softmax(ad.Tensor(x)).data
    assert np.all(out >= 0) and np.all(out <= 1)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# finite-difference checks for every primitive


def _away_from(x, kinks, margin=0.08):
    """Nudge entries off non-differentiable points so FD is valid."""
    for k in kinks:
        near = np.abs(x - k) < margin
        x = np.where(near, k + 2 * margin * np.sign(x - k + 1e-9), x)
    return x.astype(np.float32)


def _op_cases(rng):
    def u(*shape, lo=-2.0, hi=2.0):
        return rng.uniform(lo, hi, shape).astype(np.float32)

    n, m, k = 3, 4, 2
    yield "add", lambda a, b: ad.add(a, b), [u(n, m), u(n, m)]
    yield "sub", lambda a, b: ad.sub(a, b), [u(n, m), u(n, m)]
    yield "mul", lambda a, b: ad.mul(a, b), [u(n, m), u(n, m)]
    div_b = rng.uniform(0.4, 2.0, (n, m)).astype(np.float32) * rng.choice([-1.0, 1.0], (n, m)).astype(np.float32)
    yield "div", lambda a, b: ad.div(a, b), [u(n, m), div_b]
    yield "scalar_mul", lambda a: ad.scalar_mul(a, -1.7), [u(n, m)]
    yield "add_scalar", lambda a: ad.add_scalar(a, 0.9), [u(n, m)]
    yield "relu", lambda a: ad.relu(a), [_away_from(u(n, m), [0.0])]
    yield "clamp_min", lambda a: ad.clamp_min(a, 0.25), [_away_from(u(n, m), [0.25])]
    yield "exp", lambda a: ad.exp(a), [u(n, m)]
    yield "log", lambda a: ad.log(a), [u(n, m, lo=0.1, hi=2.2)]
    yield "square", lambda a: ad.square(a), [u(n, m)]
    yield "sqrt", lambda a: ad.sqrt(a), [u(n, m, lo=0.1, hi=2.2)]
    yield "matmul", lambda a, b: ad.matmul(a, b), [u(n, m), u(m, k)]
    yield "bmm", lambda a, b: ad.bmm(a, b), [u(2, n, m), u(2, m, k)]
    yield "reshape", lambda a: ad.reshape(a, (m, n)), [u(n, m)]
    yield "transpose", lambda a: ad.transpose(a, (1, 0)), [u(n, m)]
    yield "expand_to", lambda a: ad.expand_to(a, (k, n, m)), [u(n, m)]
    yield "concat", lambda a, b: ad.concat([a, b], axis=0), [u(n, m), u(n, m)]
    ids = rng.integers(0, n, size=5)
    yield "gather_rows", lambda t: ad.gather_rows(t, ids), [u(n, m)]
    yield "sum_all", lambda a: ad.tsum(a), [u(n, m)]
    yield "sum_axis", lambda a: ad.tsum(a, axis=1), [u(n, m)]
    yield "sum_keepdims", lambda a: ad.tsum(a, axis=(0,), keepdims=True), [u(n, m)]
    yield "mean_all", lambda a: ad.tmean(a), [u(n, m)]
    yield "mean_axis", lambda a: ad.tmean(a, axis=0), [u(n, m)]
    yield "row_softmax", lambda a: ad.row_softmax(a), [u(n, m)]
    onehot = np.eye(m, dtype=np.float32)[rng.integers(0, m, size=n)]
    yield "cross_entropy", lambda a: ad.cross_entropy_with_logits(a, onehot), [u(n, m)]


def test_every_primitive_matches_finite_differences():
    worst = {}
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        for name, fn, arrays in _op_cases(rng):
            err = check_op_gradient(fn, arrays, rng, tol=1e-3)
            worst[name] = max(worst.get(name, 0.0), err)
    # every op kind exercised in every trial
    assert len(worst) == 26


# ---------------------------------------------------------------------------
# optimizers


def test_sgd_single_step():
    p = ad.Tensor([1.0], requires_grad=True)
    state = ad.OptimizerState(kind="sgd", learning_rate=0.1)
    ad.optimizer_step(state, {"p": p}, {"p": np.array([0.5], np.float32)})
    np.testing.assert_allclose(p.data, [0.95], atol=1e-7)


def test_adam_first_step_is_one_lr():
    p = ad.Tensor([3.0], requires_grad=True)
    state = ad.OptimizerState(kind="adam", learning_rate=0.1)
    ad.optimizer_step(state, {"p": p}, {"p": np.array([1.0], np.float32)})
    np.testing.assert_allclose(p.data, [2.9], atol=1e-6)


def test_sgd_converges_on_quadratic():
    p = ad.Tensor([0.0], requires_grad=True)
    state = ad.OptimizerState(kind="sgd", learning_rate=0.1)
    for _ in range(100):
        with ad.Tape() as tape:
            diff = ad.add_scalar(p, -3.0)
            loss = ad.tsum(ad.square(diff))
            tape.backward(loss)
            g = tape.grad(p)
        ad.optimizer_step(state, {"p": p}, {"p": g})
    assert abs(p.item() - 3.0) < 1e-4


def test_missing_gradient_rejected():
    p = ad.Tensor([1.0], requires_grad=True)
    state = ad.OptimizerState(kind="sgd", learning_rate=0.1)
    with pytest.raises(ValueError, match="missing gradient"):
        ad.optimizer_step(state, {"p": p}, {})
