import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from earlysepsis import diffcore as dc
from earlysepsis.errors import ContractError, FactorizationError, ShapeError

from oracles import central_diff, rel_err


def random_spd(rng, n, cond=10.0):
    Q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    w = np.geomspace(1.0, cond, n)
    return Q @ np.diag(w) @ Q.T


def grad_of(build, *arrays):
    leaves = [dc.leaf(a) for a in arrays]
    grads = dc.backward(build(*leaves))
    return [grads[l] for l in leaves]


def value_of(build, *arrays):
    return float(build(*[dc.constant(a) for a in arrays]).value)


def check_grad(build, *arrays, tol=1e-4):
    analytic = grad_of(build, *arrays)
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = list(arrays)
            args[i] = x
            return value_of(build, *args)
        assert rel_err(analytic[i], central_diff(f, a)) < tol, f"input {i}"


# ------------------------------------------------------------------ forward values

def test_relu_values():
    assert np.array_equal(dc.relu(dc.constant([-1.0, 0.0, 2.0])).value, [0.0, 0.0, 2.0])


def test_cholesky_identity():
    assert np.array_equal(dc.cholesky(dc.constant(np.eye(2))).value, np.eye(2))


def test_layer_norm_population_std():
    out = dc.layer_norm(dc.constant([1.0, 2.0, 3.0]), np.ones(3), np.zeros(3)).value
    x = np.array([1.0, 2.0, 3.0])
    expected = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
    np.testing.assert_allclose(out, expected, atol=1e-12)
    np.testing.assert_allclose(out, [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_forward_op_dispatch_matches_direct_call():
    x = dc.constant([[1.0, -2.0], [3.0, 0.5]])
    assert np.array_equal(dc.forward_op("relu", x).value, dc.relu(x).value)
    assert np.array_equal(dc.forward_op("sum", x, axis=0).value, x.value.sum(axis=0))
    with pytest.raises(ContractError):
        dc.forward_op("conv3d", x)


def test_kron_matvec_matches_dense_kron():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(3, 2)), rng.normal(size=(4, 5))
    v = rng.normal(size=10)
    np.testing.assert_allclose(dc.kron_structured_matvec(A, B, v).value, np.kron(A, B) @ v, atol=1e-12)


def test_causal_conv_examples():
    x = dc.constant([[1.0, 2.0, 3.0, 4.0]])
    k = np.ones((1, 1, 2))
    assert np.array_equal(dc.causal_dilated_conv(x, k, 1).value[0], [1, 3, 5, 7])
    assert np.array_equal(dc.causal_dilated_conv(x, k, 2).value[0], [1, 2, 4, 6])


def test_bce_gradient_at_zero_logit():
    z = dc.leaf(0.0)
    grads = dc.backward(dc.bce_with_logits(z, 1.0))
    assert grads[z] == pytest.approx(-0.5)


def test_sum_gradient_is_ones():
    x = dc.leaf(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(dc.backward(dc.sum(x))[x], np.ones((2, 3)))


# ------------------------------------------------------------------ errors

def test_shape_errors_name_op_and_dims():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match="layer_norm"):
        dc.layer_norm(np.ones((2, 3)), np.ones(2), np.zeros(3))
    with pytest.raises(ShapeError, match="add"):
        dc.add(np.ones(3), np.ones(4))


def test_cholesky_reports_failing_pivot():
    A = np.diag([1.0, 2.0, -1.0, 4.0])
    with pytest.raises(FactorizationError) as info:
        dc.cholesky(A)
    assert info.value.pivot == 2


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        dc.backward(dc.leaf(np.ones(3)) * 2.0)


def test_causal_conv_rejects_zero_dilation():
    with pytest.raises(ContractError):
        dc.causal_dilated_conv(np.ones((1, 3)), np.ones((1, 1, 2)), 0)


# ------------------------------------------------------------------ gradients vs finite differences

RNG = np.random.default_rng(1234)
W3 = RNG.normal(size=3)


@pytest.mark.parametrize("name,build,shapes", [
    ("add", lambda a, b: dc.sum((a + b) * W3), [(3,), (3,)]),
    ("sub_broadcast", lambda a, b: dc.sum(dc.sub(a, b) * W3), [(2, 3), (3,)]),
    ("mul", lambda a, b: dc.sum(dc.elementwise_mul(a, b)), [(2, 3), (2, 3)]),
    ("exp", lambda a: dc.sum(dc.exp(a) * W3), [(3,)]),
    ("sigmoid", lambda a: dc.sum(dc.sigmoid(a) * W3), [(3,)]),
    ("softplus", lambda a: dc.sum(dc.softplus(a) * W3), [(3,)]),
    ("matmul", lambda a, b: dc.sum(dc.matmul(a, b)), [(2, 3), (3, 4)]),
    ("matmul_vec", lambda a, b: dc.sum(dc.matmul(a, b) * np.array([1.0, -2.0])), [(2, 3), (3,)]),
    ("matmul_batched", lambda a, b: dc.sum(dc.matmul(a, b) * 0.3), [(2, 2, 3), (3, 2)]),
    ("kron", lambda a, b, v: dc.sum(dc.kron_structured_matvec(a, b, v) * np.arange(12.0)), [(3, 2), (4, 3), (6,)]),
    ("mean_axis", lambda a: dc.sum(dc.mean(a, axis=1) * np.array([1.0, 3.0])), [(2, 3)]),
    ("transpose", lambda a: dc.sum(dc.transpose(a) @ np.arange(2.0)), [(2, 3)]),
    ("index_fancy", lambda a: dc.sum(dc.index(a, np.array([0, 2, 0])) * np.array([1.0, 2.0, 3.0])), [(3,)]),
    ("bce", lambda a: dc.sum(dc.bce_with_logits(a, np.array([1.0, 0.0, 1.0]))), [(3,)]),
])
def test_op_gradients(name, build, shapes):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    arrays = [rng.normal(size=s) for s in shapes]
    check_grad(build, *arrays)


def test_log_and_relu_gradients_away_from_kinks():
    a = np.array([0.5, 1.5, 3.0])
    check_grad(lambda x: dc.sum(dc.log(x) * W3), a)
    check_grad(lambda x: dc.sum(dc.relu(x) * W3), np.array([-1.0, 0.7, 2.0]))


def test_layer_norm_gradient():
    rng = np.random.default_rng(2)
    x, g, b = rng.normal(size=(2, 4, 5)), rng.normal(size=4), rng.normal(size=4)
    w = rng.normal(size=(2, 4, 5))
    check_grad(lambda x, g, b: dc.sum(dc.layer_norm(x, g, b, axis=-2) * w), x, g, b)


@pytest.mark.parametrize("dilation", [1, 2, 4])
def test_causal_conv_gradient(dilation):
    rng = np.random.default_rng(dilation)
    x, k = rng.normal(size=(2, 3, 7)), rng.normal(size=(4, 3, 2))
    w = rng.normal(size=(2, 4, 7))
    check_grad(lambda x, k: dc.sum(dc.causal_dilated_conv(x, k, dilation) * w), x, k)


def test_cholesky_gradient_4x4_spd():
    rng = np.random.default_rng(3)
    A = random_spd(rng, 4)
    analytic = grad_of(lambda a: dc.sum(dc.cholesky(a)), A)[0]
    numeric = central_diff(lambda a: float(np.linalg.cholesky(0.5 * (a + a.T)).sum()), A, eps=1e-5)
    assert rel_err(analytic, numeric) < 1e-5


@pytest.mark.parametrize("n,block", [(7, 3), (12, 4), (9, 64)])
def test_blocked_cholesky_gradient_multi_block(n, block):
    rng = np.random.default_rng(n)
    A = random_spd(rng, n, cond=50.0)
    W = rng.normal(size=(n, n))
    analytic = grad_of(lambda a: dc.sum(dc.cholesky(a, block=block) * W), A)[0]
    numeric = central_diff(lambda a: float((np.linalg.cholesky(0.5 * (a + a.T)) * W).sum()), A)
    assert rel_err(analytic, numeric) < 1e-6


@pytest.mark.parametrize("trans", [False, True])
def test_triangular_solve_gradient(trans):
    rng = np.random.default_rng(5)
    L = np.tril(rng.normal(size=(4, 4))) + 3 * np.eye(4)
    B = rng.normal(size=(4, 2))
    W = rng.normal(size=(4, 2))
    build = lambda l, b: dc.sum(dc.triangular_solve(l, b, trans) * W)
    gl, gb = grad_of(build, L, B)
    fl = central_diff(lambda l: value_of(build, np.tril(l), B), L)
    fb = central_diff(lambda b: value_of(build, L, b), B)
    assert rel_err(gl, np.tril(fl)) < 1e-6
    assert rel_err(gb, fb) < 1e-6


# ------------------------------------------------------------------ properties

@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 8), seed=st.integers(0, 2**31 - 1), logc=st.floats(0.0, 5.9))
def test_cholesky_reconstruction(n, seed, logc):
    A = random_spd(np.random.default_rng(seed), n, cond=10 ** logc)
    L = dc.cholesky(A).value
    assert np.linalg.norm(L @ L.T - A) / np.linalg.norm(A) < 1e-10


def test_backward_is_bitwise_deterministic():
    rng = np.random.default_rng(9)
    A, B, x = random_spd(rng, 6), rng.normal(size=(6, 3)), rng.normal(size=(3, 4, 6))
    k = rng.normal(size=(2, 4, 2))

    def run():
        a, b, xs, kk = dc.leaf(A), dc.leaf(B), dc.leaf(x), dc.leaf(k)
        L = dc.cholesky(a)
        s = dc.triangular_solve(L, b)
        y = dc.causal_dilated_conv(xs, kk, 2)
        loss = dc.sum(s * s) + dc.mean(dc.relu(y)) + dc.sum(dc.layer_norm(y, np.ones(2), np.zeros(2), axis=-2))
        g = dc.backward(loss)
        return [g[n].copy() for n in (a, b, xs, kk)]

    for g1, g2 in zip(run(), run()):
        assert np.array_equal(g1, g2)


def test_backward_resets_between_calls():
    x = dc.leaf(np.array([1.0, 2.0]))
    loss = dc.sum(x * x)
    first = dc.backward(loss)[x].copy()
    second = dc.backward(loss)[x]
    assert np.array_equal(first, second)


def test_shared_subexpression_accumulates():
    x = dc.leaf(np.array([1.5, -0.5]))
    y = dc.exp(x)
    loss = dc.sum(y * y + y)
    g = dc.backward(loss)[x]
    np.testing.assert_allclose(g, 2 * np.exp(2 * x.value) + np.exp(x.value))


def test_numpy_left_operand_defers_to_node():
    x = dc.leaf(np.array([1.0, 2.0]))
    out = np.array([3.0, 4.0]) * x
    assert isinstance(out, dc.Node)
    assert np.array_equal(dc.backward(dc.sum(out))[x], [3.0, 4.0])
