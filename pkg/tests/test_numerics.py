import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sicl import numerics as nx
from sicl.errors import ContractError, DomainError, ShapeError
from sicl.numerics import Tape, Tensor


def matmul_loops(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def conv1d_loops(x, w, stride=1):
    c_in, t = x.shape
    c_out, _, k = w.shape
    t_out = (t - k) // stride + 1
    out = np.zeros((c_out, t_out))
    for o in range(c_out):
        for p in range(t_out):
            for c in range(c_in):
                for j in range(k):
                    out[o, p] += w[o, c, j] * x[c, p * stride + j]
    return out


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    out = nx.matmul([[1, 0], [0, 1]], [[3, 4], [5, 6]])
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_hand():
    assert nx.matmul([[1, 2]], [[3], [4]]).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(nx.matmul(a, b).data, matmul_loops(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


# ---------------------------------------------------------------- conv1d

def test_conv1d_delta_kernel():
    out = nx.conv1d([[1.0, 2, 3, 4]], [[[1.0, 0, 0]]])
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_conv1d_sum_kernel():
    out = nx.conv1d([[1.0, 1, 1]], [[[1.0, 1, 1]]], stride=1)
    np.testing.assert_array_equal(out.data, [[3.0]])


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv1d_matches_loops(stride):
    rng = np.random.default_rng(stride)
    x, w = rng.standard_normal((3, 20)), rng.standard_normal((4, 3, 5))
    out = nx.conv1d(x, w, stride=stride)
    assert out.shape == (4, (20 - 5) // stride + 1)
    np.testing.assert_allclose(out.data, conv1d_loops(x, w, stride), atol=1e-12)


def test_conv1d_batched_matches_single():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((3, 2, 12)), rng.standard_normal((4, 2, 3)), rng.standard_normal(4)
    batched = nx.conv1d(x, w, b).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], conv1d_loops(x[i], w) + b[:, None], atol=1e-12)


def test_conv1d_kernel_too_long():
    with pytest.raises(ShapeError):
        nx.conv1d(np.ones((1, 3)), np.ones((1, 1, 4)))


def test_conv1d_channel_mismatch():
    with pytest.raises(ShapeError):
        nx.conv1d(np.ones((2, 10)), np.ones((1, 3, 4)))


# ---------------------------------------------------------------- backward

def test_square_gradient():
    tape = Tape()
    x = tape.watch(3.0)
    (g,) = nx.grad(nx.mul(x, x), x)
    assert g == pytest.approx(6.0)


def test_relu_gate_gradient():
    tape = Tape()
    x = tape.watch([-1.0, 2.0])
    (g,) = nx.grad(nx.sum(nx.relu(x)), x)
    np.testing.assert_array_equal(g, [0.0, 1.0])


def test_non_scalar_root_rejected():
    tape = Tape()
    x = tape.watch([1.0, 2.0])
    with pytest.raises(ContractError):
        nx.backward(tape, nx.mul(x, 2.0))


def test_untracked_inputs_get_no_gradient():
    tape = Tape()
    x = tape.watch([1.0, 2.0])
    c = Tensor([3.0, 4.0])
    g = nx.backward(tape, nx.sum(nx.mul(x, c)))
    assert set(g) == {x.node}
    np.testing.assert_array_equal(g[x.node], [3.0, 4.0])


def test_mixing_tapes_is_an_error():
    a, b = Tape().watch(1.0), Tape().watch(2.0)
    with pytest.raises(ContractError):
        nx.add(a, b)


def test_tape_is_topologically_ordered_and_visited_once():
    tape = Tape()
    x = tape.watch(np.arange(3.0))
    y = nx.exp(nx.mul(x, 0.1))
    root = nx.sum(nx.add(nx.mul(y, y), y))
    for i, node in enumerate(tape.nodes):
        assert all(src < i for src in node.inputs if src is not None)
    calls = []
    for node in tape.nodes:
        if node.vjp is not None:
            fn = node.vjp
            node.vjp = (lambda f, idx: lambda g: (calls.append(idx), f(g))[1])(fn, id(node))
    nx.backward(tape, root)
    assert len(calls) == len(set(calls)) == sum(n.vjp is not None for n in tape.nodes)


def test_tensor_is_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_plain_ops_do_not_record():
    out = nx.relu(nx.add(Tensor([1.0]), 2.0))
    assert not out.tracked


# ---------------------------------------------------------------- per-primitive gradient checks

def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


UNARY = {
    "relu": (lambda t: nx.relu(t), lambda rng: rng.standard_normal((3, 4))),
    "exp": (lambda t: nx.exp(t), lambda rng: rng.standard_normal((3, 4))),
    "log": (lambda t: nx.log(t), lambda rng: _positive(rng, (3, 4))),
    "neg": (lambda t: nx.neg(t), lambda rng: rng.standard_normal((3, 4))),
    "softmax0": (lambda t: nx.softmax(t, axis=0), lambda rng: rng.standard_normal((3, 4))),
    "softmax1": (lambda t: nx.softmax(t, axis=1), lambda rng: rng.standard_normal((3, 4))),
    "log_softmax": (lambda t: nx.log_softmax(t, axis=1), lambda rng: rng.standard_normal((3, 4))),
    "sum_axis": (lambda t: nx.sum(t, axis=1), lambda rng: rng.standard_normal((3, 4))),
    "mean_axis": (lambda t: nx.mean(t, axis=0), lambda rng: rng.standard_normal((3, 4))),
    "l2_normalize": (lambda t: nx.l2_normalize(t, axis=1), lambda rng: rng.standard_normal((3, 4))),
    "gap": (lambda t: nx.global_avg_pool(t), lambda rng: rng.standard_normal((2, 3, 5))),
    "transpose": (lambda t: nx.transpose(t), lambda rng: rng.standard_normal((3, 4))),
    "reshape": (lambda t: nx.reshape(t, (4, 3)), lambda rng: rng.standard_normal((3, 4))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    op, make = UNARY[name]
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = make(rng)
        out_shape = op(Tensor(x)).shape
        c = rng.standard_normal(out_shape)
        tape = Tape()
        xt = tape.watch(x)
        (g,) = nx.grad(nx.sum(nx.mul(op(xt), c)), xt)
        fd = nx.numeric_grad(lambda v: float((op(Tensor(v)).data * c).sum()), x, eps=1e-5)
        worst = max(worst, nx.rel_error(g, fd))
    assert worst < 1e-4


BINARY = {
    "add": (nx.add, (3, 4), (4,)),
    "sub": (nx.sub, (3, 4), (3, 1)),
    "mul": (nx.mul, (3, 4), (3, 4)),
    "matmul": (nx.matmul, (3, 4), (4, 2)),
    "conv1d": (nx.conv1d, (2, 3, 9), (4, 3, 3)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_gradients(name):
    op, sa, sb = BINARY[name]
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        a, b = rng.standard_normal(sa), rng.standard_normal(sb)
        c = rng.standard_normal(op(Tensor(a), Tensor(b)).shape)
        tape = Tape()
        at, bt = tape.watch(a), tape.watch(b)
        ga, gb = nx.grad(nx.sum(nx.mul(op(at, bt), c)), at, bt)
        fa = nx.numeric_grad(lambda v: float((op(Tensor(v), Tensor(b)).data * c).sum()), a, eps=1e-5)
        fb = nx.numeric_grad(lambda v: float((op(Tensor(a), Tensor(v)).data * c).sum()), b, eps=1e-5)
        worst = max(worst, nx.rel_error(ga, fa), nx.rel_error(gb, fb))
    assert worst < 1e-4


def test_conv1d_bias_and_stride_gradients():
    rng = np.random.default_rng(7)
    x, w, b = rng.standard_normal((2, 3, 11)), rng.standard_normal((4, 3, 3)), rng.standard_normal(4)
    c = rng.standard_normal(nx.conv1d(x, w, b, stride=2).shape)
    tape = Tape()
    xt, wt, bt = tape.watch(x), tape.watch(w), tape.watch(b)
    gx, gw, gb = nx.grad(nx.sum(nx.mul(nx.conv1d(xt, wt, bt, stride=2), c)), xt, wt, bt)
    f = lambda xx, ww, bb: float((nx.conv1d(xx, ww, bb, stride=2).data * c).sum())
    assert nx.rel_error(gx, nx.numeric_grad(lambda v: f(v, w, b), x)) < 1e-6
    assert nx.rel_error(gw, nx.numeric_grad(lambda v: f(x, v, b), w)) < 1e-6
    assert nx.rel_error(gb, nx.numeric_grad(lambda v: f(x, w, v), b)) < 1e-6


def test_concat_gradient():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((3, 4))
    c = rng.standard_normal((3, 6))
    tape = Tape()
    at, bt = tape.watch(a), tape.watch(b)
    ga, gb = nx.grad(nx.sum(nx.mul(nx.concat([at, bt], axis=1), c)), at, bt)
    np.testing.assert_array_equal(ga, c[:, :2])
    np.testing.assert_array_equal(gb, c[:, 2:])


# ---------------------------------------------------------------- normalization invariants

@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_softmax_sums_to_one_and_is_shift_invariant(seed, shift):
    x = np.random.default_rng(seed).normal(0, 5, size=(4, 7))
    s = nx.softmax(x, axis=1).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(nx.softmax(x + shift, axis=1).data, s, atol=1e-12, rtol=0)


@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_l2_normalize_unit_norm(seed, scale):
    x = np.random.default_rng(seed).standard_normal((5, 6)) * scale
    u = nx.l2_normalize(x, axis=1).data
    np.testing.assert_allclose(np.linalg.norm(u, axis=1), 1.0, atol=1e-12)


def test_l2_normalize_zero_vector_is_domain_error():
    with pytest.raises(DomainError):
        nx.l2_normalize(np.zeros((2, 3)), axis=1)


def test_log_of_nonpositive_is_domain_error():
    with pytest.raises(DomainError):
        nx.log([1.0, 0.0])


# ---------------------------------------------------------------- random compositions

OPS = ["add", "mul", "sub", "relu", "exp", "softmax", "l2", "tanhish", "matmul"]


def _compose(program, x, w, c):
    """Apply a small program of primitives to ``x`` and project onto ``c``; returns a scalar."""
    h = x
    for op in program:
        if op == "add":
            h = nx.add(h, w)
        elif op == "mul":
            h = nx.mul(h, w)
        elif op == "sub":
            h = nx.sub(w, h)
        elif op == "relu":
            h = nx.relu(h)
        elif op == "exp":
            h = nx.exp(nx.mul(h, 0.3))
        elif op == "softmax":
            h = nx.softmax(h, axis=1)
        elif op == "l2":
            h = nx.l2_normalize(nx.add(h, 3.0), axis=1)
        elif op == "tanhish":
            h = nx.log(nx.add(nx.exp(h), 1.0))
        elif op == "matmul":
            h = nx.matmul(h, nx.reshape(nx.concat([w, w], axis=0), (4, 4)))
    return nx.sum(nx.mul(h, c))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(OPS), min_size=1, max_size=6), st.integers(0, 10_000))
def test_random_graph_matches_finite_differences(program, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 4))
    w = rng.standard_normal((2, 4))
    c = rng.standard_normal((2, 4))
    tape = Tape()
    xt, wt = tape.watch(x), tape.watch(w)
    root = _compose(program, xt, wt, c)
    gx, gw = nx.grad(root, xt, wt)
    fx = nx.numeric_grad(lambda v: _compose(program, Tensor(v), Tensor(w), c).item(), x, eps=1e-6)
    fw = nx.numeric_grad(lambda v: _compose(program, Tensor(x), Tensor(v), c).item(), w, eps=1e-6)
    # some programs have an identically zero gradient (e.g. relu kills every entry); there
    # the relative error is undefined and only finite-difference round-off remains
    for g, f in ((gx, fx), (gw, fw)):
        assert nx.rel_error(g, f) < 1e-5 or np.abs(g - f).max() < 1e-8
