import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rungnn import numerics as nx
from rungnn.numerics import DimensionError, Parameter, Tape, TapeError, Tensor


def num_grad(f, x, eps=1e-6):
    """Central-difference gradient of a scalar numpy function (independent of the tape)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        o = flat[i]
        flat[i] = o + eps
        fp = f(x)
        flat[i] = o - eps
        fm = f(x)
        flat[i] = o
        gf[i] = (fp - fm) / (2 * eps)
    return g


def tape_grad(build, x):
    p = Parameter(np.array(x, dtype=np.float64))
    with Tape() as tape:
        loss = build(p)
    tape.backward(loss)
    return p.grad


# ---------------------------------------------------------------- primitives


def test_sigmoid_zero_and_derivative():
    assert nx.sigmoid(Tensor(0.0)).item() == 0.5
    g = tape_grad(lambda p: nx.total(nx.sigmoid(p)), [0.0])
    num = num_grad(lambda x: float(1 / (1 + np.exp(-x[0]))), [0.0])
    assert abs(g[0] - 0.25) < 1e-12
    assert abs(g[0] - num[0]) < 1e-6


def test_hadamard_ones_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(nx.hadamard(Tensor(x), Tensor(np.ones((3, 4)))).data, x)


def test_shape_errors_name_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(DimensionError):
        nx.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=-1)


@pytest.mark.parametrize("name", ["add", "sub", "mul", "matmul", "linear", "concat", "tanh", "relu",
                                  "sigmoid", "scale_rows", "dot_rows", "logsumexp", "take"])
def test_primitive_gradients(name):
    rng = np.random.default_rng(1)
    A = rng.normal(size=(3, 4))
    B = rng.normal(size=(3, 4))
    M = rng.normal(size=(4, 2))
    w = rng.normal(size=3)
    ops = {
        "add": (lambda a: nx.add(a, B), lambda a: a + B),
        "sub": (lambda a: nx.sub(B, a), lambda a: B - a),
        "mul": (lambda a: nx.mul(a, B), lambda a: a * B),
        "matmul": (lambda a: nx.matmul(a, M), lambda a: a @ M),
        "linear": (lambda a: nx.linear(a, M.T, np.ones(2)), lambda a: a @ M + 1),
        "concat": (lambda a: nx.concat([a, B], axis=-1), lambda a: np.concatenate([a, B], -1)),
        "tanh": (nx.tanh, np.tanh),
        "relu": (nx.relu, lambda a: np.maximum(a, 0)),
        "sigmoid": (nx.sigmoid, lambda a: 1 / (1 + np.exp(-a))),
        "scale_rows": (lambda a: nx.scale_rows(a, w), lambda a: a * w[:, None]),
        "dot_rows": (lambda a: nx.dot_rows(a, B), lambda a: (a * B).sum(1)),
        "logsumexp": (nx.logsumexp_rows, lambda a: np.log(np.exp(a).sum(1))),
        "take": (lambda a: nx.take(a, [0, 2, 2], [1, 3, 3]), lambda a: a[[0, 2, 2], [1, 3, 3]]),
    }
    op, ref = ops[name]

    np.testing.assert_allclose(op(Tensor(A)).data, ref(A), atol=1e-12)
    C = rng.normal(size=ref(A).shape)  # fixed cotangent so the loss is not symmetric
    g = tape_grad(lambda p: nx.total(nx.mul(op(p), Tensor(C))), A)
    num = num_grad(lambda x: float((ref(x) * C).sum()), A)
    np.testing.assert_allclose(g, num, atol=1e-6)


# ---------------------------------------------------------------- grouped ops


def test_scatter_softmax_examples():
    assert nx.scatter_softmax(Tensor([3.0]), [0]).data.tolist() == [1.0]
    np.testing.assert_allclose(nx.scatter_softmax(Tensor([2.0, 2.0]), [0, 0]).data, [0.5, 0.5])
    y = nx.scatter_softmax(Tensor([1000.0, 1000.5]), [0, 0]).data
    assert np.all(np.isfinite(y))
    oracle = np.exp(np.array([0.0, 0.5]) - 0.5)
    np.testing.assert_allclose(y, oracle / oracle.sum(), rtol=1e-12)
    assert abs(y.sum() - 1) < 1e-12
    assert len(nx.scatter_softmax(Tensor(np.zeros(0)), np.zeros(0, int)).data) == 0


@given(st.integers(0, 10_000), st.integers(1, 60), st.integers(1, 10))
def test_scatter_softmax_normalized(seed, E, G):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=50, size=E)
    groups = rng.integers(G, size=E)
    y = nx.scatter_softmax(Tensor(logits), groups, G).data
    sums = np.bincount(groups, weights=y, minlength=G)
    present = np.bincount(groups, minlength=G) > 0
    assert np.all(np.abs(sums[present] - 1) <= 1e-6)
    assert np.all((y > 0) | (logits < logits.max() - 700)) and np.all(y <= 1)


def test_scatter_softmax_gradient():
    rng = np.random.default_rng(3)
    x = rng.normal(size=12)
    groups = rng.integers(4, size=12)
    c = rng.normal(size=12)

    def ref(v):
        out = np.zeros_like(v)
        for g in np.unique(groups):
            sel = groups == g
            e = np.exp(v[sel] - v[sel].max())
            out[sel] = e / e.sum()
        return float((out * c).sum())

    g = tape_grad(lambda p: nx.total(nx.mul(nx.scatter_softmax(p, groups, 4), Tensor(c))), x)
    np.testing.assert_allclose(g, num_grad(ref, x), atol=1e-7)


def test_scatter_sum_examples_and_oracle():
    v = np.random.default_rng(4).normal(size=(3, 2))
    np.testing.assert_array_equal(nx.scatter_sum(Tensor(v), [0, 1, 2], 3).data, v)
    pair = np.stack([v[0], -v[0]])
    np.testing.assert_array_equal(nx.scatter_sum(Tensor(pair), [0, 0], 1).data, np.zeros((1, 2)))
    rng = np.random.default_rng(5)
    vals = rng.normal(size=(50, 3))
    groups = rng.integers(7, size=50)
    naive = np.zeros((7, 3))
    for i in range(50):
        naive[groups[i]] += vals[i]
    np.testing.assert_allclose(nx.scatter_sum(Tensor(vals), groups, 7).data, naive, atol=1e-12)


def test_weighted_edge_sum_matches_composition():
    rng = np.random.default_rng(6)
    w, vals = rng.random(9), rng.normal(size=(5, 3))
    src, dst = rng.integers(5, size=9), rng.integers(4, size=9)
    ref = nx.scatter_sum(nx.scale_rows(nx.gather_rows(Tensor(vals), src), Tensor(w)), dst, 4).data
    np.testing.assert_allclose(nx.weighted_edge_sum(Tensor(w), Tensor(vals), src, dst, 4).data, ref,
                               atol=1e-12)
    c = rng.normal(size=(4, 3))
    g1 = tape_grad(lambda p: nx.total(nx.mul(nx.weighted_edge_sum(Tensor(w), p, src, dst, 4), Tensor(c))), vals)
    g2 = num_grad(lambda x: float(((np.stack([w[dst == o] @ x[src[dst == o]] for o in range(4)])) * c).sum()),
                  vals)
    np.testing.assert_allclose(g1, g2, atol=1e-7)


def test_gated_fusion_matches_composition():
    rng = np.random.default_rng(7)
    d = 3
    pu, pf, hr, hm = (rng.normal(size=(4, d)) for _ in range(4))
    Wc, bc = rng.normal(size=(d, d)), rng.normal(size=d)

    def ref(pu, pf, hr, hm, Wc, bc):
        gu, gf = 1 / (1 + np.exp(-pu)), 1 / (1 + np.exp(-pf))
        hc = np.tanh((hm + gf * hr) @ Wc.T + bc)
        return (1 - gu) * hr + gu * hc

    args = [pu, pf, hr, hm, Wc, bc]
    out = nx.gated_fusion(*map(Tensor, args)).data
    np.testing.assert_allclose(out, ref(*args), atol=1e-14)
    c = rng.normal(size=(4, d))
    for k in range(6):
        def build(p, k=k):
            xs = [Tensor(a) for a in args]
            xs[k] = p
            return nx.total(nx.mul(nx.gated_fusion(*xs), Tensor(c)))

        def f(x, k=k):
            xs = list(args)
            xs[k] = x
            return float((ref(*xs) * c).sum())

        np.testing.assert_allclose(tape_grad(build, args[k]), num_grad(f, args[k]), atol=1e-7)


# ---------------------------------------------------------------- tape behaviour


def test_backward_accumulates_and_scales():
    rng = np.random.default_rng(8)
    W = Parameter(rng.normal(size=(2, 3)))
    x = rng.normal(size=(3, 1))

    def run(scale=1.0):
        with Tape() as tape:
            loss = nx.total(nx.mul(nx.matmul(W, Tensor(x)), nx.matmul(W, Tensor(x))))
        tape.backward(loss, scale=scale)

    run()
    g1 = W.grad.copy()
    run()
    np.testing.assert_array_equal(W.grad, 2 * g1)
    W.zero_grad()
    run(scale=4.0)
    np.testing.assert_array_equal(W.grad, 4 * g1)


def test_backward_detached_raises():
    with pytest.raises(TapeError):
        nx.backward(Tensor(1.0))
    p = Parameter([1.0])
    with Tape():
        loss = nx.total(p)
    with pytest.raises(TapeError):
        Tape().backward(loss)


def test_reverse_order_and_clear():
    p = Parameter(np.ones(2))
    with Tape() as tape:
        a = nx.tanh(p)
        b = nx.mul(a, a)
        loss = nx.total(b)
    assert [r.out for r in tape.records] == [a, b, loss]
    tape.backward(loss)
    tape.clear()
    assert len(tape) == 0 and loss._tape is None


def test_tapes_are_per_thread():
    p = Parameter(np.ones(3))
    seen = []

    def worker():
        with Tape() as t:
            nx.total(nx.tanh(p))
        seen.append(len(t))

    with Tape() as main:
        th = threading.Thread(target=worker)
        th.start()
        th.join()
        nx.total(p)
    assert seen == [2] and len(main) == 1


# ---------------------------------------------------------------- finite differences


def test_finite_diff_quadratic():
    rng = np.random.default_rng(9)
    W = Parameter(rng.normal(size=(3, 4)), name="W")
    x = rng.normal(size=(4, 1))

    def loss():
        y = nx.matmul(W, Tensor(x))
        return nx.total(nx.mul(y, y))

    rep = nx.finite_diff_check(loss, [W], epsilon=1e-5)
    assert rep.passed and rep.worst < 1e-7
    W.zero_grad()
    with Tape() as t:
        out = loss()
    t.backward(out)
    np.testing.assert_allclose(W.grad, 2 * W.data @ x @ x.T, rtol=1e-12)


def test_finite_diff_empty_and_flags():
    assert nx.finite_diff_check(lambda: Tensor(0.0), []).max_rel_error == {}
    p = Parameter(np.array([1.0, 2.0]), name="p")

    def wrong():
        # gradient silently dropped for the second entry
        return nx.add(nx.total(nx.mul(p, p)), Tensor(p.data[1] ** 3))

    rep = nx.finite_diff_check(wrong, [p])
    assert not rep.passed and rep.flagged[0][:2] == ("p", 1)


def test_finite_diff_requires_float64():
    with nx.precision("float32"):
        p = Parameter(np.ones(2))
    with pytest.raises(TypeError):
        nx.finite_diff_check(lambda: nx.total(p), [p])


def test_precision_context():
    with nx.precision("float32"):
        assert Parameter(np.ones(2)).dtype == np.float32
    assert Parameter(np.ones(2)).dtype == np.float64


def test_debug_mode_catches_nonfinite(monkeypatch):
    monkeypatch.setattr(nx, "DEBUG", True)
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        nx.mul(Tensor([np.inf]), Tensor([0.0]))
