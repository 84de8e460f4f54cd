import zlib

import numpy as np
import pytest

from ctxseg import tensor as T
from ctxseg.gradcheck import gradcheck
from ctxseg.optim import AdamState, adam_step
from ctxseg.rng import RNG_ALGORITHM, get_state, make_rng, set_state, stream_id
from ctxseg.tensor import NonFiniteError, Tape, TapeError, Tensor, tensor


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def test_matmul_identity_and_zero():
    b = tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((tensor(np.eye(2)) @ b).data, b.data)
    z = tensor(np.zeros((2, 3))) @ tensor(np.random.default_rng(0).normal(size=(3, 2)))
    assert np.array_equal(z.data, np.zeros((2, 2)))


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    got = (tensor(a) @ tensor(b)).data
    ref = naive_matmul(a, b)
    assert np.max(np.abs(got - ref) / np.abs(ref)) <= 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        tensor(np.ones((2, 3))) @ tensor(np.ones((2, 3)))


def test_identity_matmul_is_exact(rng):
    a = rng.normal(size=(6, 6)).astype(np.float32)
    assert np.array_equal((Tensor(np.eye(6, dtype=np.float32)) @ Tensor(a)).data, a)


def test_softmax_closed_forms():
    assert np.allclose(T.softmax(tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    assert T.softmax(tensor([[5.0]])).data[0, 0] == 1.0
    assert np.allclose(T.softmax(tensor([0.0, np.log(2.0)])).data, [1 / 3, 2 / 3], atol=1e-15)


def test_softmax_normalised_and_shift_invariant(rng):
    for _ in range(20):
        x = rng.uniform(-10, 10, size=(5, 7))
        c = rng.uniform(-50, 50)
        p = T.softmax(tensor(x), axis=1).data
        assert np.all(p >= 0)
        assert np.abs(p.sum(axis=1) - 1).max() <= 1e-6
        assert np.abs(T.softmax(tensor(x + c), axis=1).data - p).max() <= 1e-6


def test_backward_sum_of_squares(rng):
    x = tensor(rng.normal(size=5), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(T.square(x))
    tape.backward(loss)
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_constant_loss_gives_zero_grad():
    x = tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(tensor(np.ones(3)))
    (g,) = tape.backward(loss, wrt=[x])
    assert np.array_equal(g, np.zeros(3))


def test_backward_twice_is_an_error():
    x = tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(x * x)
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)
    tape.reset()
    with tape:
        loss = T.tsum(x * 3.0)
    tape.backward(loss)
    assert np.allclose(x.grad, 3.0)


def test_backward_needs_scalar():
    x = tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(TapeError):
        tape.backward(y)


def test_tape_is_topologically_ordered(rng):
    x = tensor(rng.normal(size=(3, 3)), requires_grad=True)
    with Tape() as tape:
        y = T.relu(x @ x)
        z = T.tsum(T.exp(y * 0.1))
    produced = set()
    for rec in tape.records:
        for inp in rec.inputs:
            assert id(inp) in produced or not any(r.output is inp for r in tape.records)
        produced.add(id(rec.output))
    assert tape.records[-1].output is z


def test_non_finite_raises():
    with pytest.raises(NonFiniteError), np.errstate(divide="ignore"):
        T.log(tensor([0.0]))
    with pytest.raises(NonFiniteError):
        tensor([np.nan])


def test_no_tape_records_nothing(rng):
    x = tensor(rng.normal(size=3), requires_grad=True)
    with Tape() as tape:
        with T.no_tape():
            T.exp(x)
        T.exp(x)
    assert len(tape) == 1


def test_count_ops_by_scope():
    x = tensor(np.ones(2))
    with T.count_ops() as c:
        with T.scope("a"):
            x + x
            x * x
        T.relu(x)
    assert c[("a", "add")] == 1 and c[("a", "mul")] == 1 and c[("", "relu")] == 1


# -- gradient checks of every public op ------------------------------------

def _u(rng, *shape):
    return tensor(rng.uniform(-1, 1, size=shape))


ELEMENTWISE = {
    "add": lambda a, b: T.tsum((a + b) * (a + b)),
    "sub": lambda a, b: T.tsum((a - b) * (a - b)),
    "mul": lambda a, b: T.tsum(a * b * a),
    "div": lambda a, b: T.tsum(a / (T.square(b) + 1.0)),
    "neg": lambda a, b: T.tsum(-a * b),
    "relu": lambda a, b: T.tsum(T.relu(a) * b),
    "exp": lambda a, b: T.tsum(T.exp(a) * b),
    "log": lambda a, b: T.tsum(T.log(T.square(a) + 0.5) * b),
    "sqrt": lambda a, b: T.tsum(T.sqrt(T.square(a) + 0.5) * b),
    "where": lambda a, b: T.tsum(T.where(a.data > 0, a * a, b) * b),
}

STRUCTURAL = {
    "matmul": lambda a, b: T.tsum(T.square(a @ T.transpose(b))),
    "transpose_reshape": lambda a, b: T.tsum(T.reshape(T.transpose(a), (-1,)) * T.reshape(T.transpose(b), (-1,))),
    "concat": lambda a, b: T.tsum(T.square(T.concat([a, b * 2.0], axis=1))),
    "gather": lambda a, b: T.tsum(T.gather(a, np.array([0, 2, 2, 1])) * T.gather(b, np.array([1, 1, 0, 2]))),
    "getitem": lambda a, b: T.tsum(a[1:, ::2] * b[:-1, 1::2]) + T.tsum(a[np.array([0, 0])]),
    "pad": lambda a, b: T.tsum(T.square(T.pad(a, ((1, 0), (0, 2)))) * 0.5),
    "repeat": lambda a, b: T.tsum(T.square(T.repeat(a, 2, axis=0))),
    "segment_sum": lambda a, b: T.tsum(T.square(T.segment_sum(a, np.array([0, 1, 0]), 2))),
    "mean": lambda a, b: T.tsum(T.square(T.mean(a * b, axis=0))),
    "sum": lambda a, b: T.tsum(T.square(T.tsum(a, axis=1, keepdims=True) * b)),
    "norm": lambda a, b: T.tsum(T.norm(a, axis=1) * T.norm(b, axis=1)),
    "softmax": lambda a, b: T.tsum(T.softmax(a, axis=1) * b),
    "log_softmax": lambda a, b: T.tsum(T.log_softmax(a, axis=1) * b),
    "layer_norm": lambda a, b: T.tsum(T.layer_norm(a, b[0], b[1]) * T.exp(a)),
    "linear": lambda a, b: T.tsum(T.square(T.linear(a, T.transpose(b), b[0]))),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_gradcheck_elementwise(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(20):
        a, b = _u(rng, 3, 4), _u(rng, 3, 4)
        worst = max(worst, gradcheck(lambda: ELEMENTWISE[name](a, b), [a, b]))
    assert worst <= 1e-4


@pytest.mark.parametrize("name", sorted(STRUCTURAL))
def test_gradcheck_structural(name):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(20):
        a, b = _u(rng, 3, 3), _u(rng, 3, 3)
        worst = max(worst, gradcheck(lambda: STRUCTURAL[name](a, b), [a, b]))
    assert worst <= 1e-4


def test_gradcheck_needs_real64():
    x = Tensor(np.ones(2, dtype=np.float32))
    with pytest.raises(TypeError):
        gradcheck(lambda: T.tsum(x), [x])


def test_gradcheck_catches_a_wrong_gradient():
    x = tensor(np.array([0.3, -0.7]))

    def broken():
        return T._make("bad", x.data ** 2, (x,), lambda g: (g * x.data,))  # true grad is 2x

    assert gradcheck(lambda: T.tsum(broken()), [x]) > 0.1


def test_broadcast_gradients_are_summed(rng):
    a = tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = tensor(rng.normal(size=(3,)), requires_grad=True)
    with Tape() as tape:
        loss = T.tsum(a * b)
    tape.backward(loss)
    assert np.allclose(b.grad, a.data.sum(axis=0))


# -- optimiser --------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = {"w": tensor(np.array([1.0, -2.0]))}
    adam_step(p, {"w": np.zeros(2)}, AdamState(lr=0.1))
    assert np.array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_closed_form():
    g = np.array([0.5, -3.0, 1e-3])
    p = {"w": tensor(np.zeros(3))}
    st = AdamState(lr=0.01)
    adam_step(p, {"w": g}, st)
    assert np.allclose(p["w"].data, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert st.t == 1 and st.m["w"].shape == (3,)


def scalar_adam(w, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        w = w - lr * mh / (vh ** 0.5 + eps)
    return w


def test_adam_matches_scalar_reference():
    w = tensor(np.array([1.0]), requires_grad=True)
    st = AdamState(lr=0.1)
    for _ in range(10):
        with Tape() as tape:
            loss = T.tsum(T.square(w))
        tape.backward(loss)
        adam_step({"w": w}, {"w": w.grad}, st)
    assert st.t == 10
    assert abs(w.data[0] - scalar_adam(1.0, 10, 0.1)) <= 1e-10


def test_adam_rejects_non_finite():
    p = {"w": tensor(np.zeros(2))}
    with pytest.raises(NonFiniteError):
        adam_step(p, {"w": np.array([np.inf, 0.0])}, AdamState())


# -- rng ------------------------------------------------------------------------

def test_rng_streams_are_reproducible_and_distinct():
    a = make_rng(5, 1).random(8)
    assert np.array_equal(a, make_rng(5, 1).random(8))
    assert not np.array_equal(a, make_rng(5, 2).random(8))
    assert not np.array_equal(a, make_rng(6, 1).random(8))
    assert RNG_ALGORITHM == "pcg64-seedseq-v1"


def test_rng_state_roundtrip():
    r = make_rng(3, 9)
    r.random(5)
    st = get_state(r)
    a = r.random(4)
    r2 = make_rng(0)
    set_state(r2, st)
    assert np.array_equal(a, r2.random(4))


def test_stream_id_stable():
    assert stream_id("doctor") == stream_id("doctor")
    assert stream_id("doctor") != stream_id("nurse")
    assert 0 <= stream_id("x") < 2**64
