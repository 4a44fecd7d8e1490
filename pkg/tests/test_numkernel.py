import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lrtd import numkernel as nk
from lrtd.numkernel import DimensionError, NumericError, Param, Tape, Tensor, grad_check


def test_matmul_identity(rng):
    a = rng.normal(size=(2, 2))
    assert np.array_equal(nk.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)


def test_matmul_hand_value():
    out = nk.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nk.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_tensor_rejects_non_finite():
    with pytest.raises(NumericError):
        Tensor([1.0, float("nan")])
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        nk.scale(Tensor([1e308]), 10.0)


def test_softmax_examples():
    assert np.allclose(nk.softmax_rows(Tensor([[2.0, 2.0, 2.0, 2.0]])).data, 0.25)
    out = nk.softmax_rows(Tensor([[0.0, math.log(3.0)]])).data
    assert np.allclose(out, [[0.25, 0.75]], atol=1e-15)
    sat = nk.softmax_rows(Tensor([[50.0, 0.0, 0.0]])).data
    assert sat[0, 0] >= 1.0 - 1e-20


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-300, 300)),
       st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    s = nk.softmax_rows(Tensor(x)).data
    assert (s >= 0).all()
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-12, rtol=0)
    shifted = nk.softmax_rows(Tensor(x + c)).data
    assert np.allclose(s, shifted, atol=1e-12)


def test_maxpool_examples():
    assert nk.maxpool_time(Tensor([[1.0, 3.0, 2.0, 5.0]]), 2, 2).data.tolist() == [[3.0, 5.0]]
    assert nk.maxpool_time(Tensor(np.zeros((3, 10))), 2, 2).shape == (3, 5)
    const = nk.maxpool_time(Tensor(np.full((2, 7), 4.5)), 3, 2).data
    assert (const == 4.5).all()
    with pytest.raises(DimensionError):
        nk.maxpool_time(Tensor(np.ones((1, 2))), 3, 1)


def test_maxpool_backward_routes_to_first_argmax():
    p = Param("x", [[2.0, 2.0, 1.0, 1.0]])
    with Tape() as tape:
        out = nk.sum_all(nk.maxpool_time(p.tensor(), 2, 2))
    tape.backward(out)
    assert p.grad.tolist() == [[1.0, 0.0, 1.0, 0.0]]


@pytest.mark.parametrize("T,k,s", [(10, 2, 2), (7, 3, 2), (5, 5, 1), (6, 1, 3)])
def test_pooled_length(T, k, s):
    x = np.arange(T, dtype=float)[None]
    assert nk.maxpool_time(Tensor(x), k, s).shape[-1] == (T - k) // s + 1


# ---------------------------------------------------------------- gradients


def test_grad_check_exact_quadratic(rng):
    w = Param("w", rng.normal(size=(5,)))
    err = grad_check(lambda: nk.sum_all(nk.mul(w.tensor(), w.tensor())), [w])
    assert err < 1e-8


def test_grad_check_constant_function(rng):
    w = Param("w", rng.normal(size=(3,)))
    assert grad_check(lambda: Tensor(2.0), [w]) == 0.0
    assert (w.grad == 0).all()


PRIMITIVES = {
    "matmul": lambda ps, r: nk.matmul(ps[0].tensor(), ps[1].tensor()),
    "matmul_batched": lambda ps, r: nk.matmul(ps[2].tensor(), ps[3].tensor()),
    "transpose": lambda ps, r: nk.transpose(ps[3].tensor()),
    "reshape": lambda ps, r: nk.reshape(ps[0].tensor(), (3, 2)),
    "add": lambda ps, r: nk.add(ps[0].tensor(), ps[4].tensor()),
    "add_bias": lambda ps, r: nk.add_bias(ps[2].tensor(), ps[5].tensor(), axis=1),
    "mul": lambda ps, r: nk.mul(ps[0].tensor(), ps[4].tensor()),
    "scale": lambda ps, r: nk.scale(ps[0].tensor(), -1.7),
    "tanh": lambda ps, r: nk.tanh(ps[3].tensor()),
    "sigmoid": lambda ps, r: nk.sigmoid(ps[3].tensor()),
    "slice": lambda ps, r: nk.slice_axis(ps[3].tensor(), 2, 1, 3),
    "take": lambda ps, r: nk.take(ps[3].tensor(), 2, 2),
    "stack": lambda ps, r: nk.stack([ps[0].tensor(), ps[4].tensor()], axis=1),
    "softmax_rows": lambda ps, r: nk.softmax_rows(ps[3].tensor()),
    "maxpool_time": lambda ps, r: nk.maxpool_time(ps[3].tensor(), 2, 2),
    "cross_entropy": lambda ps, r: nk.cross_entropy(ps[0].tensor(), np.array([2, 0])),
}


def primitive_instance(seed: int):
    rng = np.random.default_rng(seed)
    params = [
        Param("a", rng.normal(size=(2, 3))),
        Param("b", rng.normal(size=(3, 4))),
        Param("c", rng.normal(size=(2, 3, 4))),
        Param("d", rng.normal(size=(2, 4, 5))),
        Param("e", rng.normal(size=(2, 3))),
        Param("f", rng.normal(size=(3,))),
    ]
    return params, rng


def primitive_error(name: str, seed: int) -> float:
    params, rng = primitive_instance(seed)
    build = PRIMITIVES[name]
    weights_rng = np.random.default_rng(100 + seed)
    weights = {}

    def f():
        out = build(params, rng)
        if out.data.size == 1:
            return out
        if "w" not in weights:
            # random linear functional so every output coordinate matters
            weights["w"] = Tensor(weights_rng.normal(size=out.shape))
        return nk.sum_all(nk.mul(out, weights["w"]))

    return grad_check(f, params)


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    for seed in range(10):
        assert primitive_error(name, seed) < 1e-4, name


def test_backward_visits_nodes_in_reverse_order(rng):
    w = Param("w", rng.normal(size=(2, 2)))
    with Tape() as tape:
        y = nk.tanh(nk.matmul(w.tensor(), w.tensor()))
        loss = nk.sum_all(nk.sigmoid(y))
    recorded = [n.op for n in tape.nodes]
    visited = tape.backward(loss)
    assert recorded == ["matmul", "tanh", "sigmoid", "sum_all"]
    assert visited == recorded[::-1]


def test_tape_replay_is_bit_identical(rng):
    w = Param("w", rng.normal(size=(3, 3)))
    x = Tensor(rng.normal(size=(2, 3, 4)))
    with Tape() as tape:
        nk.sum_all(nk.softmax_rows(nk.maxpool_time(nk.matmul(w.tensor(), x), 2, 2)))
    outs = [n.out.data for n in tape.nodes]
    for a, b in zip(outs, tape.replay()):
        assert np.array_equal(a, b)


def test_no_recording_without_tape(rng):
    w = Param("w", rng.normal(size=(2,)))
    t = w.tensor()
    assert not t.requires_grad
    assert not nk.tanh(t).requires_grad


def test_param_grad_shape_matches_value(rng):
    p = Param("p", rng.normal(size=(4, 2)))
    assert p.grad.shape == p.value.shape
    p.grad += 1
    p.zero_grad()
    assert (p.grad == 0).all() and p.grad.shape == (4, 2)
