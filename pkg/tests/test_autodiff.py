import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hrlcap import autodiff as ad
from hrlcap.autodiff import Tape, Tensor, apply_primitive, no_record, parameter
from hrlcap.errors import ContractError, DimensionError, NumericError
from hrlcap.gradcheck import finite_difference_check, primitive_cases, relative_error

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_primitive_values():
    out = apply_primitive("matmul", Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])
    np.testing.assert_array_equal(ad.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)
    assert ad.tanh(Tensor(0.5)).item() == pytest.approx(0.462117, abs=1e-6)
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5


def test_unknown_primitive():
    with pytest.raises(ContractError):
        apply_primitive("conv", Tensor(1.0))


def test_square_gradient():
    x = parameter([1.0, 2.0])
    with Tape() as tape:
        loss = ad.sum_(ad.mul(x, x))
    np.testing.assert_array_equal(tape.backward(loss)[x.id], [2.0, 4.0])


def test_softmax_cross_entropy_gradient():
    x = parameter(np.zeros(4))
    with Tape() as tape:
        loss = ad.neg(ad.pick(ad.reshape(ad.log_softmax(x), (1, 4)), [2]))
        loss = ad.reshape(loss, ())
    np.testing.assert_allclose(tape.backward(loss)[x.id], [0.25, 0.25, -0.75, 0.25], atol=1e-15)


def test_backward_needs_scalar():
    x = parameter([1.0, 2.0])
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_shape_mismatch_names_operands():
    a = parameter(np.ones((2, 3)), name="left")
    with pytest.raises(DimensionError, match="left"):
        ad.add(a, Tensor(np.ones((4,))))
    with pytest.raises(DimensionError):
        ad.matmul(a, Tensor(np.ones((2, 2))))
    with pytest.raises(DimensionError):
        ad.concat([a, Tensor(np.ones((3, 3)))], axis=-1)


def test_non_finite_output_is_reported():
    with pytest.raises(NumericError, match="log"):
        ad.log(Tensor([0.0, 1.0]))
    with pytest.raises(NumericError):
        with np.errstate(over="ignore"):
            ad.exp(Tensor([1000.0]))


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        ad.embedding(parameter(np.ones((3, 2))), [0, 3])


def test_no_record_and_constants():
    x = parameter([1.0])
    with Tape() as tape:
        with no_record():
            ad.mul(x, x)
        ad.mul(Tensor([2.0]), Tensor([3.0]))
    assert tape.entries == []


def test_tape_can_be_swept_twice():
    x = parameter([0.3, -0.2])
    with Tape() as tape:
        loss = ad.sum_(ad.tanh(ad.mul(x, x)))
    g1, g2 = tape.backward(loss)[x.id], tape.backward(loss)[x.id]
    np.testing.assert_array_equal(g1, g2)


def test_shared_input_accumulates():
    x = parameter([3.0])
    with Tape() as tape:
        loss = ad.sum_(ad.add(ad.mul(x, x), x))
    np.testing.assert_array_equal(tape.backward(loss)[x.id], [7.0])


def test_precision_context_promotes_new_tensors():
    with ad.precision(np.longdouble):
        t = Tensor([1.0])
    assert t.data.dtype == np.longdouble
    assert Tensor([1.0]).data.dtype == np.float64


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    p = ad.softmax(Tensor(x)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(ad.log_softmax(Tensor(x)).data), p, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=finite),
       arrays(np.float64, st.integers(1, 4), elements=finite), st.sampled_from(["add", "sub", "mul"]))
def test_broadcast_binary_gradients(a, b, kind):
    if b.shape[0] != a.shape[1]:
        b = np.resize(b, a.shape[1])
    pa, pb = parameter(a), parameter(b)
    w = np.random.default_rng(0).normal(size=a.shape)
    fn = lambda: ad.sum_(ad.mul(getattr(ad, kind)(pa, pb), Tensor(w)))
    assert finite_difference_check(fn, [pa, pb]) < 1e-6


@pytest.mark.parametrize("case", primitive_cases(), ids=lambda c: c[0])
def test_every_primitive_matches_finite_differences(case):
    _, fn, point = case
    assert finite_difference_check(fn, point) < 1e-6


def test_gradcheck_reference_cases():
    x = parameter(0.5)
    assert finite_difference_check(lambda: ad.tanh(x), [x]) < 1e-6
    with Tape() as tape:
        y = ad.tanh(x)
    assert tape.backward(y)[x.id] == pytest.approx(1 - math.tanh(0.5) ** 2, abs=1e-12)
    assert 1 - math.tanh(0.5) ** 2 == pytest.approx(0.786448, abs=1e-6)
    c = parameter([1.0, 2.0])
    assert finite_difference_check(lambda: ad.sum_(Tensor([4.0])), [c]) == 0.0


def test_gradcheck_extended_precision_agrees():
    x = parameter([0.1, -0.4, 0.9])
    fn = lambda: ad.sum_(ad.log_softmax(ad.mul(x, x)))
    assert finite_difference_check(fn, [x], extended=True) < 1e-9
    assert x.data.dtype == np.float64


def test_gradcheck_contracts():
    x = Tensor([1.0])
    with pytest.raises(ContractError):
        finite_difference_check(lambda: ad.sum_(x), [x])
    y = parameter([1.0])
    with pytest.raises(ContractError):
        finite_difference_check(lambda: ad.sum_(y), [y], step=0.0)


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
    assert relative_error(np.array([1e-9]), np.array([0.0]))[0] == pytest.approx(0.1)
