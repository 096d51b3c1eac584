import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradcheck import INSTANCES, check
from hive3d import tensor as T
from hive3d.errors import ShapeError, TapeError
from hive3d.tensor import Tape, Tensor


@pytest.mark.parametrize("name", sorted(INSTANCES))
def test_gradcheck_smoke(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(10):
        assert check(*INSTANCES[name](rng), rng) <= 1e-3


def test_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2, np.float64)).dtype == np.float64


def test_rank_limit():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1,) * 6))


def test_item_needs_single_element():
    assert Tensor([3.5]).item() == 3.5
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


def test_backward_detached_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tensor_sum(x)  # no tape active
    with pytest.raises(TapeError):
        T.backward(loss)


def test_backward_foreign_tape():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as t1:
        loss = T.tensor_sum(x)
    with pytest.raises(TapeError):
        Tape().backward(loss)
    t1.backward(loss)
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_backward_twice_rejected():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = T.tensor_sum(x)
    tape.backward(loss)
    with pytest.raises(TapeError):
        tape.backward(loss)


def test_backward_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_leaf_grads_accumulate_and_fan_out():
    x = Tensor([1.0, -2.0], requires_grad=True, dtype=np.float64)
    for _ in range(2):
        with Tape() as tape:
            loss = T.tensor_sum(T.add(T.scale(x, 3.0), x))
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [8.0, 8.0])


def test_no_recording_without_grad():
    with Tape() as tape:
        T.relu(Tensor([1.0, -1.0]))
    assert len(tape) == 0


def test_conv_shape_errors():
    k = T.Kernel3D(Tensor(np.zeros((2, 1, 3, 3, 3))), Tensor(np.zeros(2)))
    with pytest.raises(ShapeError):
        T.conv3d(Tensor(np.zeros((1, 1, 2, 5, 5))), k)  # depth 2 < kernel 3
    with pytest.raises(ShapeError):
        T.conv3d(Tensor(np.zeros((1, 2, 4, 4, 4))), k)  # channel mismatch
    with pytest.raises(ShapeError):
        T.Kernel3D(Tensor(np.zeros((2, 1, 3, 3, 3))), Tensor(np.zeros(3)))


def test_conv_output_extents():
    x = Tensor(np.zeros((2, 1, 8, 64, 64)))
    k = T.Kernel3D(Tensor(np.zeros((16, 1, 3, 3, 3))), Tensor(np.zeros(16)))
    assert T.conv3d(x, k, padding=1).shape == (2, 16, 8, 64, 64)
    assert T.conv3d(x, k, padding=0, stride=2).shape == (2, 16, 3, 31, 31)


def test_maxpool_window_too_large():
    with pytest.raises(ShapeError):
        T.maxpool3d(Tensor(np.zeros((1, 1, 1, 4, 4))), 2)


def test_maxpool_ties_route_gradient_to_first():
    x = Tensor(np.ones((1, 1, 2, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = T.tensor_sum(T.maxpool3d(x, 2))
    tape.backward(loss)
    g = x.grad.reshape(-1)
    assert g[0] == 1 and g[1:].sum() == 0


def test_gap_is_channel_mean(rng):
    x = rng.standard_normal((2, 3, 2, 4, 5)).astype(np.float32)
    np.testing.assert_allclose(T.global_avg_pool3d(Tensor(x)).data, x.mean(axis=(2, 3, 4)), rtol=1e-6, atol=1e-7)


def test_dense_shape_errors():
    with pytest.raises(ShapeError):
        T.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 1))), Tensor(np.zeros(1)))
    with pytest.raises(ShapeError):
        T.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 1))), Tensor(np.zeros(2)))


def test_dense_rows_independent_of_batch(rng):
    x = rng.standard_normal((7, 64)).astype(np.float32)
    w = Tensor(rng.standard_normal((64, 1)).astype(np.float32))
    b = Tensor(np.zeros(1, np.float32))
    full = T.dense(Tensor(x), w, b).data
    for i in range(7):
        assert T.dense(Tensor(x[i : i + 1]), w, b).data[0, 0] == full[i, 0]


@given(st.floats(-800, 800))
def test_sigmoid_stable_and_in_range(z):
    p = T.sigmoid(Tensor(np.array([[z]]), dtype=np.float64)).data[0, 0]
    assert 0.0 <= p <= 1.0 and np.isfinite(p)


def test_bce_clamp_has_zero_gradient_outside():
    p = Tensor(np.array([[0.0], [1.0], [0.5]]), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        loss = T.bce_loss(p, [1, 0, 1])
    tape.backward(loss)
    assert np.isfinite(loss.item())
    assert p.grad[0, 0] == 0 and p.grad[1, 0] == 0 and p.grad[2, 0] != 0


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.data())
def test_bce_with_logits_matches_composition(zs, data):
    y = data.draw(st.lists(st.integers(0, 1), min_size=len(zs), max_size=len(zs)))
    z = Tensor(np.array(zs)[:, None], dtype=np.float64)
    fused = T.bce_with_logits(z, y).item()
    composed = T.bce_loss(T.sigmoid(z), y).item()
    assert fused == pytest.approx(composed, rel=1e-6, abs=1e-9)


def test_bce_label_count_mismatch():
    with pytest.raises(ShapeError):
        T.bce_with_logits(Tensor(np.zeros((3, 1))), [0, 1])


def test_float64_path_end_to_end(rng):
    x = Tensor(rng.uniform(0, 1, (1, 1, 4, 4, 4)), requires_grad=True, dtype=np.float64)
    k = T.Kernel3D(Tensor(rng.standard_normal((2, 1, 3, 3, 3))), Tensor(np.zeros(2)))
    with Tape() as tape:
        h = T.global_avg_pool3d(T.relu(T.conv3d(x, k, padding=1)))
        loss = T.tensor_sum(h)
    tape.backward(loss)
    assert x.grad.dtype == np.float64
