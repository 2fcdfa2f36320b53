import struct

import numpy as np
import pytest

from ssgp.checkpoint import CheckpointError, load_checkpoint, restore_params, save_checkpoint
from ssgp.gradcheck import grad_check
from ssgp.ops import (add, concat_channels, conv2d, conv2d_transpose, conv_flops, relu,
                      slice_channels)
from ssgp.optim import adam_step, init_weights
from ssgp.tensor import FlopCounter, Graph, NonFiniteError, Parameter, ShapeError, Tensor

from oracles import conv2d_loop


def rng(seed=0):
    return np.random.default_rng(seed)


def test_conv2d_one_by_one_scale():
    x = Tensor(np.ones((1, 3, 3)))
    y = conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.zeros(1)), linear=True)
    np.testing.assert_array_equal(y.data, np.full((1, 3, 3), 2.0))


def test_conv2d_stride_two_size():
    y = conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=2)
    assert y.shape == (1, 2, 2)


@pytest.mark.parametrize("h,w", [(1, 1), (2, 7), (5, 5), (6, 3)])
def test_conv2d_same_padding_keeps_size(h, w):
    y = conv2d(Tensor(np.ones((2, h, w))), Tensor(np.ones((3, 2, 3, 3))))
    assert y.shape == (3, h, w)


def test_conv2d_matches_loop_oracle():
    r = rng(1)
    x = r.standard_normal((2, 5, 5))
    w = r.standard_normal((3, 2, 3, 3))
    b = r.standard_normal(3)
    for stride in (1, 2):
        y = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, linear=True)
        np.testing.assert_allclose(y.data, conv2d_loop(x, w, b, stride), atol=1e-5)


def test_conv2d_relu_applied_unless_linear():
    r = rng(2)
    x, w = r.standard_normal((2, 4, 4)), r.standard_normal((3, 2, 3, 3))
    y = conv2d(Tensor(x), Tensor(w))
    np.testing.assert_allclose(y.data, np.maximum(conv2d_loop(x, w), 0), atol=1e-5)


def test_conv2d_shape_error_names_dims():
    with pytest.raises(ShapeError, match="C_in"):
        conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv_transpose_doubles_size():
    y = conv2d_transpose(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))
    assert y.shape == (1, 4, 4)


def test_conv_transpose_impulse_response():
    x = np.zeros((1, 3, 3))
    x[0, 1, 1] = 1
    kernel = np.arange(9.0).reshape(1, 1, 3, 3)
    y = conv2d_transpose(Tensor(x), Tensor(kernel)).data
    # input (1, 1) lands at output (2, 2); the 3x3 footprint is centered there
    expected = np.zeros((1, 6, 6))
    expected[0, 1:4, 1:4] = kernel[0, 0]
    np.testing.assert_allclose(y, expected)


def test_conv_transpose_is_adjoint_of_strided_conv():
    r = rng(3)
    x = r.standard_normal((3, 6, 6))
    w = r.standard_normal((4, 3, 3, 3))
    y = r.standard_normal((4, 3, 3))
    fwd = conv2d(Tensor(x), Tensor(w), stride=2, linear=True).data
    back = conv2d_transpose(Tensor(y), Tensor(w)).data
    np.testing.assert_allclose((fwd * y).sum(), (x * back).sum(), rtol=1e-10)
    # and it is what backprop of the strided conv produces
    xt = Tensor(x, requires_grad=True)
    with Graph() as g:
        out = conv2d(xt, Tensor(w), stride=2, linear=True)
    g.backward(out, y)
    np.testing.assert_allclose(xt.grad, back, atol=1e-5)


def test_relu_values_and_gradient():
    x = Tensor(np.array([[[-1.0, 0.0, 2.0]]]), requires_grad=True)
    np.testing.assert_array_equal(relu(x).data, [[[0, 0, 2]]])
    x = Tensor(np.array([[[3.0, -3.0]]]), requires_grad=True)
    with Graph() as g:
        y = relu(x)
    g.backward(y, np.ones((1, 1, 2)))
    np.testing.assert_array_equal(x.grad, [[[1, 0]]])


def test_relu_positive_identity():
    x = np.abs(rng().standard_normal((2, 3, 3))) + 0.1
    np.testing.assert_array_equal(relu(Tensor(x)).data, x)


def test_concat_and_slice_round_trip():
    r = rng(4)
    a, b = Tensor(r.standard_normal((2, 4, 4))), Tensor(r.standard_normal((3, 4, 4)))
    c = concat_channels(a, b)
    assert c.shape == (5, 4, 4)
    np.testing.assert_array_equal(slice_channels(c, 0, 2).data, a.data)
    np.testing.assert_array_equal(slice_channels(c, 2, 5).data, b.data)


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        concat_channels(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 4, 5))))


def test_add_identities():
    x = rng(5).standard_normal((2, 3, 3))
    np.testing.assert_array_equal(add(Tensor(x), Tensor(np.zeros_like(x))).data, x)
    np.testing.assert_array_equal(add(Tensor(x), Tensor(-x)).data, np.zeros_like(x))
    with pytest.raises(ShapeError):
        add(Tensor(x), Tensor(np.ones((1, 3, 3))))


@pytest.mark.parametrize("name,fn,shapes", [
    ("conv2d", lambda x, w, b: conv2d(x, w, b), [(2, 5, 5), (3, 2, 3, 3), (3,)]),
    ("conv2d_s2", lambda x, w, b: conv2d(x, w, b, stride=2, linear=True), [(2, 5, 5), (3, 2, 3, 3), (3,)]),
    ("conv2d_1x1", lambda x, w: conv2d(x, w, linear=True), [(3, 4, 4), (2, 3, 1, 1)]),
    ("conv_transpose", lambda x, w, b: conv2d_transpose(x, w, b), [(2, 3, 3), (2, 3, 3, 3), (3,)]),
    ("concat", lambda a, b: concat_channels(a, b), [(2, 3, 3), (1, 3, 3)]),
    ("add", lambda a, b: add(a, b), [(2, 3, 3), (2, 3, 3)]),
])
def test_op_gradients(name, fn, shapes):
    r = rng(6)
    inputs = [Tensor(r.standard_normal(s)) for s in shapes]
    report = grad_check(fn, inputs, tolerance=1e-4)
    assert report.passed, f"{name}: {report.max_rel_error}"


def test_relu_gradient_away_from_kink():
    r = rng(7)
    x = r.standard_normal((2, 4, 4))
    x = np.where(x >= 0, x + 0.1, x - 0.1)
    assert grad_check(relu, [Tensor(x)], tolerance=1e-6).passed


def test_grad_check_skips_kink_straddling_entries():
    x = Tensor(np.array([[[0.0, 1.0, -1.0]]]))
    report = grad_check(relu, [x], h=1e-3)
    assert report.skipped_entries == 1 and report.checked_entries == 2
    assert report.passed
    strict = grad_check(relu, [x], h=1e-3, skip_kinks=False)
    assert not strict.passed


def test_init_weights_zero_and_variance():
    assert not init_weights((4, 3, 3, 3), 27, "zeros", rng()).data.any()
    p = init_weights((100000,), 9 * 32, "relu_scaled", rng(8))
    assert abs(p.data.var() / (2 / 288) - 1) < 0.1
    a = init_weights((5, 5), 5, "relu_scaled", rng(9))
    b = init_weights((5, 5), 5, "relu_scaled", rng(9))
    np.testing.assert_array_equal(a.data, b.data)


def test_adam_first_step_is_sign_like():
    p = Parameter(np.array([1.0], dtype=np.float32))
    p.grad[:] = 0.5
    adam_step([p], 1e-4)
    assert p.data[0] == pytest.approx(1.0 - 1e-4, abs=1e-7)
    assert p.step_count == 1
    assert p.grad[0] == 0


def test_adam_zero_gradient_keeps_value():
    p = Parameter(np.array([2.0, -1.0], dtype=np.float32))
    p.adam_m[:] = 0.0
    adam_step([p], 1e-3)
    np.testing.assert_array_equal(p.data, [2.0, -1.0])


def test_adam_deterministic():
    vals = []
    for _ in range(2):
        p = Parameter(np.linspace(-1, 1, 6, dtype=np.float32))
        for k in range(5):
            p.grad[:] = np.sin(np.arange(6) + k)
            adam_step([p], 1e-2)
        vals.append(p.data.copy())
    np.testing.assert_array_equal(*vals)


def test_adam_rejects_nan_gradient_by_name():
    p = Parameter(np.zeros(3, dtype=np.float32), name="layer.weight")
    p.grad[1] = np.nan
    with pytest.raises(FloatingPointError, match="layer.weight"):
        adam_step([p], 1e-3)


def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        conv2d(Tensor(np.full((1, 2, 2), np.inf)), Tensor(np.ones((1, 1, 1, 1))), linear=True)


def test_graph_visits_each_record_once_in_reverse():
    x = Tensor(np.ones((1, 2, 2)), requires_grad=True)
    with Graph() as g:
        a = add(x, x)
        b = add(a, x)
    assert len(g) == 2
    g.backward(b, np.ones((1, 2, 2)))
    np.testing.assert_array_equal(x.grad, np.full((1, 2, 2), 3.0))


def test_flop_counter_matches_formula():
    x = Tensor(np.ones((2, 10, 10)))
    with FlopCounter() as fc:
        conv2d(x, Tensor(np.ones((4, 2, 1, 1))), Tensor(np.zeros(4)))
    assert fc.total == conv_flops(2, 4, 1, 10, 10) == 2000


def test_checkpoint_round_trip(tmp_path):
    r = rng(10)
    params = [Parameter(r.standard_normal((3, 2, 3, 3)).astype(np.float32), name="a.weight"),
              Parameter(r.standard_normal(3).astype(np.float32), name="a.bias")]
    params[0].adam_m[:] = 0.25
    params[1].step_count = 7
    path = tmp_path / "ck"
    save_checkpoint(path, params)
    loaded = load_checkpoint(path)
    np.testing.assert_array_equal(loaded["a.weight"].data, params[0].data)
    np.testing.assert_array_equal(loaded["a.weight"].adam_m, params[0].adam_m)
    assert loaded["a.bias"].step_count == 7
    raw = path.read_bytes()
    assert raw[:8] == b"SSGPCKPT"
    assert struct.unpack("<II", raw[8:16]) == (1, 2)
    fresh = [Parameter(np.zeros((3, 2, 3, 3), np.float32), name="a.weight"),
             Parameter(np.zeros(3, np.float32), name="a.bias")]
    restore_params(fresh, path, reset_optimizer=True)
    np.testing.assert_array_equal(fresh[0].data, params[0].data)
    assert fresh[1].step_count == 0 and not fresh[0].adam_m.any()


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "ck"
    save_checkpoint(path, [Parameter(np.ones(4, np.float32), name="p")])
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match="offset"):
        load_checkpoint(tmp_path / "short")
