import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import central_diff, rel_err
from mmimpute.errors import FormatError, PoisonedGradientError, ShapeError, StateError
from mmimpute.tensor import (AdamState, DenseLayer, LeakyReLU, Mlp, SeededRng, adam_step, dense_backward,
                             dense_forward, gaussian_sample, glorot_uniform, pack_container, read_container,
                             sigmoid, softplus, unpack_container, write_container)


# --- dense layer examples -------------------------------------------------------

def test_identity_layer_passes_input_through():
    layer = DenseLayer(np.eye(2), np.zeros(2))
    assert np.array_equal(dense_forward(layer, [3.0, -1.0]), [3.0, -1.0])


def test_hand_multiplied_layer():
    layer = DenseLayer([[1.0, 2.0], [0.0, 1.0]], [1.0, 0.0])
    assert np.array_equal(dense_forward(layer, [1.0, 1.0]), [4.0, 1.0])


def test_zero_weights_give_the_bias():
    layer = DenseLayer(np.zeros((1, 3)), [5.0])
    assert np.array_equal(dense_forward(layer, [7.0, -2.0, 0.5]), [5.0])


def test_identity_backward():
    layer = DenseLayer(np.eye(2), np.zeros(2))
    dense_forward(layer, [0.3, 0.4])
    gin, gw, gb = dense_backward(layer, np.array([1.0, 0.0]))
    assert np.array_equal(gin, [1.0, 0.0])
    assert gw.shape == layer.weights.shape and gb.shape == layer.bias.shape


def test_bias_grad_equals_upstream(gen):
    layer = DenseLayer.init(4, 3, gen)
    dense_forward(layer, gen.standard_normal(4))
    up = gen.standard_normal(3)
    _, _, gb = dense_backward(layer, up)
    assert np.array_equal(gb, up)


def test_backward_before_forward_is_a_state_error(gen):
    with pytest.raises(StateError):
        DenseLayer.init(2, 2, gen).backward(np.ones(2))
    with pytest.raises(StateError):
        LeakyReLU().backward(np.ones(2))


def test_shape_errors(gen):
    layer = DenseLayer.init(3, 2, gen)
    with pytest.raises(ShapeError):
        layer.forward(np.ones(4))
    layer.forward(np.ones(3))
    with pytest.raises(ShapeError):
        layer.backward(np.ones(3))
    with pytest.raises(ShapeError):
        DenseLayer(np.ones((2, 3)), np.ones(3))


def test_glorot_bounds(gen):
    w = glorot_uniform(gen, 30, 50)
    assert np.abs(w).max() <= np.sqrt(6.0 / 80)


# --- finite differences -----------------------------------------------------------

@pytest.mark.parametrize("trial", range(20))
def test_dense_layer_matches_finite_differences(trial):
    gen = np.random.default_rng(trial)
    n_in, n_out = gen.integers(1, 6, size=2)
    batch = int(gen.integers(1, 4))
    layer = DenseLayer.init(int(n_in), int(n_out), gen)
    x = gen.standard_normal((batch, n_in))
    up = gen.standard_normal((batch, n_out))
    f = lambda: float(np.sum(layer.forward(x) * up))
    f()
    gin = layer.backward(up)
    gw, gb = layer.grad_weights.copy(), layer.grad_bias.copy()
    assert rel_err(gw, central_diff(f, layer.weights)) < 1e-4
    assert rel_err(gb, central_diff(f, layer.bias)) < 1e-4
    assert rel_err(gin, central_diff(f, x)) < 1e-4


@pytest.mark.parametrize("trial", range(10))
def test_mlp_matches_finite_differences(trial):
    gen = np.random.default_rng(100 + trial)
    sizes = [int(s) for s in gen.integers(2, 6, size=4)]
    net = Mlp(sizes, gen)
    x = gen.standard_normal((3, sizes[0]))
    up = gen.standard_normal((3, sizes[-1]))
    f = lambda: float(np.sum(net.forward(x) * up))
    f()
    gin = net.backward(up)
    grads = {k: v.copy() for k, v in net.grads().items()}
    for name, p in net.params().items():
        assert rel_err(grads[name], central_diff(f, p)) < 1e-4, name
    assert rel_err(gin, central_diff(f, x)) < 1e-4


def test_leaky_relu_gradient_and_slope(gen):
    act = LeakyReLU()
    x = gen.standard_normal(50)
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    up = gen.standard_normal(50)
    f = lambda: float(np.sum(act.forward(x) * up))
    f()
    assert rel_err(act.backward(up), central_diff(f, x)) < 1e-4
    assert np.array_equal(act.infer(np.array([-2.0, 3.0])), [-0.02, 3.0])


def test_sigmoid_is_stable_at_extremes():
    a = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    s = sigmoid(a)
    assert np.all(np.isfinite(s))
    assert s[0] == 0.0 and s[2] == 0.5 and s[-1] == 1.0
    assert np.allclose(softplus(np.array([0.0])), np.log(2.0))


def test_infer_matches_forward(gen):
    net = Mlp([5, 7, 3], gen)
    x = gen.standard_normal((4, 5))
    assert np.array_equal(net.infer(x), net.forward(x))


# --- Adam -------------------------------------------------------------------------

def _textbook_adam(p, grads, lr=1e-4, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState())
    assert p["w"][0] == pytest.approx(-1e-4, rel=1e-6)


def test_adam_zero_gradient_is_a_fixed_point(gen):
    w0 = gen.standard_normal((3, 4))
    p = {"w": w0.copy()}
    state = AdamState()
    for _ in range(5):
        adam_step(p, {"w": np.zeros_like(w0)}, state)
    assert np.array_equal(p["w"], w0)
    assert state.step_count == 5


def test_adam_matches_textbook_formula(gen):
    p0 = gen.standard_normal(20)
    grads = [gen.standard_normal(20) for _ in range(30)]
    p = {"w": p0.copy()}
    state = AdamState(lr=1e-2)
    for k, g in enumerate(grads):
        adam_step(p, {"w": g}, state)
        assert state.step_count == k + 1
        assert np.all(state.second_moment["w"] >= 0)
    assert np.allclose(p["w"], _textbook_adam(p0, grads, lr=1e-2), rtol=1e-12, atol=1e-14)


def test_adam_is_deterministic(gen):
    p0 = gen.standard_normal(10)
    grads = [gen.standard_normal(10) for _ in range(5)]
    out = []
    for _ in range(2):
        p, s = {"w": p0.copy()}, AdamState()
        for g in grads:
            adam_step(p, {"w": g}, s)
        out.append(p["w"])
    assert np.array_equal(out[0].view(np.uint64), out[1].view(np.uint64))


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_adam_refuses_poisoned_gradients(bad):
    p = {"a": np.ones(3), "b": np.ones(2)}
    g = {"a": np.zeros(3), "b": np.array([0.0, bad])}
    state = AdamState()
    with pytest.raises(PoisonedGradientError, match="'b'"):
        adam_step(p, g, state)
    assert np.array_equal(p["a"], np.ones(3)) and state.step_count == 0


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": np.ones(3)}, {"w": np.ones(4)}, AdamState())


# --- RNG --------------------------------------------------------------------------

def test_gaussian_moments():
    x = gaussian_sample(SeededRng(0), 10**5)
    assert abs(x.mean()) < 0.02 and abs(x.var() - 1) < 0.03


def test_same_seed_same_stream():
    a = gaussian_sample(SeededRng(42), 100)
    b = gaussian_sample(SeededRng(42), 100)
    assert np.array_equal(a, b)
    assert gaussian_sample(SeededRng(1), 1).shape == (1,)


def test_spawned_streams_differ_and_repeat():
    r = SeededRng(5)
    a, b = r.spawn(1).gen.standard_normal(8), r.spawn(2).gen.standard_normal(8)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, SeededRng(5).spawn(1).gen.standard_normal(8))


# --- checkpoint container -----------------------------------------------------------

arrays_st = st.dictionaries(
    st.text("abcdefgh.", min_size=1, max_size=8),
    st.lists(st.floats(allow_nan=False, width=64), min_size=0, max_size=12),
    max_size=4,
)


@given(arrays_st)
def test_container_round_trip_is_bit_exact(raw):
    arrays = {k: np.array(v, dtype=np.float64).reshape(-1, 1) if len(v) % 2 else np.array(v) for k, v in raw.items()}
    buf = pack_container(arrays, {"meta": {"x": 1}})
    back, meta = unpack_container(buf)
    assert meta == {"meta": {"x": 1}}
    assert set(back) == set(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert np.array_equal(back[k].view(np.uint64), arrays[k].view(np.uint64))


def test_container_special_values_and_file(tmp_path, gen):
    arrays = {"w": np.array([[np.nan, -0.0], [np.inf, 5e-324]]), "scalar": np.array(3.0)}
    path = tmp_path / "c.ckpt"
    write_container(path, arrays, {})
    back, _ = read_container(path)
    assert np.array_equal(back["w"].view(np.uint64), arrays["w"].view(np.uint64))
    assert back["scalar"].shape == ()
    # record order is canonical, so insertion order does not change the bytes
    assert pack_container({"b": np.ones(1), "a": np.zeros(1)}, {}) == pack_container({"a": np.zeros(1), "b": np.ones(1)}, {})


def test_container_rejects_damage():
    buf = pack_container({"w": np.arange(6.0).reshape(2, 3)}, {"m": [1, 2]})
    with pytest.raises(FormatError, match="magic"):
        unpack_container(b"XXXX" + buf[4:])
    with pytest.raises(FormatError, match="version"):
        unpack_container(buf[:4] + b"\x09\x00" + buf[6:])
    with pytest.raises(FormatError):
        unpack_container(buf[:-3])
    with pytest.raises(FormatError, match="trailing"):
        unpack_container(buf + b"\x00")
