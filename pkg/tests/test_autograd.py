import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lvcdiff import autograd as ag
from lvcdiff.autograd import GraphError, Parameter, Tensor
from lvcdiff.gradcheck import grad_check
from lvcdiff.optim import AdamState, AdamW, adamw_step, clip_grad_norm, global_grad_norm
from lvcdiff.params import ParamStore, uniform_init


def P(rng, *shape, name="p"):
    return Parameter(rng.standard_normal(shape), name)


# --------------------------------------------------------------------------- naive oracles


def naive_conv1d(x, w, b, stride=1, dilation=1, left=0, right=0):
    c_out, c_in, k = w.shape
    xp = np.concatenate([np.zeros((c_in, left)), x, np.zeros((c_in, right))], axis=1)
    n_out = (xp.shape[1] - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((c_out, n_out))
    for o in range(c_out):
        for n in range(n_out):
            acc = 0.0 if b is None else b[o]
            for i in range(c_in):
                for j in range(k):
                    acc += w[o, i, j] * xp[i, n * stride + j * dilation]
            out[o, n] = acc
    return out


def naive_conv_transpose(x, w, b, stride, crop, out_len):
    c_in, c_out, k = w.shape
    L = x.shape[1]
    full = np.zeros((c_out, (L - 1) * stride + k))
    for i in range(c_in):
        for n in range(L):
            for o in range(c_out):
                for j in range(k):
                    full[o, n * stride + j] += x[i, n] * w[i, o, j]
    out = full[:, crop:crop + out_len]
    return out if b is None else out + b[:, None]


def naive_segment_conv(x, kernels, seg, dilation):
    K, c_out, c_in, k = kernels.shape
    D = x.shape[1]
    span = dilation * (k - 1)
    left = span // 2
    out = np.zeros((c_out, D))
    for n in range(D):
        s = n // seg
        for o in range(c_out):
            acc = 0.0
            for i in range(c_in):
                for j in range(k):
                    pos = n - left + j * dilation
                    if 0 <= pos < D:
                        acc += kernels[s, o, i, j] * x[i, pos]
            out[o, n] = acc
    return out


# --------------------------------------------------------------------------- conv1d


def test_conv1d_identity_kernel():
    x = np.random.default_rng(0).standard_normal((3, 10))
    w = Tensor(np.eye(3)[:, :, None])
    assert np.array_equal(ag.conv1d(x, w, Tensor(np.zeros(3))).data, x)


def test_conv1d_hand_sum():
    out = ag.conv1d(np.array([[1.0, 2.0, 3.0]]), Tensor([[[1.0, 1.0]]]))
    assert out.data.tolist() == [[3.0, 5.0]]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(1, 2),
       st.sampled_from(["valid", "same", 2]), st.integers(0, 10 ** 6))
def test_conv1d_matches_naive_loop(c_in, c_out, k, dilation, stride, padding, seed):
    rng = np.random.default_rng(seed)
    L = dilation * (k - 1) + 6
    x = rng.standard_normal((c_in, L))
    w = rng.standard_normal((c_out, c_in, k))
    b = rng.standard_normal(c_out)
    out = ag.conv1d(x, Tensor(w), Tensor(b), stride=stride, dilation=dilation, padding=padding)
    left, right = ag._resolve_padding(padding, k, dilation)
    assert np.allclose(out.data, naive_conv1d(x, w, b, stride, dilation, left, right), rtol=1e-12, atol=1e-12)


def test_conv1d_same_and_valid_lengths():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 20))
    w = Tensor(rng.standard_normal((4, 2, 3)))
    assert ag.conv1d(x, w, padding="same", dilation=9).shape == (4, 20)
    assert ag.conv1d(x, w, padding="valid", dilation=3).shape == (4, 20 - 3 * 2)


def test_conv1d_shape_errors_name_dimensions():
    with pytest.raises(ValueError, match="C_in=3"):
        ag.conv1d(np.zeros((2, 5)), Tensor(np.zeros((1, 3, 2))))
    with pytest.raises(ValueError, match="C_out"):
        ag.conv1d(np.zeros((3, 5)), Tensor(np.zeros((1, 3, 2))), Tensor(np.zeros(2)))


# --------------------------------------------------------------------------- conv_transpose1d


def test_conv_transpose_identity():
    x = np.random.default_rng(0).standard_normal((2, 7))
    out = ag.conv_transpose1d(x, Tensor(np.eye(2)[:, :, None]), stride=1)
    assert np.array_equal(out.data, x)


def test_conv_transpose_length_contract():
    w = Tensor(np.zeros((3, 2, 16)))
    assert ag.conv_transpose1d(np.zeros((3, 4)), w, stride=8).shape == (2, 32)


@pytest.mark.parametrize("stride", [1, 2, 4, 8])
def test_conv_transpose_matches_scatter_add(stride):
    rng = np.random.default_rng(stride)
    k = 2 * stride
    x = rng.standard_normal((3, 5))
    w = rng.standard_normal((3, 2, k))
    b = rng.standard_normal(2)
    out = ag.conv_transpose1d(x, Tensor(w), Tensor(b), stride=stride)
    oracle = naive_conv_transpose(x, w, b, stride, (k - stride) // 2, 5 * stride)
    assert np.allclose(out.data, oracle, rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([1, 2, 4, 8]), st.integers(1, 6), st.integers(0, 10 ** 6))
def test_conv_transpose_is_adjoint_of_strided_conv(stride, L, seed):
    rng = np.random.default_rng(seed)
    k = 2 * stride
    w = rng.standard_normal((2, 3, k))  # conv1d: (C_out=2, C_in=3, k)
    x = rng.standard_normal((3, L * stride))
    y = rng.standard_normal((2, L))
    crop = (k - stride) // 2
    conv = ag.conv1d(x, Tensor(w), stride=stride, padding=(crop, stride - crop)).data
    assert conv.shape == y.shape
    # the transposed conv uses the same tensor read as (C_in=2, C_out=3, k)
    adj = ag.conv_transpose1d(y, Tensor(w), stride=stride).data
    lhs, rhs = np.sum(conv * y), np.sum(x * adj)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


# --------------------------------------------------------------------------- linear and activations


def test_linear_identity_and_hand():
    x = np.array([1.0, 2.0])
    assert ag.linear(x, Tensor(np.eye(2)), Tensor(np.zeros(2))).data.tolist() == [1.0, 2.0]
    out = ag.linear(x, Tensor([[1.0, 1.0], [1.0, -1.0]]), Tensor([0.0, 0.0]))
    assert out.data.tolist() == [3.0, -1.0]


def test_linear_matches_naive_matmul():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 5))
    w = rng.standard_normal((3, 5))
    b = rng.standard_normal(3)
    naive = np.array([[sum(x[r, i] * w[o, i] for i in range(5)) + b[o] for o in range(3)] for r in range(4)])
    assert np.allclose(ag.linear(x, Tensor(w), Tensor(b)).data, naive, rtol=1e-12, atol=1e-12)
    with pytest.raises(ValueError):
        ag.linear(x, Tensor(np.zeros((3, 4))))


def test_activation_values():
    assert ag.lrelu(np.array([-1.0]), 0.2).data[0] == pytest.approx(-0.2)
    assert ag.lrelu(np.array([3.0])).data[0] == 3.0
    assert ag.tanh(np.array([0.0])).data[0] == 0.0
    assert ag.sigmoid(np.array([0.0])).data[0] == 0.5
    assert abs(ag.sigmoid(np.array([50.0])).data[0] - 1.0) <= 1e-15
    assert np.isfinite(ag.sigmoid(np.array([-1000.0, 1000.0])).data).all()


# --------------------------------------------------------------------------- backward


def test_grad_of_sum_is_ones():
    x = Parameter(np.random.default_rng(0).standard_normal((3, 4)), "x")
    ag.backward(ag.sum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_conv_weight_grad_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 12))
    w = P(rng, 3, 2, 3, name="w")
    assert grad_check(lambda: ag.sum(ag.conv1d(x, w, dilation=2, padding="same")), [w]) <= 1e-6


def test_backward_twice_doubles():
    rng = np.random.default_rng(5)
    w = P(rng, 3, 2, 3, name="w")
    x = rng.standard_normal((2, 9))
    loss = ag.sum(ag.square(ag.conv1d(x, w)))
    ag.backward(loss)
    once = w.grad.copy()
    ag.backward(loss)
    assert np.array_equal(w.grad, 2 * once)


def test_backward_errors():
    with pytest.raises(GraphError):
        ag.backward(Tensor(1.0))
    w = Parameter(np.ones(3), "w")
    with pytest.raises(GraphError):
        ag.backward(ag.mul(w, 2.0))


def test_no_grad_builds_no_graph():
    w = Parameter(np.ones(3), "w")
    with ag.no_grad():
        y = ag.sum(ag.mul(w, w))
    assert not y.parents
    with pytest.raises(GraphError):
        ag.backward(y)


def test_forward_determinism():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 64))
    k = Tensor(rng.standard_normal((4, 4, 2, 3)))
    a = ag.gated_segment_conv1d(x, k, 16, 3).data
    b = ag.gated_segment_conv1d(x, k, 16, 3).data
    assert a.tobytes() == b.tobytes()


# --------------------------------------------------------------------------- segment convolution


@pytest.mark.parametrize("seg,dilation,k", [(4, 1, 3), (4, 3, 3), (8, 9, 3), (5, 2, 2), (16, 27, 3)])
def test_segment_conv_matches_naive(seg, dilation, k):
    rng = np.random.default_rng(seg + dilation)
    D = seg * 4
    x = rng.standard_normal((2, D))
    kern = rng.standard_normal((4, 3, 2, k))
    out = ag.segment_conv1d(x, Tensor(kern), seg, dilation).data
    assert np.allclose(out, naive_segment_conv(x, kern, seg, dilation), rtol=1e-12, atol=1e-12)


def test_single_segment_equals_dense_conv():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 40))
    kern = rng.standard_normal((1, 6, 3, 3))
    out = ag.gated_segment_conv1d(x, Tensor(kern), 40, 9).data
    f = ag.conv1d(x, Tensor(kern[0, :3]), dilation=9, padding="same").data
    g = ag.conv1d(x, Tensor(kern[0, 3:]), dilation=9, padding="same").data
    assert np.allclose(out, np.tanh(f) / (1 + np.exp(-g)), rtol=1e-12, atol=1e-12)


def test_segment_conv_errors():
    with pytest.raises(ValueError, match="divisible"):
        ag.segment_conv1d(np.zeros((2, 10)), Tensor(np.zeros((3, 2, 2, 3))), 3)
    with pytest.raises(ValueError, match="kernel sets"):
        ag.segment_conv1d(np.zeros((2, 12)), Tensor(np.zeros((3, 2, 2, 3))), 3)


# --------------------------------------------------------------------------- grad checks on every op


def _ops(rng):
    a = P(rng, 3, 4, name="a")
    b = P(rng, 3, 4, name="b")
    row = P(rng, 4, name="row")
    x = P(rng, 2, 12, name="x")
    w = P(rng, 3, 2, 3, name="w")
    bias = P(rng, 3, name="bias")
    wt = P(rng, 2, 3, 4, name="wt")
    kern = Parameter(0.5 * rng.standard_normal((3, 4, 2, 3)), "kern")
    lin_w = P(rng, 5, 4, name="lin_w")
    return {
        "add": (lambda: ag.sum(ag.square(ag.add(a, row))), [a, row]),
        "sub": (lambda: ag.sum(ag.square(ag.sub(a, b))), [a, b]),
        "mul": (lambda: ag.sum(ag.mul(a, ag.mul(b, row))), [a, b, row]),
        "scale_neg": (lambda: ag.sum(ag.square(ag.neg(ag.scale(a, 1.7)))), [a]),
        "lrelu": (lambda: ag.sum(ag.square(ag.lrelu(a))), [a]),
        "tanh": (lambda: ag.sum(ag.tanh(ag.mul(a, b))), [a, b]),
        "sigmoid": (lambda: ag.sum(ag.sigmoid(ag.mul(a, b))), [a, b]),
        "sum_axis": (lambda: ag.sum(ag.square(ag.sum(a, axis=0))), [a]),
        "mean": (lambda: ag.mean(ag.square(ag.mean(a, axis=1, keepdims=True) + b)), [a, b]),
        "reshape_transpose": (lambda: ag.sum(ag.mul(ag.transpose(ag.reshape(a, (4, 3)), (1, 0)), b)), [a, b]),
        "repeat": (lambda: ag.sum(ag.square(ag.repeat_interleave(a, 3, axis=1))), [a]),
        "index": (lambda: ag.sum(ag.square(a[:, 1:3])), [a]),
        "matmul": (lambda: ag.sum(ag.square(ag.matmul(a, ag.transpose(b, (1, 0))))), [a, b]),
        "linear": (lambda: ag.sum(ag.square(ag.linear(a, lin_w, None))), [a, lin_w]),
        "conv1d": (lambda: ag.sum(ag.square(ag.conv1d(x, w, bias, stride=2, dilation=1, padding=1))),
                   [x, w, bias]),
        "conv1d_dilated": (lambda: ag.sum(ag.square(ag.conv1d(x, w, bias, dilation=3, padding="same"))),
                           [x, w, bias]),
        "conv_transpose": (lambda: ag.sum(ag.square(ag.conv_transpose1d(x, wt, bias, stride=2))), [x, wt, bias]),
        "segment_conv": (lambda: ag.sum(ag.square(ag.segment_conv1d(x, kern[:, :2], 4, 3))), [x, kern]),
        "gated_segment_conv": (lambda: ag.sum(ag.square(ag.gated_segment_conv1d(x, kern, 4, 3))), [x, kern]),
    }


OP_NAMES = list(_ops(np.random.default_rng(0)))


@pytest.mark.parametrize("name", OP_NAMES)
def test_every_op_passes_grad_check(name):
    for trial in range(5):
        f, params = _ops(np.random.default_rng(100 * trial + OP_NAMES.index(name)))[name]
        assert grad_check(f, params) <= 1e-4, name


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(2, 4), st.sampled_from([1, 3, 9]),
       st.integers(1, 3), st.integers(0, 10 ** 6))
def test_randomized_lvc_grad_check(c_in, c_out, seg, dilation, n_seg, seed):
    rng = np.random.default_rng(seed)
    # moderate scale keeps the gates out of saturation, where gradients sink
    # below the 1e-8 denominator floor and only rounding noise is compared
    x = Parameter(0.5 * rng.standard_normal((c_in, seg * n_seg)), "x")
    kern = Parameter(0.5 * rng.standard_normal((n_seg, 2 * c_out, c_in, 3)), "k")
    f = lambda: ag.sum(ag.square(ag.gated_segment_conv1d(x, kern, seg, dilation)))  # noqa: E731
    assert grad_check(f, [x, kern]) <= 1e-4


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.sampled_from([1, 2, 3]),
       st.integers(0, 10 ** 6))
def test_randomized_conv_grad_check(c_in, c_out, k, dilation, seed):
    rng = np.random.default_rng(seed)
    x = P(rng, c_in, dilation * (k - 1) + 5, name="x")
    w = P(rng, c_out, c_in, k, name="w")
    b = P(rng, c_out, name="b")
    f = lambda: ag.sum(ag.square(ag.conv1d(x, w, b, dilation=dilation, padding="same")))  # noqa: E731
    assert grad_check(f, [x, w, b]) <= 1e-4


# --------------------------------------------------------------------------- grad_check itself


def test_grad_check_quadratic_and_linear():
    p = Parameter(np.random.default_rng(8).standard_normal(6), "p")
    assert grad_check(lambda: ag.scale(ag.sum(ag.square(p)), 0.5), [p]) <= 1e-9
    c = np.random.default_rng(9).standard_normal(6)
    assert grad_check(lambda: ag.sum(ag.mul(p, c)), [p]) <= 1e-10


def test_grad_check_detects_a_wrong_adjoint():
    p = Parameter(np.array([0.3, -0.7]), "p")

    def bad_square():
        def fn(g):
            return (g * p.data,)  # missing factor 2
        return ag.sum(ag._make(p.data ** 2, (p,), fn))

    assert grad_check(bad_square, [p]) > 0.1


def test_grad_check_subsampling_probes_requested_count():
    p = Parameter(np.ones(50), "p")
    calls = []

    def f():
        calls.append(1)
        return ag.sum(ag.square(p))

    grad_check(f, [p], max_coords=5)
    assert len(calls) == 1 + 2 * 5


# --------------------------------------------------------------------------- AdamW


def test_adamw_first_step_closed_form():
    p = Parameter(np.array([1.0]), "p")
    p.grad = np.array([1.0])
    state = AdamState(np.zeros(1), np.zeros(1))
    adamw_step(p, state, lr=0.1, weight_decay=0.0)
    assert p.data[0] == pytest.approx(1 - 0.1 / (1 + 1e-9), abs=1e-15)
    assert state.step_count == 1
    assert state.m[0] == pytest.approx(0.1) and state.v[0] == pytest.approx(0.02)


def test_adamw_zero_grad_no_change():
    p = Parameter(np.array([0.5, -2.0]), "p")
    p.grad = np.zeros(2)
    state = AdamState(np.zeros(2), np.zeros(2))
    adamw_step(p, state, lr=0.1)
    assert p.data.tolist() == [0.5, -2.0]
    assert not state.m.any() and not state.v.any()


def test_adamw_decoupled_decay():
    p = Parameter(np.array([2.0]), "p")
    p.grad = np.zeros(1)
    adamw_step(p, AdamState(np.zeros(1), np.zeros(1)), lr=0.1, weight_decay=0.5)
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.05), abs=1e-15)


def test_adamw_matches_reference_loop():
    rng = np.random.default_rng(10)
    p = Parameter(rng.standard_normal(4), "p")
    ref = p.data.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    opt = AdamW(lr=0.01, weight_decay=0.1)
    for step in range(1, 6):
        g = rng.standard_normal(4)
        p.grad = g.copy()
        opt.step([p])
        m = 0.9 * m + 0.1 * g
        v = 0.98 * v + 0.02 * g * g
        ref = ref * (1 - 0.01 * 0.1) - 0.01 * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.98 ** step)) + 1e-9)
    assert np.allclose(p.data, ref, rtol=1e-12, atol=1e-14)
    assert np.all(opt.states["p"].v >= 0)


def test_adamw_shape_mismatch():
    p = Parameter(np.zeros(3), "p")
    p.grad = np.zeros(3)
    with pytest.raises(ValueError, match="shape"):
        adamw_step(p, AdamState(np.zeros(2), np.zeros(2)), lr=0.1)


def test_clip_grad_norm():
    a = Parameter(np.zeros(2), "a")
    b = Parameter(np.zeros(1), "b")
    a.grad = np.array([3.0, 0.0])
    b.grad = np.array([4.0])
    assert global_grad_norm([a, b]) == pytest.approx(5.0)
    clip_grad_norm([a, b], 1.0)
    assert global_grad_norm([a, b]) == pytest.approx(1.0)
    assert a.grad[0] == pytest.approx(0.6)


# --------------------------------------------------------------------------- ParamStore


def test_param_store_roundtrip_and_checksum():
    rng = np.random.default_rng(11)
    store = ParamStore()
    store.add("w", uniform_init(rng, (3, 4), 4))
    store.add("b", np.zeros(3))
    assert store.num_parameters() == 15
    assert np.all(np.abs(store["w"].data) <= np.sqrt(1 / 4))
    snap = store.state()
    crc = store.checksum()
    store["w"].data += 1
    assert store.checksum() != crc
    store.load_state(snap)
    assert store.checksum() == crc
