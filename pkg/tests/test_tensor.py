import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from muscle import tensor as T
from muscle.serialize import FormatError, load_checkpoint, read_tensor, save_checkpoint, write_tensor
from muscle.tensor import DimensionError, Tensor

from gradcheck import check

GRAD_TOL = 1e-4


# -- matmul ------------------------------------------------------------------

def test_matmul_identity(rng):
    x = rng.normal(size=(2, 2))
    np.testing.assert_array_equal(T.matmul(np.eye(2), x).data, x)


def test_matmul_hand_computed():
    out = T.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_gradient(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert check(T.matmul, a, b) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


# -- conv2d ------------------------------------------------------------------

def test_conv_unit_kernel_sums_channels(rng):
    x = rng.normal(size=(1, 3, 5, 5))
    out = T.conv2d(x, np.ones((1, 3, 1, 1)))
    np.testing.assert_allclose(out.data[0, 0], x[0].sum(axis=0), atol=1e-14)


def test_conv_all_ones():
    out = T.conv2d(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3)))
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 9.0))


@pytest.mark.parametrize("stride,padding,shape", [(1, 0, (1, 2, 5, 5)), (2, 1, (2, 3, 6, 7)), (1, 1, (1, 1, 4, 3))])
def test_conv_gradient(rng, stride, padding, shape):
    x = rng.normal(size=shape)
    w = rng.normal(size=(2, shape[1], 3, 3))
    assert check(lambda a, b: T.conv2d(a, b, stride, padding), x, w) < 1e-5


def test_conv_output_extent(rng):
    out = T.conv2d(rng.normal(size=(1, 1, 9, 8)), rng.normal(size=(1, 1, 3, 2)), stride=2, padding=1)
    assert out.shape == (1, 1, (9 + 2 - 3) // 2 + 1, (8 + 2 - 2) // 2 + 1)


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 5, 5)), padding=1)


# -- softmax / cosine / stop-gradient -------------------------------------------

def test_softmax_constant():
    np.testing.assert_allclose(T.softmax(np.full(4, 3.7)).data, [0.25] * 4, atol=1e-15)


def test_softmax_hand_computed():
    np.testing.assert_allclose(T.softmax([0.0, math.log(3.0)]).data, [0.25, 0.75], atol=1e-15)


@pytest.mark.parametrize("shape,axis", [((5,), 0), ((3, 4), 1), ((2, 3, 4), 0)])
def test_softmax_gradient(rng, shape, axis):
    assert check(lambda x: T.softmax(x, axis), rng.normal(size=shape)) < 1e-6


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                  elements=st.floats(-500, 500)))
def test_softmax_sums_to_one(x):
    out = T.softmax(x, axis=-1).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_bad_axis():
    with pytest.raises(DimensionError):
        T.softmax(np.ones((2, 2)), axis=2)


def test_cosine_examples(rng):
    u = rng.normal(size=5)
    assert T.cosine_similarity(u, u).item() == pytest.approx(1.0, abs=1e-15)
    assert T.cosine_similarity([1.0, 0.0], [0.0, 1.0]).item() == 0.0
    assert T.cosine_similarity([1.0, 1.0], [1.0, -1.0]).item() == 0.0


def test_cosine_gradient(rng):
    assert check(T.cosine_similarity, np.array([1.0, 1.0]), np.array([1.0, -1.0])) < 1e-6
    assert check(T.cosine_similarity, rng.normal(size=6), rng.normal(size=6)) < 1e-6


def test_cosine_zero_vector_is_guarded():
    assert T.cosine_similarity(np.zeros(3), np.ones(3)).item() == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6).flatmap(lambda d: st.tuples(
    hnp.arrays(np.float64, d, elements=st.floats(-1e3, 1e3)),
    hnp.arrays(np.float64, d, elements=st.floats(-1e3, 1e3)))))
def test_cosine_range(uv):
    c = T.cosine_similarity(*uv).item()
    assert -1 - 1e-9 <= c <= 1 + 1e-9


def test_stop_gradient_forward_is_bitwise_identity(rng):
    x = rng.normal(size=(3, 2))
    assert T.stop_gradient(x).data.tobytes() == x.tobytes()


def test_stop_gradient_severs_one_branch():
    x = Tensor(3.0, requires_grad=True)
    (x * T.stop_gradient(x)).backward()
    assert x.grad == pytest.approx(3.0)


def test_stop_gradient_only_graph_has_no_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.sum_(T.exp(T.stop_gradient(x)))
    assert not y.requires_grad


# -- remaining primitives ---------------------------------------------------------

UNARY = {
    "exp": T.exp,
    "log": lambda x: T.log(T.exp(x) + 0.5),
    "relu": T.relu,
    "sigmoid": T.sigmoid,
    "softplus": T.softplus,
    "neg": T.neg,
    "pow": lambda x: T.power(T.exp(x), 1.5),
    "maximum": lambda x: T.maximum(x, 0.1),
    "sum": lambda x: T.sum_(x, axis=-1),
    "mean": lambda x: T.mean(x, axis=0, keepdims=True),
    "max": lambda x: T.max_(x, axis=-1),
    "max_all": T.max_,
    "logsumexp": lambda x: T.logsumexp(x, axis=-1),
    "log_softmax": lambda x: T.log_softmax(x, axis=-1),
    "reshape": lambda x: T.reshape(x, (-1,)),
    "transpose": lambda x: T.transpose(x),
    "getitem": lambda x: x[..., ::2] * 2.0,
    "fancy_getitem": lambda x: x[[0, 0, -1]],
    "normalize": lambda x: T.normalize(x, axis=-1),
}

SHAPES = [(3,), (2, 4), (2, 3, 3)]


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("shape", SHAPES)
def test_unary_gradients(rng, name, shape):
    x = rng.normal(size=shape)
    if name == "relu":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
    assert check(UNARY[name], x) < GRAD_TOL


BINARY = {
    "add": T.add,
    "sub": T.sub,
    "mul": T.mul,
    "div": lambda a, b: T.div(a, T.exp(b)),
    "broadcast_add": lambda a, b: T.add(a, T.sum_(b, axis=-1, keepdims=True)),
    "concatenate": lambda a, b: T.concatenate([a, b], axis=0),
    "stack": lambda a, b: T.stack([a, b], axis=1),
    "pairwise_cosine": lambda a, b: T.pairwise_cosine(T.reshape(a, (a.shape[0], -1)), T.reshape(b, (b.shape[0], -1))),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("shape", SHAPES)
def test_binary_gradients(rng, name, shape):
    assert check(BINARY[name], rng.normal(size=shape), rng.normal(size=shape)) < GRAD_TOL


@pytest.mark.parametrize("shape", [(1, 2, 4, 4), (2, 1, 6, 4), (3, 8, 2)])
def test_avg_pool_gradient(rng, shape):
    assert check(lambda x: T.avg_pool2d(x, 2), rng.normal(size=shape)) < GRAD_TOL


@pytest.mark.parametrize("src,dst", [((4, 4), (8, 8)), ((3, 5), (7, 4)), ((2, 2), (5, 9))])
def test_upsample_gradient(rng, src, dst):
    assert check(lambda x: T.upsample_bilinear(x, dst), rng.normal(size=(2,) + src)) < GRAD_TOL


def test_upsample_preserves_constants():
    out = T.upsample_bilinear(np.full((1, 3, 3), 2.5), (7, 5)).data
    np.testing.assert_allclose(out, 2.5, atol=1e-14)


def test_upsample_identity_size(rng):
    x = rng.normal(size=(2, 4, 4))
    np.testing.assert_allclose(T.upsample_bilinear(x, (4, 4)).data, x, atol=1e-15)


def test_log_clamps_nonpositive_inputs():
    out = T.log([0.0, -1.0, 1.0])
    assert np.all(np.isfinite(out.data))
    assert out.data[0] == pytest.approx(math.log(1e-12))


def test_max_gradient_goes_to_first_maximum():
    x = Tensor([1.0, 3.0, 3.0], requires_grad=True)
    T.max_(x, axis=0).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


# -- graph semantics ---------------------------------------------------------------

def test_shared_node_accumulates_gradient():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    (y + y + y).backward()
    assert x.grad == pytest.approx(12.0)


def test_backward_visits_nodes_in_reverse_append_order(monkeypatch):
    visited = []
    x = Tensor(np.ones(3), requires_grad=True)
    a = T.exp(x)
    b = a * 2.0
    c = T.sum_(b + a)
    ids = {id(t): t.node.id for t in (a, b, c)}
    original = T._collect

    def spy(root):
        order = original(root)
        visited.extend(t.node.id for t in order if t.node is not None)
        return order

    monkeypatch.setattr(T, "_collect", spy)
    c.backward()
    assert visited == sorted(visited, reverse=True)
    assert len(visited) == 4 and set(ids.values()) <= set(visited)


def test_graph_is_freed_after_backward():
    x = Tensor(np.ones(2), requires_grad=True)
    y = T.exp(x)
    z = T.sum_(y)
    z.backward()
    assert y.node is None and z.node is None


def test_linearity_of_backward(rng):
    for _ in range(5):
        data = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 2))

        def losses(x):
            h = T.relu(T.matmul(x, w))
            return T.sum_(T.softmax(h, axis=1) * 3.0), T.mean(T.exp(T.stop_gradient(h) * 0.1 + h))

        x1 = Tensor(data, requires_grad=True)
        l1, l2 = losses(x1)
        (l1 + l2).backward()
        xa = Tensor(data, requires_grad=True)
        losses(xa)[0].backward()
        xb = Tensor(data, requires_grad=True)
        losses(xb)[1].backward()
        np.testing.assert_allclose(x1.grad, xa.grad + xb.grad, rtol=1e-12, atol=1e-14)


def test_deterministic_forward_and_backward():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(2, 3, 8, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        out = T.sum_(T.softmax(T.conv2d(x, w, 2, 1), axis=1) ** 2)
        out.backward()
        return out.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_backward_requires_scalar_or_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        T.exp(x).backward()


# -- serialization ----------------------------------------------------------------

def test_container_roundtrip(rng):
    for shape in [(), (3,), (2, 3, 4)]:
        arr = rng.normal(size=shape)
        buf = io.BytesIO()
        write_tensor(buf, arr)
        buf.seek(0)
        back = read_tensor(buf)
        assert back.shape == arr.shape
        assert back.tobytes() == np.asarray(arr, dtype=np.float64).tobytes()


def test_container_layout():
    buf = io.BytesIO()
    write_tensor(buf, np.array([[1.0, 2.0, 3.0]]))
    raw = buf.getvalue()
    assert raw[:8] == b"MSCLTNS\x01"
    assert int.from_bytes(raw[8:16], "little") == 2
    assert int.from_bytes(raw[16:24], "little") == 1
    assert int.from_bytes(raw[24:32], "little") == 3
    assert np.frombuffer(raw[32:], "<f8").tolist() == [1.0, 2.0, 3.0]


def test_container_rejects_bad_magic():
    with pytest.raises(FormatError):
        read_tensor(io.BytesIO(b"NOTATENS" + bytes(16)))


def test_checkpoint_roundtrip(tmp_path, rng):
    params = {"a.w": rng.normal(size=(2, 3)), "b": rng.normal(size=4)}
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, params, meta={"seed": 3})
    back = load_checkpoint(path)
    assert set(back) == set(params)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])
