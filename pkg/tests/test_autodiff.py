import numpy as np
import pytest

from gaitssl import autodiff as ad
from gaitssl.autodiff import Tape, Tensor, grad_check
from gaitssl.errors import NumericalError


def tensor(arr, requires_grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def test_softmax_uniform():
    out = ad.softmax(tensor([0.0, 0.0, 0.0], requires_grad=False))
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3])
    assert out.data[0] == out.data[1] == out.data[2]
    assert np.isclose(out.data.sum(), 1.0)


def test_layer_norm_constant_vector_is_zero():
    out = ad.layer_norm(tensor([[4.2, 4.2, 4.2, 4.2]], requires_grad=False))
    assert np.allclose(out.data, 0.0)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(2, 3))
    b = rng.normal(size=(3, 2))
    got = ad.matmul(tensor(a, False), tensor(b, False)).data
    want = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(3):
                want[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(got - want)) < 1e-6


def test_grad_of_sum_of_squares():
    x = tensor([1.0, 2.0, 3.0])

    def f(params):
        return ad.reduce_sum(ad.mul(params["x"], params["x"]))

    report = grad_check(f, {"x": x}, step=1e-5, tol=1e-9)
    assert report.ok, report.worst
    with Tape() as tape:
        out = f({"x": x})
    tape.backward(out)
    assert np.allclose(x.grad, [2.0, 4.0, 6.0], rtol=1e-12)


def test_fanout_gradients_accumulate():
    x = tensor([1.5, -2.0])
    with Tape() as tape:
        out = ad.reduce_sum(ad.add(ad.mul(x, x), x))  # d/dx (x^2 + x) = 2x + 1
    tape.backward(out)
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_backward_visits_each_node_once():
    calls = []
    x = tensor([1.0, 2.0])
    with Tape() as tape:
        y = ad.mul(x, x)
        z = ad.reduce_sum(ad.add(y, y))
        n_nodes = len(tape)
        wrapped = [(out, (lambda fn: (lambda g: (calls.append(1), fn(g))))(fn)) for out, fn in tape._nodes]
        tape._nodes = wrapped
        tape.backward(z)
    assert len(calls) == n_nodes


def test_masked_fill_blocks_gradient():
    x = tensor([[1.0, 2.0], [3.0, 4.0]])
    mask = np.array([[True, False], [False, True]])
    with Tape() as tape:
        out = ad.reduce_sum(ad.masked_fill(x, mask, -50.0))
    tape.backward(out)
    assert out.data == -50.0 + 2.0 + 3.0 + -50.0
    assert np.array_equal(x.grad, np.where(mask, 0.0, 1.0))


def test_embedding_select_scatter_adds():
    table = tensor(np.arange(8.0).reshape(4, 2))
    idx = np.array([0, 2, 0])
    with Tape() as tape:
        out = ad.reduce_sum(ad.embedding_select(table, idx))
    tape.backward(out)
    expected = np.zeros((4, 2))
    expected[0] = 2.0  # selected twice
    expected[2] = 1.0
    assert np.array_equal(table.grad, expected)


def test_grad_check_rejects_float32():
    x = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError, match="float64"):
        grad_check(lambda p: ad.reduce_sum(p["x"]), {"x": x})


def test_grad_check_flags_nonfinite():
    x = tensor([1.0])
    with pytest.raises(NumericalError):
        grad_check(lambda p: ad.log(ad.reduce_sum(ad.scale(p["x"], 0.0))), {"x": x})


def _scalarize(out, rng):
    w = rng.normal(size=out.data.shape)
    return ad.reduce_mean(ad.mul(out, w))


PRIMITIVE_CASES = [
    ("matmul", lambda p, r: ad.matmul(p["a"], p["b"]), {"a": (3, 4), "b": (4, 2)}),
    ("matmul_batched", lambda p, r: ad.matmul(p["a"], p["b"]), {"a": (2, 3, 4, 5), "b": (2, 3, 5, 4)}),
    ("matmul_broadcast", lambda p, r: ad.matmul(p["a"], p["b"]), {"a": (2, 4, 3), "b": (3, 6)}),
    ("add_broadcast", lambda p, r: ad.add(p["a"], p["b"]), {"a": (3, 4), "b": (4,)}),
    ("sub", lambda p, r: ad.sub(p["a"], p["b"]), {"a": (3, 4), "b": (3, 4)}),
    ("mul_broadcast", lambda p, r: ad.mul(p["a"], p["b"]), {"a": (2, 3, 4), "b": (3, 1)}),
    ("scale", lambda p, r: ad.scale(p["a"], -1.7), {"a": (3, 3)}),
    ("transpose", lambda p, r: ad.transpose(p["a"], (1, 2, 0)), {"a": (2, 3, 4)}),
    ("reshape", lambda p, r: ad.reshape(p["a"], (6, 2)), {"a": (3, 4)}),
    ("concat", lambda p, r: ad.concat([p["a"], p["b"]], axis=1), {"a": (2, 3), "b": (2, 2)}),
    ("slice", lambda p, r: ad.slice_axis(p["a"], 1, 1, 3), {"a": (2, 4)}),
    ("softmax", lambda p, r: ad.softmax(p["a"], axis=-1), {"a": (3, 5)}),
    ("layer_norm", lambda p, r: ad.layer_norm(p["a"], axis=-1), {"a": (4, 6)}),
    ("gelu", lambda p, r: ad.gelu(p["a"]), {"a": (3, 4)}),
    ("tanh", lambda p, r: ad.tanh(p["a"]), {"a": (3, 4)}),
    ("exp", lambda p, r: ad.exp(p["a"]), {"a": (3, 4)}),
    ("log", lambda p, r: ad.log(ad.add(ad.mul(p["a"], p["a"]), np.float64(0.5))), {"a": (3, 4)}),
    ("sum_axis", lambda p, r: ad.reduce_sum(p["a"], axis=1, keepdims=True), {"a": (3, 4)}),
    ("mean_axis", lambda p, r: ad.reduce_mean(p["a"], axis=0), {"a": (3, 4)}),
    ("l2_normalize", lambda p, r: ad.l2_normalize(p["a"], axis=-1), {"a": (4, 6)}),
    ("masked_fill", lambda p, r: ad.masked_fill(p["a"], r.random((3, 4)) < 0.3, 2.5), {"a": (3, 4)}),
    ("embedding_select", lambda p, r: ad.embedding_select(p["a"], r.integers(0, 5, size=7)), {"a": (5, 3)}),
]


@pytest.mark.parametrize("name,builder,shapes", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_backward_matches_finite_differences(name, builder, shapes, seed):
    rng = np.random.default_rng(seed)
    params = {k: tensor(rng.normal(size=s)) for k, s in shapes.items()}
    weights_rng = np.random.default_rng(seed + 100)
    case_rng = np.random.default_rng(seed + 200)

    def f(p):
        return _scalarize(builder(p, np.random.default_rng(seed + 200)), np.random.default_rng(seed + 100))

    report = grad_check(f, params, step=(1e-4, 1e-5, 1e-6), tol=1e-7)
    assert report.ok, f"{name}: {report.worst}"


def test_forward_with_no_tape_records_nothing():
    x = tensor(np.ones(4))
    out = ad.reduce_sum(ad.mul(x, x))
    assert out.grad is None and not out.requires_grad
