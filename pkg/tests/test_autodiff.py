import math

import numpy as np
import pytest

from jointrecall.errors import InvalidInputError
from jointrecall.neural import autodiff as ad
from jointrecall.patterns import cisa_rows


def _fd_check(build, arrays, tol=1e-6):
    params = [ad.parameter(a) for a in arrays]
    build(*params).backward()

    def f():
        return float(build(*[ad.constant(a) for a in arrays]).value)

    fds = ad.finite_difference_grad(f, arrays, eps=1e-5)
    for p, g in zip(params, fds):
        err = np.max(np.abs(p.grad - g)) / max(1e-12, np.max(np.abs(g)))
        assert err < tol, err


def test_sigmoid_at_zero():
    x = ad.parameter(np.zeros(1))
    ad.sum_all(ad.sigmoid(x)).backward()
    assert x.grad[0] == 0.25


def test_singleton_softmax():
    z = ad.parameter(np.array([[1.5, -2.0, 0.3]]))
    p = ad.masked_softmax(z, np.array([[False, True, False]]))
    assert p.value.tolist() == [[0.0, 1.0, 0.0]]
    ad.sum_all(ad.mul(p, np.array([[3.0, 5.0, 7.0]]))).backward()
    assert np.all(z.grad == 0)


def test_masked_softmax_routes_no_gradient_to_excluded():
    rng = np.random.default_rng(0)
    z = ad.parameter(rng.standard_normal((3, 5)))
    mask = rng.random((3, 5)) > 0.4
    mask[:, 0] = True
    ad.sum_all(ad.mul(ad.masked_softmax(z, mask), rng.standard_normal((3, 5)))).backward()
    assert np.all(z.grad[~mask] == 0)
    _fd_check(lambda a: ad.sum_all(ad.mul(ad.masked_softmax(a, mask), np.arange(15.0).reshape(3, 5))), [z.value.copy()])


def test_three_layer_composite():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 3))
    W1, W2, W3 = rng.standard_normal((3, 5)), rng.standard_normal((5, 4)), rng.standard_normal((4, 6))
    labels = rng.integers(0, 6, size=4)

    def net(x, a, b, c):
        h = ad.relu(ad.matmul(x, a))
        h = ad.sigmoid(ad.add(ad.matmul(h, b), 0.1))
        return ad.cross_entropy(ad.matmul(h, c), labels)

    _fd_check(net, [x, W1, W2, W3])


def test_elementwise_and_reductions():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((2, 3, 4))
    _fd_check(lambda a, b: ad.mean_all(ad.tanh(ad.mul(a, b) - a)), [a, b])
    row = rng.standard_normal(4)
    _fd_check(lambda a, r: ad.sum_all(ad.mul(ad.add(a, r), ad.scale(a, 2.0))), [a, row])


def test_embedding_and_rms_norm():
    rng = np.random.default_rng(3)
    table = rng.standard_normal((5, 4))
    w = rng.standard_normal(4)
    ids = np.array([[0, 3, 3], [4, 0, 1]])
    r = rng.standard_normal((2, 3, 4))
    _fd_check(lambda t, w: ad.sum_all(ad.mul(ad.rms_norm(ad.embedding(t, ids), w), r)), [table, w])


def test_cross_entropy_weights_and_uniform():
    logits = np.zeros((2, 3, 16))
    labels = np.zeros((2, 3), dtype=int)
    assert abs(ad.cross_entropy(logits, labels).value - math.log(16)) < 1e-12
    rng = np.random.default_rng(4)
    z = rng.standard_normal((2, 3, 4))
    lab = rng.integers(0, 4, size=(2, 3))
    w = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, 0.0]])
    _fd_check(lambda z: ad.cross_entropy(z, lab, w), [z])
    with pytest.raises(InvalidInputError):
        ad.cross_entropy(z, lab, np.zeros((2, 3)))


def test_gated_scan_and_attention():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((2, 7, 3))
    u = rng.standard_normal((2, 7, 3))
    r = rng.standard_normal((2, 7, 3))
    _fd_check(lambda a, u: ad.sum_all(ad.mul(ad.gated_scan(ad.sigmoid(a), u), r)), [a, u])
    idx = np.ascontiguousarray(np.broadcast_to(cisa_rows("a_shaped", 7, 4), (2, 7, 4)))
    q, k, v = rng.standard_normal((3, 2, 7, 3))
    _fd_check(lambda q, k, v: ad.sum_all(ad.mul(ad.sparse_attention(q, k, v, idx), r)), [q, k, v])


def test_ranking_loss_values_and_grad():
    assert abs(ad.pairwise_ranking_loss(np.zeros(2), np.array([0.5, 0.5])).value - math.log(2)) < 1e-12
    assert abs(ad.pairwise_ranking_loss(np.array([10.0, -10.0]), np.array([1.0, 0.0])).value - 0.34657) < 1e-5
    rng = np.random.default_rng(6)
    y = rng.integers(0, 3, size=(2, 4, 5)).astype(float)
    w = rng.random((2, 4))
    _fd_check(lambda x: ad.pairwise_ranking_loss(ad.reshape(x, (2, 1, 5)), y, w), [rng.standard_normal((2, 5))])
    _fd_check(lambda x: ad.pairwise_ranking_loss(x, y), [rng.standard_normal((2, 4, 5))])


def test_shape_errors():
    with pytest.raises(InvalidInputError):
        ad.matmul(np.zeros((2, 3)), np.zeros((4, 2)))
    with pytest.raises(InvalidInputError):
        ad.add(np.zeros(3), np.zeros(4))
    with pytest.raises(InvalidInputError):
        ad.mul(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(InvalidInputError):
        ad.parameter(np.zeros(3)).backward()


def test_shared_node_visited_once():
    x = ad.parameter(np.array([2.0]))
    y = ad.mul(x, x)
    z = ad.add(y, y)
    ad.sum_all(z).backward()
    assert x.grad[0] == 8.0
