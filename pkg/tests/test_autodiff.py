import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from taskprune import autodiff as ad
from taskprune.autodiff import NonFiniteError, ShapeError, Tape, TapeError, Tensor

from conftest import rel_err


def test_matmul_identity():
    out = ad.matmul(Tensor(np.eye(2)), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])


def test_matmul_hand_arithmetic():
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
    expect = np.zeros((7, 3))
    for i in range(7):
        for j in range(3):
            for k in range(5):
                expect[i, j] += a[i, k] * b[k, j]
    assert np.abs(ad.matmul(a, b).data - expect).max() < 1e-12


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(np.array([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(ad.softmax(np.array([0.0, math.log(3)])).data, [0.25, 0.75], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=st.floats(-50, 50)),
    st.floats(-1e3, 1e3),
)
def test_softmax_normalized_and_shift_invariant(v, c):
    p = ad.softmax(v, axis=-1).data
    assert np.abs(p.sum(axis=-1) - 1).max() < 1e-12
    np.testing.assert_allclose(ad.softmax(v + c, axis=-1).data, p, atol=1e-12)


def test_softmax_stable_for_large_logits():
    p = ad.softmax(np.array([1000.0, 1000.0, -1000.0])).data
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-15)


def test_backward_product_rule():
    with Tape() as tape:
        x, y = tape.leaf(3.0), tape.leaf(-2.5)
        loss = ad.mul(x, y)
    g = tape.backward(loss)
    assert g[x] == -2.5 and g[y] == 3.0


def test_cross_entropy_gradient_closed_form():
    z = np.array([0.3, -1.2, 2.0, 0.1])
    t = 2
    with Tape() as tape:
        logits = tape.leaf(z)
        loss = ad.mul(ad.pick_last(ad.log_softmax(logits), np.array(t)), -1.0)
    g = tape.backward(loss)[logits]
    onehot = np.eye(4)[t]
    np.testing.assert_allclose(g, ad.softmax(z).data - onehot, atol=1e-15)


def test_backward_rejects_non_scalar():
    with Tape() as tape:
        x = tape.leaf(np.ones(3))
        y = ad.mul(x, 2.0)
    with pytest.raises(TapeError):
        tape.backward(y)


def _two_layer(params, x):
    h = ad.relu(ad.add(ad.matmul(x, params["w1"]), params["b1"]))
    logp = ad.log_softmax(ad.matmul(h, params["w2"]))
    return ad.sum_all(ad.pick_last(logp, np.array([0, 2, 1])))


def test_two_layer_parameter_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    base = {"w1": rng.standard_normal((4, 6)), "b1": rng.standard_normal(6), "w2": rng.standard_normal((6, 3))}
    x = rng.standard_normal((3, 4))
    with Tape() as tape:
        leaves = {k: tape.leaf(v) for k, v in base.items()}
        loss = _two_layer(leaves, x)
    grads = tape.backward(loss)
    step = 1e-5
    for name, arr in base.items():
        for idx in np.ndindex(arr.shape):
            plus = {k: v.copy() for k, v in base.items()}
            minus = {k: v.copy() for k, v in base.items()}
            plus[name][idx] += step
            minus[name][idx] -= step
            fd = (_two_layer(plus, x).data - _two_layer(minus, x).data) / (2 * step)
            assert rel_err(grads[leaves[name]][idx], float(fd)) < 1e-4, (name, idx)


def _probed_net(x, w, edit=None):
    h = ad.matmul(x, w)
    if edit is not None:
        h = ad.add(h, edit)
    ad.probe("h", h)
    return ad.sum_all(ad.mul(ad.softmax(h), np.arange(h.shape[-1], dtype=float)))


def test_probe_value_and_gradient():
    rng = np.random.default_rng(5)
    x, w = rng.standard_normal((2, 3)), rng.standard_normal((3, 4))
    with Tape() as tape:
        xl = tape.leaf(x)
        loss = _probed_net(xl, w)
    g = tape.backward(loss)
    np.testing.assert_array_equal(g.probe_value("h"), x @ w)
    step = 1e-5
    for idx in np.ndindex(2, 4):
        e = np.zeros((2, 4))
        e[idx] = step
        fd = (_probed_net(x, w, e).data - _probed_net(x, w, -e).data) / (2 * step)
        assert rel_err(g.probe_grad("h")[idx], float(fd)) < 1e-4


def test_probe_on_dead_branch_has_zero_gradient():
    with Tape() as tape:
        x = tape.leaf(np.ones((2, 2)))
        dead = ad.probe("dead", ad.mul(x, 3.0))
        loss = ad.sum_all(ad.mul(x, x))
    g = tape.backward(loss)
    np.testing.assert_array_equal(g.probe_grad("dead"), np.zeros((2, 2)))
    np.testing.assert_array_equal(g.probe_value("dead"), dead.data)


def test_duplicate_probe_name_rejected():
    with Tape() as tape:
        x = tape.leaf(np.ones(2))
        ad.probe("a", ad.mul(x, 1.0))
        with pytest.raises(TapeError):
            ad.probe("a", ad.mul(x, 2.0))


def test_probe_outside_tape_is_passthrough():
    t = Tensor(np.ones(3))
    assert ad.probe("anything", t) is t


def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        ad.exp(np.array([1e4]))


def test_replay_is_bit_identical():
    rng = np.random.default_rng(9)
    base = {"w1": rng.standard_normal((4, 6)), "b1": rng.standard_normal(6), "w2": rng.standard_normal((6, 3))}
    x = rng.standard_normal((3, 4))

    def run():
        with Tape() as tape:
            leaves = {k: tape.leaf(v) for k, v in base.items()}
            loss = _two_layer(leaves, x)
        g = tape.backward(loss)
        return loss.data.copy(), {k: g[t].copy() for k, t in leaves.items()}

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes()
    for k in g1:
        assert g1[k].tobytes() == g2[k].tobytes()


def test_backward_visits_nodes_in_reverse_topological_order():
    with Tape() as tape:
        x = tape.leaf(2.0)
        y = ad.mul(x, x)
        z = ad.add(y, x)
    for i, node in enumerate(tape.nodes):
        assert all(j is None or j < i for j in node.inputs)
    assert tape.backward(z)[x] == pytest.approx(5.0, abs=0)


def test_broadcast_gradients_are_summed():
    with Tape() as tape:
        a = tape.leaf(np.ones((3, 4)))
        b = tape.leaf(np.ones(4))
        loss = ad.sum_all(ad.mul(a, b))
    g = tape.backward(loss)
    np.testing.assert_array_equal(g[b], np.full(4, 3.0))
    assert g[b].shape == (4,)
