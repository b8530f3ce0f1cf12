import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tlcorrect import nnet
from tlcorrect.nnet import Architecture, FreezeSpec, NetParams


def random_net(arch, seed, scale=0.5):
    rng = np.random.default_rng(seed)
    return NetParams(tuple(rng.normal(0, scale, size=s) for s in arch.layer_shapes()), arch)


def fd_grads(params, x, out_grad, h=1e-6):
    """Central differences of sum(out_grad * forward(x)) for every entry."""
    grads = []
    for i, w in enumerate(params.layers):
        g = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            vals = []
            for sign in (1, -1):
                layers = [l.copy() for l in params.layers]
                layers[i][idx] += sign * h
                y = nnet.predict(NetParams(tuple(layers), params.arch), x)
                vals.append(np.sum(out_grad * y))
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        grads.append(g)
    return grads


def max_rel_err(a, b):
    """Largest entry-wise gap relative to the largest entry (infinity-norm relative error)."""
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300))


def test_zero_residual_net_is_identity():
    arch = Architecture(3, 2, 7)
    p = NetParams(tuple(np.zeros(s) for s in arch.layer_shapes()), arch)
    x = np.random.default_rng(0).normal(size=(5, 3))
    assert np.array_equal(nnet.predict(p, x), x)


def test_hand_computed_forward():
    arch = Architecture(1, 1, 1, residual=False)
    p = NetParams((np.array([[0.0], [1.0]]), np.array([[0.5], [2.0]])), arch)
    y = nnet.predict(p, np.array([1.0]))
    assert y[0] == pytest.approx(2 * math.tanh(1.0) + 0.5, abs=1e-15)
    assert y[0] == pytest.approx(2.023188, abs=1e-6)


def test_forward_is_deterministic():
    p = nnet.init_params(Architecture(2, 3, 20), 1)
    x = np.random.default_rng(1).normal(size=(10, 2))
    assert nnet.predict(p, x).tobytes() == nnet.predict(p, x).tobytes()


def test_shape_errors():
    with pytest.raises(nnet.ShapeError):
        Architecture(2, 0, 5)
    arch = Architecture(2, 1, 3)
    with pytest.raises(nnet.ShapeError):
        NetParams((np.zeros((3, 3)), np.zeros((3, 2))), arch)
    with pytest.raises(nnet.ShapeError):
        nnet.predict(nnet.init_params(arch, 0), np.zeros(3))


def test_layer_arrays_are_read_only():
    p = nnet.init_params(Architecture(2, 2, 4), 0)
    with pytest.raises(ValueError):
        p.layers[0][0, 0] = 1.0


# -- backward -----------------------------------------------------------------

def test_zero_out_grad_gives_zero_gradients():
    p = random_net(Architecture(2, 3, 6), 2)
    y, cache = nnet.forward(p, np.ones((4, 2)))
    grads, gin = nnet.backward(p, cache, np.zeros_like(y))
    assert all(not np.any(g) for g in grads)
    assert not np.any(gin)


def test_output_bias_gradient_is_out_grad():
    p = random_net(Architecture(3, 2, 5), 3)
    x = np.array([0.1, -0.4, 0.9])
    y, cache = nnet.forward(p, x)
    og = np.array([0.3, -1.2, 2.0])
    grads, _ = nnet.backward(p, cache, og)
    assert np.array_equal(grads[-1][0], og)


@pytest.mark.parametrize("residual", [True, False])
@pytest.mark.parametrize("activation", ["tanh", "sigmoid"])
def test_gradients_match_finite_differences(residual, activation):
    arch = Architecture(3, 3, 20, activation, residual)
    p = random_net(arch, 4)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 3))
    og = rng.normal(size=(4, 3))
    y, cache = nnet.forward(p, x)
    grads, _ = nnet.backward(p, cache, og)
    for g, f in zip(grads, fd_grads(p, x, og)):
        assert max_rel_err(g, f) < 1e-6


def test_input_gradient_matches_finite_differences():
    arch = Architecture(2, 2, 8)
    p = random_net(arch, 6)
    x = np.array([0.3, -0.8])
    og = np.array([1.0, 0.5])
    _, cache = nnet.forward(p, x)
    _, gin = nnet.backward(p, cache, og)
    h = 1e-6
    fd = np.array([
        (np.sum(og * nnet.predict(p, x + h * e)) - np.sum(og * nnet.predict(p, x - h * e))) / (2 * h)
        for e in np.eye(2)
    ])
    assert max_rel_err(gin, fd) < 1e-6


def test_partial_backward_matches_full():
    p = random_net(Architecture(2, 4, 6), 7)
    x = np.random.default_rng(7).normal(size=(3, 2))
    og = np.ones((3, 2))
    _, cache = nnet.forward(p, x)
    full, _ = nnet.backward(p, cache, og)
    part, gin = nnet.backward(p, cache, og, start=3, need_input_grad=False)
    assert gin is None
    assert len(part) == 2
    for a, b in zip(part, full[3:]):
        assert np.array_equal(a, b)


def test_stale_cache_rejected():
    arch = Architecture(2, 1, 3)
    p, q = nnet.init_params(arch, 0), nnet.init_params(arch, 1)
    _, cache = nnet.forward(p, np.zeros(2))
    with pytest.raises(nnet.ShapeError):
        nnet.backward(q, cache, np.zeros(2))


# -- Adam --------------------------------------------------------------------

def test_zero_gradient_adam_step():
    p = nnet.init_params(Architecture(2, 2, 4), 0)
    f = FreezeSpec(0)
    st_ = nnet.adam_init(p, f)
    q, st2 = nnet.adam_step(st_, p, [np.zeros_like(w) for w in p.layers], f)
    assert st2.step_count == 1
    for a, b in zip(p.layers, q.layers):
        assert np.array_equal(a, b)


def test_first_adam_step_by_hand():
    p = nnet.init_params(Architecture(2, 1, 3), 0)
    f = FreezeSpec(0)
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    g = [np.full(w.shape, v) for w, v in zip(p.layers, (0.5, -2e-3))]
    q, _ = nnet.adam_step(nnet.adam_init(p, f, lr=lr), p, g, f)
    for w, w_new, gi in zip(p.layers, q.layers, g):
        m_hat = ((1 - b1) * gi) / (1 - b1)
        v_hat = ((1 - b2) * gi * gi) / (1 - b2)
        expected = w - lr * m_hat / (np.sqrt(v_hat) + eps)
        np.testing.assert_allclose(w_new, expected, rtol=0, atol=1e-18)
        # the first step is lr * sign(g) up to the epsilon term
        alt = w - lr * gi / (np.abs(gi) + eps * math.sqrt(1 - b2))
        np.testing.assert_allclose(w_new, alt, rtol=0, atol=lr * 1e-5)


def test_frozen_layers_untouched_after_many_steps():
    arch = Architecture(2, 3, 5)
    p = nnet.init_params(arch, 0)
    f = FreezeSpec(arch.hidden_layers)
    state = nnet.adam_init(p, f)
    rng = np.random.default_rng(0)
    q = p
    for _ in range(1000):
        q, state = nnet.adam_step(state, q, [rng.normal(size=w.shape) for w in q.layers], f)
    for i in range(arch.hidden_layers):
        assert q.layer_bytes(i) == p.layer_bytes(i)
    assert q.layer_bytes(arch.hidden_layers) != p.layer_bytes(arch.hidden_layers)


def test_freeze_spec_bounds():
    p = nnet.init_params(Architecture(2, 2, 3), 0)
    with pytest.raises(nnet.ShapeError):
        FreezeSpec(3).check(p)


# -- initialisation -----------------------------------------------------------

def test_init_determinism_and_bounds():
    arch = Architecture(3, 3, 50)
    a, b, c = nnet.init_params(arch, 9), nnet.init_params(arch, 9), nnet.init_params(arch, 10)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.layers, b.layers))
    assert any(x.tobytes() != y.tobytes() for x, y in zip(a.layers, c.layers))
    for w in a.layers:
        fan_in, fan_out = w.shape[0] - 1, w.shape[1]
        assert np.all(np.abs(w[1:]) <= math.sqrt(6 / (fan_in + fan_out)))
        assert not np.any(w[0])


# -- checkpoints ----------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3), st.integers(1, 6))
def test_checkpoint_round_trip_is_bit_exact(seed, m, d):
    p = random_net(Architecture(2, m, d), seed, scale=3.0)
    q = nnet.params_from_dict(nnet.params_to_dict(p, seed=seed))
    assert q.arch == p.arch
    assert all(a.tobytes() == b.tobytes() for a, b in zip(p.layers, q.layers))
    assert nnet.params_hash(p) == nnet.params_hash(q)


def test_checkpoint_file(tmp_path):
    p = nnet.init_params(Architecture(2, 2, 4, residual=False), 3)
    path = nnet.save_checkpoint(tmp_path / "net.json", p, seed=3, provenance={"note": "x"})
    q, doc = nnet.load_checkpoint(path)
    assert doc["seed"] == 3 and doc["provenance"] == {"note": "x"}
    assert nnet.params_hash(p) == nnet.params_hash(q)
    doc["format_version"] = 99
    with pytest.raises(ValueError, match="format_version"):
        nnet.params_from_dict(doc)
