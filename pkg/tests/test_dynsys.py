import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tlcorrect.dynsys import (
    Domain,
    IntegrationError,
    SystemSpec,
    SystemSpecError,
    dae_residuals,
    default_params,
    eval_rhs,
    flow_map,
    make_system,
    step_rk4,
    system_names,
)


def scalar_system(rhs):
    return SystemSpec("scalar", 1, {}, lambda x, p: rhs(x))


def rk4_reference(f, x, h, n):
    """Textbook RK4, written out independently of the package."""
    x = np.array(x, dtype=float)
    for _ in range(n):
        a = f(x)
        b = f(x + 0.5 * h * a)
        c = f(x + 0.5 * h * b)
        d = f(x + h * c)
        x = x + (h / 6.0) * (a + 2 * b + 2 * c + d)
    return x


# -- right-hand sides -------------------------------------------------------

def test_harmonic_rhs():
    s = make_system("harmonic-oscillator", {"beta": 9.0})
    assert eval_rhs(s, [1.0, 0.0]).tolist() == [0.0, -9.0]


def test_pendulum_fixed_point():
    s = make_system("damped-pendulum", {"alpha": 0.1, "beta": 9.0})
    assert eval_rhs(s, [0.0, 0.0]).tolist() == [0.0, 0.0]


def test_van_der_pol_rhs():
    s = make_system("van-der-pol", {"mu": 1.0})
    assert eval_rhs(s, [2.0, 1.0]).tolist() == [1.0, -5.0]


def test_duffing_rhs():
    s = make_system("duffing", {"epsilon": 0.05})
    np.testing.assert_allclose(eval_rhs(s, [2.0, 0.5]), [0.5, -2.0 - 0.05 * 8.0], rtol=0, atol=1e-15)


def test_unknown_system_and_param():
    with pytest.raises(SystemSpecError, match="unknown system"):
        make_system("lorenz")
    with pytest.raises(SystemSpecError, match="gamma"):
        make_system("damped-pendulum", {"gamma": 1.0})


def test_every_catalog_system_is_finite_on_its_defaults():
    rng = np.random.default_rng(0)
    for name in system_names():
        s = make_system(name)
        x = s.complete(rng.uniform(0.1, 0.9, size=(5, s.diff_dim)))
        out = eval_rhs(s, x)
        assert out.shape == (5, s.diff_dim)
        assert np.all(np.isfinite(out)), name
        assert set(default_params(name)) == set(s.params)


def test_batch_shape_mismatch_rejected():
    s = make_system("van-der-pol")
    with pytest.raises(SystemSpecError):
        eval_rhs(s, np.zeros(3))


# -- RK4 step ------------------------------------------------------------------

def test_zero_field_leaves_state_unchanged():
    s = SystemSpec("zero", 2, {}, lambda x, p: np.zeros_like(x))
    x = np.array([0.3, -1.7])
    assert np.array_equal(step_rk4(s, x, 0.25), x)


def test_exponential_growth_step():
    h = 0.1
    out = step_rk4(scalar_system(lambda x: x), np.array([1.0]), h)
    # one RK4 step on x' = x is exactly the degree-4 Taylor polynomial of e^h
    taylor = 1 + h + h**2 / 2 + h**3 / 6 + h**4 / 24
    assert abs(out[0] - taylor) < 1e-15
    # so the gap to e^h is the Taylor remainder, about h^5/120
    assert abs(out[0] - math.exp(h)) == pytest.approx(h**5 / 120, rel=0.05)
    assert abs(flow_map(scalar_system(lambda x: x), np.array([1.0]), h, 10)[0] - math.exp(h)) < 1e-8


def test_harmonic_step_matches_rotation():
    s = make_system("harmonic-oscillator", {"beta": 9.0})
    h = 0.01
    out = step_rk4(s, np.array([1.0, 0.0]), h)
    np.testing.assert_allclose(out, [math.cos(3 * h), -3 * math.sin(3 * h)], rtol=0, atol=1e-9)


def test_step_matches_independent_rk4():
    s = make_system("damped-pendulum", {"alpha": 0.1, "beta": 9.0})

    def f(x):
        return np.array([x[1], -0.1 * x[1] - 9.0 * math.sin(x[0])])

    x = np.array([1.2, -0.7])
    np.testing.assert_allclose(step_rk4(s, x, 0.01), rk4_reference(f, x, 0.01, 1), rtol=0, atol=1e-15)


def test_blow_up_raises():
    s = scalar_system(lambda x: x**3)
    with pytest.raises(IntegrationError):
        flow_map(s, np.array([1e3]), 10.0, 10)


# -- flow map -------------------------------------------------------------------

def test_flow_map_harmonic_closed_form():
    s = make_system("harmonic-oscillator", {"beta": 9.0})
    out = flow_map(s, np.array([1.0, 0.0]), 0.1, 10)
    # RK4 on a linear system applies the degree-4 Taylor polynomial of hA per step
    hA = 0.01 * np.array([[0.0, 1.0], [-9.0, 0.0]])
    R = np.eye(2) + hA + hA @ hA / 2 + hA @ hA @ hA / 6 + hA @ hA @ hA @ hA / 24
    exact_rk4 = np.linalg.matrix_power(R, 10) @ np.array([1.0, 0.0])
    np.testing.assert_allclose(out, exact_rk4, rtol=0, atol=1e-14)
    np.testing.assert_allclose(out, [math.cos(0.3), -3 * math.sin(0.3)], rtol=0, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(1, 8))
def test_flow_map_semigroup(a, b, m):
    s = make_system("van-der-pol", {"mu": 1.0})
    x = np.array([a, b])
    twice = flow_map(s, x, 0.2, 2 * m)
    composed = flow_map(s, flow_map(s, x, 0.1, m), 0.1, m)
    assert np.array_equal(twice, composed)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_batched_flow_equals_row_by_row(seed):
    s = make_system("duffing")
    x = np.random.default_rng(seed).uniform(-2, 2, size=(4, 2))
    batch = flow_map(s, x, 0.1)
    for row in range(4):
        assert np.array_equal(batch[row], flow_map(s, x[row], 0.1))


def test_seir_prior_stays_in_unit_box():
    s = make_system("seir", {"mu": 0.3, "beta": 0.9, "sigma": 0.5, "gamma": 0.2})
    dom = Domain((0.0,) * 4, (1.0,) * 4, kind="simplex")
    rng = np.random.default_rng(3)
    x0 = np.array([dom.sample(rng) for _ in range(2000)])
    out = flow_map(s, x0, 0.2)
    assert np.all(out >= 0.0) and np.all(out <= 1.0)
    # population is conserved on the simplex for this variant
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_dae_constraints_hold_after_flow():
    for name in ("dae-circuit", "dae-circuit-cubic"):
        s = make_system(name)
        x0 = s.complete(np.array([[0.5, 0.1], [-1.0, -0.05]]))
        out = flow_map(s, x0, 5e-9 * 10)
        assert out.shape == (2, 4)
        assert np.max(np.abs(dae_residuals(s, out))) < 1e-12


def test_metabolic_linearized_differs_from_full():
    full, lin = make_system("metabolic"), make_system("metabolic-linearized")
    x = np.full(8, 0.5)
    assert not np.allclose(eval_rhs(full, x), eval_rhs(lin, x))


# -- domains ----------------------------------------------------------------------

def test_domain_validation_and_guard():
    with pytest.raises(SystemSpecError):
        Domain((1.0, 0.0), (0.0, 1.0))
    d = Domain((-1.0, 0.0), (1.0, 2.0))
    lo, hi = d.guard_box(10.0)
    np.testing.assert_allclose(lo, [-10.0, -9.0])
    np.testing.assert_allclose(hi, [10.0, 11.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_domain_samples_inside(seed):
    rng = np.random.default_rng(seed)
    for d in (Domain((-math.pi, -2 * math.pi), (math.pi, 2 * math.pi)),
              Domain((0.0,) * 4, (1.0,) * 4, kind="simplex")):
        x = d.sample(rng)
        assert d.contains(x)
    assert abs(Domain((0.0,) * 4, (1.0,) * 4, kind="simplex").sample(rng).sum() - 1.0) < 1e-12
