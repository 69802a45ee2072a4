import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oceandiff.constraint import (
    ConstraintConfig,
    boundary_fixup,
    constraint_gradient,
    constraint_value,
    kappa,
)
from oceandiff.errors import ValidationError
from oceandiff.grid import OceanState

from conftest import random_state


def test_value_zero_when_satisfied():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 5, 6))
    x -= x.mean(axis=(1, 2), keepdims=True)
    cfg = ConstraintConfig.zeros(4)
    assert constraint_value(x, cfg) == pytest.approx(0.0, abs=1e-24)


def test_value_hand_example():
    # two channels over two cells: means 2 and 0, targets 0 -> C = 4
    x = np.array([[[1.0, 3.0]], [[-1.0, 1.0]]])  # (2, 1, 2)
    cfg = ConstraintConfig.zeros(2)
    assert constraint_value(x, cfg) == pytest.approx(4.0)


def test_value_quadratic_shift_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 4, 4))
    cfg = ConstraintConfig.zeros(3)
    c = 0.7
    shifted = x.copy()
    shifted[1] += c
    m1 = x[1].mean()
    delta = (m1 + c - cfg.mu[1]) ** 2 - (m1 - cfg.mu[1]) ** 2
    assert constraint_value(shifted, cfg) - constraint_value(x, cfg) == pytest.approx(delta)


def test_gradient_zero_at_satisfied():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 5, 6))
    x -= x.mean(axis=(1, 2), keepdims=True)
    g = constraint_gradient(x, ConstraintConfig.zeros(4))
    assert np.allclose(g, 0.0, atol=1e-15)


def test_gradient_hand_example():
    x = np.array([[[1.0, 3.0]], [[-1.0, 1.0]]])
    g = constraint_gradient(x, ConstraintConfig.zeros(2))
    assert np.allclose(g[0], 2.0)
    assert np.allclose(g[1], 0.0)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 6, 5))
    cfg = ConstraintConfig(mu=rng.standard_normal(4))
    g = constraint_gradient(x, cfg)
    eps = 1e-3  # C is quadratic: no truncation error, larger step beats roundoff
    for _ in range(60):
        idx = tuple(rng.integers(0, d) for d in x.shape)
        xp = x.copy()
        xm = x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        fd = (constraint_value(xp, cfg) - constraint_value(xm, cfg)) / (2 * eps)
        denom = max(abs(fd), abs(g[idx]), 1e-12)
        assert abs(fd - g[idx]) / denom <= 1e-8


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_gradient_horizontally_uniform(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4, 5))
    g = constraint_gradient(x, ConstraintConfig.zeros(3))
    for k in range(3):
        assert np.ptp(g[k]) == 0.0


def test_gradient_descent_decreases_value():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 6, 5)) + 1.0
    cfg = ConstraintConfig.zeros(4)
    n = x.shape[1] * x.shape[2]
    step = 0.4 * n  # below the N/2 stability bound
    x2 = x - step * constraint_gradient(x, cfg)
    assert constraint_value(x2, cfg) < constraint_value(x, cfg)


def test_value_batched():
    rng = np.random.default_rng(5)
    xb = rng.standard_normal((3, 2, 4, 4))
    cfg = ConstraintConfig.zeros(2)
    vals = constraint_value(xb, cfg)
    assert vals.shape == (3,)
    for i in range(3):
        assert vals[i] == pytest.approx(constraint_value(xb[i], cfg))


def test_channel_mismatch_rejected():
    with pytest.raises(ValidationError):
        constraint_value(np.zeros((3, 2, 2)), ConstraintConfig.zeros(4))


def test_kappa_derived_values():
    cfg = ConstraintConfig.zeros(2)  # defaults eta=1e-3, lam=40, k_exp=20
    s_total = 1000
    assert kappa(s_total, s_total, cfg) == pytest.approx(1e-3 * (1 + 40 * np.exp(-20.0)), rel=1e-12)
    assert kappa(s_total, s_total, cfg) == pytest.approx(1.0000000824e-3, rel=1e-6)
    assert kappa(s_total // 4, s_total, cfg) == pytest.approx(1e-3 * (1 + 40 * np.exp(-5.0)), rel=1e-12)
    assert kappa(s_total // 4, s_total, cfg) == pytest.approx(1.2695e-3, rel=1e-4)


@settings(max_examples=20, deadline=None)
@given(
    eta=st.floats(1e-6, 1.0),
    lam=st.floats(0.1, 100.0),
    # keep lam * exp(-k_exp) above float64 resolution so ties cannot occur
    k_exp=st.floats(0.5, 20.0),
    n_steps=st.integers(10, 500),
)
def test_kappa_positive_strictly_decreasing(eta, lam, k_exp, n_steps):
    cfg = ConstraintConfig(mu=np.zeros(2), eta=eta, lam=lam, k_exp=k_exp)
    vals = [kappa(s, n_steps, cfg) for s in range(1, n_steps + 1)]
    assert all(v > 0 for v in vals)
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_fixup_defining_property(tiny_geometry):
    state = random_state(tiny_geometry, seed=6, normalized=True)
    fixed = boundary_fixup(state)
    for a in (fixed.temperature, fixed.salinity):
        assert np.array_equal(a[:, :, 0], a[:, :, 1])
        assert np.array_equal(a[:, :, -1], a[:, :, -2])
    # interior untouched
    assert np.array_equal(fixed.temperature[:, :, 1:-1], state.temperature[:, :, 1:-1])


def test_fixup_noop_when_already_satisfied(tiny_geometry):
    state = boundary_fixup(random_state(tiny_geometry, seed=7, normalized=True))
    again = boundary_fixup(state)
    assert np.array_equal(again.temperature, state.temperature)
    assert np.array_equal(again.salinity, state.salinity)


def test_fixup_idempotent(tiny_geometry):
    state = random_state(tiny_geometry, seed=8, normalized=True)
    once = boundary_fixup(state)
    twice = boundary_fixup(once)
    assert np.array_equal(once.temperature, twice.temperature)
    assert np.array_equal(once.salinity, twice.salinity)


def test_fixup_level_mode(tiny_geometry):
    state = random_state(tiny_geometry, seed=9, normalized=True)
    fixed = boundary_fixup(state, walls="level")
    assert np.array_equal(fixed.temperature[0], fixed.temperature[1])
    assert np.array_equal(fixed.salinity[-1], fixed.salinity[-2])


def test_fixup_needs_three_rows():
    state = OceanState(
        temperature=np.zeros((3, 4, 2)), salinity=np.zeros((3, 4, 2)), normalized=True
    )
    with pytest.raises(ValidationError):
        boundary_fixup(state)
