import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcr.rl import TabularMdp, shape_mdp, value_iteration
from gcr.shaping import ShapingConfig, shaped_reward, shaping_bias, shaping_term

unit = st.floats(0.0, 1.0)


@pytest.mark.parametrize("mode, alpha, beta", [("delta", 1.0, 1.0), ("absolute", 1.0, 0.0),
                                                ("ng_potential", 0.98, 1.0)])
def test_mode_presets(mode, alpha, beta):
    cfg = ShapingConfig(mode=mode, gamma=0.98, alpha=7.0, beta=7.0)
    assert (cfg.alpha, cfg.beta) == (alpha, beta)


def test_custom_keeps_coefficients_and_validates():
    cfg = ShapingConfig(mode="custom", alpha=0.3, beta=0.7)
    assert shaping_term(cfg, 1.0, 1.0) == pytest.approx(-0.4)
    with pytest.raises(ValueError):
        ShapingConfig(mode="custom", alpha=-1.0)
    with pytest.raises(ValueError):
        ShapingConfig(mode="bogus")
    with pytest.raises(ValueError):
        ShapingConfig(gamma=1.0)


def test_worked_examples():
    assert shaped_reward(ShapingConfig(), 0.0, 0.2, 0.5) == pytest.approx(0.3)
    assert shaped_reward(ShapingConfig(mode="absolute"), 1.0, 0.2, 0.5) == pytest.approx(1.5)
    assert shaped_reward(ShapingConfig(mode="ng_potential", gamma=0.9), 0.0, 0.5, 0.5) == pytest.approx(-0.05)


def test_vectorised():
    out = shaped_reward(ShapingConfig(), np.zeros(3), np.array([0.1, 0.2, 0.3]), np.array([0.2, 0.2, 0.2]))
    np.testing.assert_allclose(out, [0.1, 0.0, -0.1])


@settings(max_examples=200)
@given(unit, unit, st.floats(0.01, 0.99))
def test_delta_equals_ng_plus_bias(phi_s, phi_next, gamma):
    delta = shaping_term(ShapingConfig(mode="delta", gamma=gamma), phi_s, phi_next)
    ng = shaping_term(ShapingConfig(mode="ng_potential", gamma=gamma), phi_s, phi_next)
    assert abs(delta - (ng + shaping_bias(ShapingConfig(gamma=gamma), phi_next))) <= 1e-15


@settings(max_examples=100)
@given(unit, unit)
def test_delta_term_bounded(phi_s, phi_next):
    assert -1.0 <= shaping_term(ShapingConfig(), phi_s, phi_next) <= 1.0


def test_bias_only_for_delta():
    with pytest.raises(ValueError):
        shaping_bias(ShapingConfig(mode="absolute"), 0.5)


def random_mdp(rng, n=25, a=4, gamma=0.95):
    P = rng.random((n, a, n)) ** 4
    P /= P.sum(axis=2, keepdims=True)
    R = rng.normal(size=(n, a, n))
    return TabularMdp(P, R, gamma)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_potential_shaping_preserves_optimal_policy(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng)
    phi = rng.random(mdp.n_states)
    _, q, pi = value_iteration(mdp)
    _, q2, pi2 = value_iteration(shape_mdp(mdp, phi))
    np.testing.assert_allclose(q2, q - phi[:, None], atol=1e-8)
    top = np.sort(q, axis=1)
    untied = top[:, -1] - top[:, -2] > 1e-6
    np.testing.assert_array_equal(pi[untied], pi2[untied])


def test_value_iteration_known_chain():
    # two states, one action each: 0 -> 1 (reward 1), 1 absorbing (reward 0)
    P = np.array([[[0.0, 1.0]], [[0.0, 1.0]]])
    R = np.array([[[0.0, 1.0]], [[0.0, 0.0]]])
    v, q, pi = value_iteration(TabularMdp(P, R, 0.5))
    np.testing.assert_allclose(v, [1.0, 0.0], atol=1e-12)
    assert pi.tolist() == [0, 0]


def test_terminal_states_stop_bootstrapping():
    P = np.array([[[0.0, 1.0]], [[0.0, 1.0]]])
    R = np.array([[[0.0, 1.0]], [[0.0, 1.0]]])
    mdp = TabularMdp(P, R, 0.9, terminal=np.array([False, True]))
    v, _, _ = value_iteration(mdp)
    # state 1 collects its reward once and does not bootstrap; state 0 sees 1 + 0.9 * 1
    np.testing.assert_allclose(v, [1.9, 1.0], atol=1e-12)


def test_tabular_validation():
    with pytest.raises(ValueError):
        TabularMdp(np.ones((2, 1, 2)), np.zeros((2, 1)), 0.9)
    with pytest.raises(ValueError):
        value_iteration(random_mdp(np.random.default_rng(0), n=3), tol=0.0)
