"""在线贝叶斯逻辑回归：先验、Laplace 更新、调和预测、采样与后验重塑"""

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.special import expit

from src.bayes_glm import (
    BeliefState, fit_history, init_prior, kappa, load_belief, predict, predict_many, reshape,
    sample_weights, save_belief, update
)
from src.errors import DomainError
from src.model_core import ActionSpace, Observation, PatientContext, assemble


def _objective(w, state, phi, y):
    return 0.5 * np.sum(state.q * (w - state.m) ** 2) + np.logaddexp(0.0, -y * np.dot(w, phi))


def _gradient(w, state, phi, y):
    return state.q * (w - state.m) - y * phi * expit(-y * np.dot(w, phi))


def _random_instance(rng):
    d = int(rng.integers(1, 11))
    state = BeliefState(rng.normal(0.0, 1.0, d), rng.uniform(0.5, 10.0, d))
    phi = (rng.random(d) < 0.5).astype(float)
    phi[0] = 1.0
    y = int(rng.choice([-1, 1]))
    return state, phi, y


def test_init_prior():
    state = init_prior(3, 1.0)
    assert state.m.tolist() == [0.0, 0.0, 0.0]
    assert state.q.tolist() == [1.0, 1.0, 1.0]
    assert 1.0 / np.sqrt(init_prior(1, 4.0).q[0]) == pytest.approx(0.5)


@pytest.mark.parametrize("d, lam", [(0, 1.0), (3, 0.0), (3, -1.0)])
def test_init_prior_rejects_invalid(d, lam):
    with pytest.raises(DomainError):
        init_prior(d, lam)


def test_belief_state_requires_positive_precision():
    with pytest.raises(DomainError):
        BeliefState([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(DomainError):
        BeliefState([0.0], [1.0, 1.0])


def test_update_scalar_example():
    state = init_prior(1, 1.0)
    plus = update(state, np.array([1.0]), 1)
    minus = update(state, np.array([1.0]), -1)

    # m' 是 w = σ(−w) 的根
    assert plus.m[0] == pytest.approx(0.401, abs=1e-3)
    assert plus.m[0] == pytest.approx(expit(-plus.m[0]), abs=1e-9)
    assert plus.q[0] == pytest.approx(1.2402, abs=1e-4)
    assert minus.m[0] == pytest.approx(-plus.m[0], abs=1e-12)
    assert minus.q[0] == pytest.approx(plus.q[0], abs=1e-12)


def test_update_matches_numerical_minimizer():
    rng = np.random.default_rng(7)
    for _ in range(100):
        state, phi, y = _random_instance(rng)
        new = update(state, phi, y)
        oracle = minimize(
            _objective, state.m.copy(), args=(state, phi, y), jac=_gradient,
            method="BFGS", options={"gtol": 1e-12, "maxiter": 1000}
        )
        np.testing.assert_allclose(new.m, oracle.x, atol=1e-6)


def test_update_stationarity_residual():
    rng = np.random.default_rng(11)
    for _ in range(100):
        state, phi, y = _random_instance(rng)
        new = update(state, phi, y)
        assert np.max(np.abs(_gradient(new.m, state, phi, y))) < 1e-8


def test_update_precision_curvature():
    rng = np.random.default_rng(3)
    state, phi, y = _random_instance(rng)
    new = update(state, phi, y)
    zeta = expit(-np.dot(new.m, phi))
    np.testing.assert_allclose(new.q, state.q + zeta * (1 - zeta) * phi ** 2)


def test_update_zero_features_leaves_state_unchanged():
    state = BeliefState([0.3, -1.0], [2.0, 0.5])
    for y in (-1, 1):
        new = update(state, np.zeros(2), y)
        np.testing.assert_array_equal(new.m, state.m)
        np.testing.assert_array_equal(new.q, state.q)


def test_untouched_coordinates_are_frozen():
    state = BeliefState([0.3, -1.0, 2.0], [2.0, 0.5, 1.5])
    new = update(state, np.array([1.0, 0.0, 1.0]), 1)
    assert new.m[1] == state.m[1]
    assert new.q[1] == state.q[1]
    assert np.all(new.q >= state.q)
    assert new.q[0] > state.q[0]


def test_update_does_not_mutate_input():
    state = BeliefState([0.1, 0.2], [1.0, 1.0])
    m_before, q_before = state.m.copy(), state.q.copy()
    update(state, np.array([1.0, 1.0]), -1)
    np.testing.assert_array_equal(state.m, m_before)
    np.testing.assert_array_equal(state.q, q_before)


def test_update_sign_symmetry_from_zero_mean():
    state = init_prior(4, 2.0)
    phi = np.array([1.0, 0.0, 1.0, 1.0])
    plus, minus = update(state, phi, 1), update(state, phi, -1)
    np.testing.assert_allclose(plus.m, -minus.m, atol=1e-15)
    np.testing.assert_allclose(plus.q, minus.q, rtol=1e-14)


def test_update_rejects_bad_input():
    state = init_prior(2)
    with pytest.raises(DomainError):
        update(state, np.ones(3), 1)
    with pytest.raises(DomainError):
        update(state, np.ones(2), 0)


def test_predict_examples():
    assert predict(init_prior(3), np.array([1.0, 0.0, 1.0])).p_success == 0.5

    certain = BeliefState([1.0], [1e300])
    assert predict(certain, np.array([1.0])).p_success == pytest.approx(0.7311, abs=1e-4)

    result = predict(BeliefState([1.0], [1.0]), np.array([1.0]))
    assert result.mu_b == 1.0
    assert result.sigma2_b == 1.0
    assert kappa(1.0) == pytest.approx(0.8474, abs=1e-4)
    assert result.p_success == pytest.approx(0.700, abs=1e-3)


def test_predict_close_to_monte_carlo_integral():
    rng = np.random.default_rng(5)
    for _ in range(50):
        mu, sigma2 = rng.normal(0.0, 2.0), rng.uniform(0.0, 4.0)
        state = BeliefState([mu], [1.0 / sigma2 if sigma2 > 0 else 1e300])
        draws = rng.normal(mu, np.sqrt(sigma2), size=1_000_000)
        assert abs(predict(state, np.array([1.0])).p_success - expit(draws).mean()) < 0.02


def test_moderation_shrinks_confidence():
    rng = np.random.default_rng(9)
    for _ in range(200):
        d = 5
        state = BeliefState(rng.normal(0.0, 2.0, d), rng.uniform(0.1, 10.0, d))
        phi = rng.normal(0.0, 1.0, d)
        moderated = predict(state, phi).p_success
        assert abs(moderated - 0.5) <= abs(expit(np.dot(state.m, phi)) - 0.5) + 1e-15


def test_predict_many_matches_predict():
    rng = np.random.default_rng(1)
    state = BeliefState(rng.normal(size=4), rng.uniform(0.5, 3.0, 4))
    matrix = rng.normal(size=(6, 4))
    mu, s2, p = predict_many(state, matrix)
    for i, row in enumerate(matrix):
        single = predict(state, row)
        assert mu[i] == pytest.approx(single.mu_b)
        assert s2[i] == pytest.approx(single.sigma2_b)
        assert p[i] == pytest.approx(single.p_success)


def test_sample_weights_statistics():
    rng = np.random.default_rng(2)
    state = BeliefState([1.0, -2.0, 0.0], [1.0, 4.0, 0.25])
    draws = np.array([sample_weights(state, rng) for _ in range(20_000)])
    se = np.sqrt(1.0 / state.q / len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - state.m) < 4 * se)
    np.testing.assert_allclose(draws.var(axis=0, ddof=1), 1.0 / state.q, rtol=0.05)


def test_sample_weights_near_certain_posterior():
    state = BeliefState([0.5, -1.5], [1e12, 1e12])
    np.testing.assert_allclose(sample_weights(state, np.random.default_rng(0)), state.m, atol=1e-4)


def test_reshape():
    state = BeliefState([0.0, 1.0], [1.0, 2.0])
    assert reshape(state, 1.0) is state
    reshaped = reshape(state, 0.5)
    assert reshaped.q.tolist() == [4.0, 8.0]
    np.testing.assert_array_equal(reshaped.m, state.m)
    assert predict(reshape(init_prior(2), 0.1), np.ones(2)).p_success == 0.5
    with pytest.raises(DomainError):
        reshape(state, 0.0)


def test_fit_history_is_sequential_update():
    space = ActionSpace(2)
    observations = [
        Observation(PatientContext("a", [1.0]), (1, None), 1),
        Observation(PatientContext("b", [0.0]), (2, None), -1),
        Observation(PatientContext("c", [1.0]), (2, None), 1),
    ]
    expected = init_prior(4)
    for o in observations:
        expected = update(expected, assemble(o.context, o.action[0], o.action[1], space), o.outcome)

    fitted = fit_history(init_prior(4), observations, space)
    np.testing.assert_array_equal(fitted.m, expected.m)
    np.testing.assert_array_equal(fitted.q, expected.q)


def test_belief_json_is_lossless(tmp_path):
    state = BeliefState([0.1, -1 / 3, 2e-17], [1.0, np.pi, 7.25])
    path = save_belief(state, tmp_path / "belief.json")
    loaded = load_belief(path)
    np.testing.assert_array_equal(loaded.m, state.m)
    np.testing.assert_array_equal(loaded.q, state.q)


def test_load_belief_rejects_inconsistent_dimension(tmp_path):
    path = tmp_path / "belief.json"
    path.write_text('{"d": 3, "m": [0.0, 0.0], "q": [1.0, 1.0]}', encoding="utf-8")
    with pytest.raises(DomainError):
        load_belief(path)
