"""动作选择策略"""

import numpy as np
import pytest

from src.bayes_glm import BeliefState, init_prior
from src.errors import DomainError
from src.model_core import ActionSpace, PatientContext, feature_dimension
from src.policies import (
    PolicyConfig, choose_exploit, choose_explore, choose_kg, choose_thompson, kg_value,
    score_actions, select_action
)

EMPTY_CONTEXT = PatientContext("x", [])


def _uncertain_second_action():
    # φ = (偏置, 医生 1, 医生 2)，医生 2 的精度最低
    return BeliefState([0.0, 0.0, 0.0], [1.0, 10.0, 0.1]), ActionSpace(2)


def _random_case(rng):
    space = ActionSpace(int(rng.integers(2, 5)))
    d_x = int(rng.integers(0, 4))
    d = feature_dimension(d_x, space)
    state = BeliefState(rng.normal(0.0, 1.0, d), rng.uniform(0.1, 10.0, d))
    context = PatientContext("x", (rng.random(d_x) < 0.5).astype(float))
    return state, context, space


def test_kg_prefers_uncertain_action():
    state, space = _uncertain_second_action()
    kg1 = kg_value(state, EMPTY_CONTEXT, (1, None), space, eta=1.0)
    kg2 = kg_value(state, EMPTY_CONTEXT, (2, None), space, eta=1.0)
    assert kg2 > kg1 > 0


def test_choose_kg_with_large_tau_picks_uncertain_action():
    state, space = _uncertain_second_action()
    rng = np.random.default_rng(0)
    assert choose_kg(state, EMPTY_CONTEXT, space, 10.0, 1.0, rng) == (2, None)


def test_score_table_totals():
    state, space = _uncertain_second_action()
    for scored in score_actions(state, EMPTY_CONTEXT, space, tau=3.0, eta=0.5):
        assert scored.total == pytest.approx(scored.exploit_score + 3.0 * scored.kg_value)
        assert scored.kg_value == pytest.approx(kg_value(state, EMPTY_CONTEXT, scored.action, space, 0.5))


def test_kg_value_nearly_nonnegative():
    rng = np.random.default_rng(21)
    for _ in range(1000):
        state, context, space = _random_case(rng)
        action = space.actions[int(rng.integers(space.size))]
        assert kg_value(state, context, action, space, eta=float(rng.uniform(0.2, 2.0))) >= -1e-3


def test_kg_vanishes_for_tiny_eta():
    rng = np.random.default_rng(4)
    for _ in range(20):
        state, context, space = _random_case(rng)
        values = [kg_value(state, context, a, space, eta=1e-6) for a in space.actions]
        assert max(abs(v) for v in values) < 1e-6


def test_kg_vanishes_for_near_certain_belief():
    space = ActionSpace(3)
    state = BeliefState([0.2, -0.1, 0.4, 0.0], np.full(4, 1e12))
    for action in space.actions:
        assert abs(kg_value(state, EMPTY_CONTEXT, action, space)) < 1e-6


def test_kg_value_invariant_to_relabeling_physicians():
    state = BeliefState([0.1, 0.5, -0.3, 0.2], [1.0, 2.0, 0.5, 3.0])
    space = ActionSpace(3)
    # 交换医生 1 和医生 2 的参数坐标
    swapped = BeliefState(state.m[[0, 2, 1, 3]], state.q[[0, 2, 1, 3]])
    assert kg_value(state, EMPTY_CONTEXT, (1, None), space) == pytest.approx(
        kg_value(swapped, EMPTY_CONTEXT, (2, None), space), abs=1e-12
    )


def test_tau_zero_matches_exploitation():
    rng = np.random.default_rng(8)
    for seed in range(1000):
        state, context, space = _random_case(rng)
        kg_choice = choose_kg(state, context, space, 0.0, 0.5, np.random.default_rng(seed))
        exploit_choice = choose_exploit(state, context, space, np.random.default_rng(seed))
        assert kg_choice == exploit_choice


def test_single_action_is_always_chosen():
    space = ActionSpace(1)
    state = init_prior(2)
    rng = np.random.default_rng(0)
    assert choose_kg(state, EMPTY_CONTEXT, space, 5.0, 1.0, rng) == (1, None)
    assert choose_thompson(state, EMPTY_CONTEXT, space, rng) == (1, None)
    assert choose_exploit(state, EMPTY_CONTEXT, space, rng) == (1, None)
    assert choose_explore(space, rng) == (1, None)


@pytest.mark.parametrize("choose", [
    lambda state, space, rng: choose_exploit(state, EMPTY_CONTEXT, space, rng),
    lambda state, space, rng: choose_kg(state, EMPTY_CONTEXT, space, 2.0, 1.0, rng),
    lambda state, space, rng: choose_thompson(state, EMPTY_CONTEXT, space, rng),
    lambda state, space, rng: choose_explore(space, rng),
])
def test_symmetric_actions_split_evenly(choose):
    space = ActionSpace(2)
    state = init_prior(3)
    rng = np.random.default_rng(42)
    picks = [choose(state, space, rng) for _ in range(1000)]
    assert abs(picks.count((1, None)) / 1000 - 0.5) < 0.05


def test_thompson_agrees_with_exploit_when_certain():
    rng = np.random.default_rng(6)
    space = ActionSpace(5)
    context = PatientContext("x", [1.0, 0.0])
    d = feature_dimension(2, space)
    state = BeliefState(rng.normal(0.0, 1.0, d), np.full(d, 1e12))
    best = choose_exploit(state, context, space, rng)
    agree = sum(choose_thompson(state, context, space, rng) == best for _ in range(1000))
    assert agree >= 990


def test_exploit_picks_largest_mean():
    space = ActionSpace(3)
    state = BeliefState([0.0, -1.0, 0.5, 2.0], [1.0, 1.0, 1.0, 1.0])
    assert choose_exploit(state, EMPTY_CONTEXT, space, np.random.default_rng(0)) == (3, None)


def test_policies_do_not_mutate_state():
    state, space = _uncertain_second_action()
    m_before, q_before = state.m.copy(), state.q.copy()
    rng = np.random.default_rng(0)
    choose_kg(state, EMPTY_CONTEXT, space, 5.0, 0.5, rng)
    choose_thompson(state, EMPTY_CONTEXT, space, rng)
    np.testing.assert_array_equal(state.m, m_before)
    np.testing.assert_array_equal(state.q, q_before)


def test_policy_config_validation():
    with pytest.raises(DomainError):
        PolicyConfig("ucb")
    with pytest.raises(DomainError):
        PolicyConfig("kg", eta=0.0)
    with pytest.raises(DomainError):
        PolicyConfig("kg", tau=-1.0)


def test_horizon_tau_counts_remaining_patients():
    policy = PolicyConfig("kg", "horizon", 0.5)
    assert policy.resolve_tau(0, 212) == 211
    assert policy.resolve_tau(211, 212) == 0
    assert PolicyConfig("kg", 3.0).resolve_tau(100, None) == 3.0
    with pytest.raises(DomainError):
        policy.resolve_tau(0, None)


def test_select_action_dispatch():
    state, space = _uncertain_second_action()
    rng = np.random.default_rng(0)
    assert select_action(PolicyConfig("kg", 10.0), state, EMPTY_CONTEXT, space, rng) == (2, None)

    oracle = lambda context, space, rng: (1, None)  # noqa: E731
    assert select_action(PolicyConfig("oracle"), state, EMPTY_CONTEXT, space, rng, oracle=oracle) == (1, None)
    with pytest.raises(DomainError):
        select_action(PolicyConfig("oracle"), state, EMPTY_CONTEXT, space, rng)


def test_empty_action_space_rejected():
    with pytest.raises(DomainError):
        ActionSpace(0)
