import numpy as np
import pytest
from scipy import sparse

from conftest import DESK_DISCOUNT
from errors import InvalidArgumentError, SolverError
from lp_solver import solve
from rb_lp import build_rb_model, unpack_rb_solution
from schedulers import (BeasScheduler, BeasState, PriorityRanking, QaaScheduler, SchedulerSpec,
                        SlotView, baseline_schedule, beas_step, beas_update, pf_update,
                        playback_drain, prune_unreachable, qaa_rank, qaa_schedule, rank_states, reachable_states)

THREE_STATE_RANKING = PriorityRanking(order=((0, 2), (0, 0), (0, 1)), num_states=(3,),
                                      num_buffer_states=(3,), num_active=2)

SCHEDULE_CASES = [
    {'name': 'ranked_states', 'input': {'states': [0, 1, 2], 'subchannels': 2}, 'expected': [2, 0]},
    {'name': 'everyone', 'input': {'states': [0, 1, 2], 'subchannels': 3}, 'expected': [2, 0, 1]},
    {'name': 'more_subchannels_than_users', 'input': {'states': [0, 1, 2], 'subchannels': 5},
     'expected': [2, 0, 1]},
    {'name': 'same_state_lower_user_first', 'input': {'states': [1, 1, 1], 'subchannels': 2},
     'expected': [0, 1]},
    {'name': 'nobody', 'input': {'states': [0, 1, 2], 'subchannels': 0}, 'expected': []},
]

BEAS_CASES = [
    {'name': 'no_user_below_threshold_takes_fewest_base_layers',
     'input': {'levels': [0.0, 0.0, 0.0, 0.0], 'rates': [1, 5, 10, 5], 'bases': [3, 0, 1, 5], 'subchannels': 2},
     'expected': [1, 2]},
    {'name': 'enough_users_below_threshold_take_best_channels',
     'input': {'levels': [-1.0, -1.0, 0.0, -1.0], 'rates': [1, 5, 10, 5], 'bases': [0, 0, 0, 0], 'subchannels': 2},
     'expected': [1, 3]},
    {'name': 'few_users_below_threshold_are_topped_up',
     'input': {'levels': [-1.0, 0.0, 0.0], 'rates': [1, 1, 1], 'bases': [0, 4, 2], 'subchannels': 2},
     'expected': [0, 2]},
]

BASELINE_CASES = [
    {'name': 'bcf', 'input': {'kind': 'BCF', 'rates': [10, 5, 2, 1], 'subchannels': 2}, 'expected': [0, 1]},
    {'name': 'lbf', 'input': {'kind': 'LBF', 'rates': [1, 1, 1], 'bases': [0, 3, 1], 'subchannels': 1},
     'expected': [0]},
    {'name': 'pf_equal_channels_lowest_average',
     'input': {'kind': 'PF', 'rates': [2, 2, 2], 'averages': [3, 1, 2], 'subchannels': 1}, 'expected': [1]},
    {'name': 'pf_ratio', 'input': {'kind': 'PF', 'rates': [10, 2], 'averages': [10, 1], 'subchannels': 1},
     'expected': [1]},
]


def test_three_state_ranking():
    order = rank_states(x0=np.array([0.2, 0.1, 0.0]), x1=np.array([1.0, 0.0, 0.5]),
                        gamma0=np.array([0.0, 0.0, 20.0]), gamma1=np.array([0.0, 10.0, 0.0]))
    assert order.tolist() == [2, 0, 1]


def test_ties_prefer_lower_buffer_then_higher_channel():
    x1 = np.ones(4)
    gamma = np.zeros(4)
    # states (channel, buffer) with two buffer states: 0=(0,0) 1=(0,1) 2=(1,0) 3=(1,1)
    order = rank_states(np.zeros(4), x1, gamma, gamma, num_buffer_states=2)
    assert order.tolist() == [2, 0, 3, 1]


@pytest.mark.parametrize('case', SCHEDULE_CASES, ids=lambda case: case['name'])
def test_qaa_schedule(case):
    states = np.array(case['input']['states'])
    chosen = qaa_schedule(THREE_STATE_RANKING, np.zeros(len(states), dtype=int), states, case['input']['subchannels'])
    assert chosen.tolist() == case['expected']


def test_pruned_states_come_last():
    ranking = PriorityRanking(order=((0, 5),), num_states=(8,), num_buffer_states=(4,), num_active=1)
    chosen = qaa_schedule(ranking, np.zeros(4, dtype=int), np.array([0, 5, 6, 1]), 3)
    assert chosen.tolist() == [1, 0, 3]


def test_priority_index():
    np.testing.assert_allclose(THREE_STATE_RANKING.priority_index(), [2 / 3, 1.0, 1 / 3])
    ranking = PriorityRanking(order=((0, 1),), num_states=(3,), num_buffer_states=(3,), num_active=0)
    np.testing.assert_allclose(ranking.priority_index(), [1.0, 1.0, 1.0])
    assert ranking.retained().tolist() == [False, True, False]


def test_ranking_serialization():
    restored = PriorityRanking.from_dict(THREE_STATE_RANKING.to_dict())
    assert restored == THREE_STATE_RANKING
    np.testing.assert_array_equal(restored.positions[0], THREE_STATE_RANKING.positions[0])


def test_solved_ranking_puts_active_states_first(desk_solution):
    _, solution = desk_solution
    ranking = qaa_rank(solution.groups)
    group = solution.groups[0]
    active = set(np.flatnonzero(group.x1 > 1e-12).tolist())
    head = [state for _, state in ranking.order[:ranking.num_active]]
    assert set(head) == active
    assert len(ranking) == int(((group.x0 > 1e-12) | (group.x1 > 1e-12)).sum())
    gammas = [group.gamma0[s] for s in head]
    assert all(a >= b - 1e-9 for a, b in zip(gammas, gammas[1:]))


def test_ranking_ignores_reward_scale(desk_group):
    model = build_rb_model([desk_group], 2, DESK_DISCOUNT)
    baseline = qaa_rank(unpack_rb_solution(model, solve(model.problem)).groups)
    model.problem.objective = 3.0 * model.problem.objective
    scaled = qaa_rank(unpack_rb_solution(model, solve(model.problem)).groups)
    assert scaled.order == baseline.order


def test_support_is_the_reachable_set(desk_solution):
    model, solution = desk_solution
    group = solution.groups[0]
    retained = prune_unreachable(group.x0, group.x1, model.h0[0], model.h1[0], model.alphas[0], verify=True)
    assert np.all(retained[model.alphas[0] > 0])


def test_reachability_follows_used_actions():
    identity = sparse.identity(3, format='csr')
    shift = sparse.csr_matrix(np.array([[0, 1, 0], [0, 0, 1], [0, 0, 1]], dtype=float))
    alpha = np.array([1.0, 0.0, 0.0])
    assert reachable_states(alpha, [identity, shift], [np.ones(3), np.zeros(3)]).tolist() == [True, False, False]
    assert reachable_states(alpha, [identity, shift], [np.zeros(3), np.ones(3)]).tolist() == [True, True, True]


def test_support_mismatch_raises():
    identity = sparse.identity(2, format='csr')
    with pytest.raises(SolverError):
        prune_unreachable(np.array([1.0, 1.0]), np.zeros(2), identity, identity, np.array([1.0, 0.0]), verify=True)
    with pytest.raises(InvalidArgumentError):
        prune_unreachable(np.ones(2), np.zeros(2), verify=True)


@pytest.mark.parametrize('case', BEAS_CASES, ids=lambda case: case['name'])
def test_beas_selection(case):
    params = case['input']
    state = BeasState(np.array(params['levels']), SchedulerSpec(kind='BEAS'))
    chosen, _ = beas_step(state, np.array(params['rates'], dtype=float), np.array(params['bases']),
                          params['subchannels'], np.zeros(len(params['levels'])))
    assert sorted(chosen.tolist()) == case['expected']


def test_beas_level_update():
    spec = SchedulerSpec(kind='BEAS', epsilon=0.1)
    state = BeasState(np.array([10.0, -1.0]), spec)
    chosen, updated = beas_step(state, np.array([1.0, 1.0]), np.array([0, 0]), 1, np.array([3.0, 2.0]))
    assert chosen.tolist() == [1]
    np.testing.assert_allclose(updated.levels, [8.9, -0.7])


@pytest.mark.parametrize('intercept, expected', [(0.0, [False, True]), (-playback_drain(2, 1.0, 1.0), [True, True])])
def test_beas_served_user_below_drain_stays_starving(intercept, expected):
    spec = SchedulerSpec(kind='BEAS', epsilon=0.1, h_intercept=intercept)
    state = BeasState(np.zeros(2), spec)
    updated = beas_update(state, np.array([0]), np.array([1.0, 0.0]), 1.0, 1.0)
    assert (updated.levels < spec.b_thresh).tolist() == expected


def test_beas_without_smoothing_keeps_levels():
    spec = SchedulerSpec(kind='BEAS', epsilon=0.0)
    state = BeasState(np.array([1.0, -2.0]), spec)
    _, updated = beas_step(state, np.array([1.0, 1.0]), np.array([0, 0]), 1, np.array([3.0, 2.0]))
    np.testing.assert_allclose(updated.levels, [1.0, -2.0])


@pytest.mark.parametrize('case', BASELINE_CASES, ids=lambda case: case['name'])
def test_baselines(case):
    params = case['input']
    chosen = baseline_schedule(params['kind'], np.array(params['rates'], dtype=float), params['subchannels'],
                               averages=params.get('averages'), base_counts=params.get('bases'))
    assert chosen.tolist() == case['expected']


def test_baselines_need_their_inputs():
    with pytest.raises(InvalidArgumentError):
        baseline_schedule('PF', np.ones(2), 1)
    with pytest.raises(InvalidArgumentError):
        baseline_schedule('LBF', np.ones(2), 1)
    with pytest.raises(InvalidArgumentError):
        baseline_schedule('RR', np.ones(2), 1)


def test_pf_average_update():
    updated = pf_update(np.array([1.0, 1.0]), np.array([2.0, 4.0]), np.array([1]), time_constant=50)
    np.testing.assert_allclose(updated, [0.98, 1.06])


def test_wrappers_schedule_exactly_min_m_n():
    view = SlotView(channel_rates=np.array([1.0, 2.0, 3.0]), base_counts=np.array([0, 1, 2]),
                    user_groups=np.zeros(3, dtype=int), user_states=np.array([0, 1, 2]),
                    deliveries=np.array([1, 2, 3]))
    beas = BeasScheduler(SchedulerSpec(kind='BEAS'), 3, 1.0, 1.0)
    for subchannels in (0, 2, 5):
        assert len(beas.select(view, subchannels)) == min(subchannels, 3)
        assert len(QaaScheduler(THREE_STATE_RANKING).select(view, subchannels)) == min(subchannels, 3)


def test_swap_ranking_checks_state_spaces():
    scheduler = QaaScheduler(THREE_STATE_RANKING)
    other = PriorityRanking(order=((0, 0),), num_states=(4,), num_buffer_states=(4,), num_active=1)
    with pytest.raises(InvalidArgumentError):
        scheduler.swap_ranking(other)
    replacement = PriorityRanking(order=((0, 0),), num_states=(3,), num_buffer_states=(3,), num_active=1)
    scheduler.swap_ranking(replacement)
    assert scheduler.ranking is replacement
