import math

import numpy as np
import pytest

from analysis import (SweepPoint, buffer_limit_sweep, comparison_table, find_critical_load,
                      heatmap_frame, lambda_avg, layer_time_shares, load_sweep, mu_avg,
                      priority_correlations)
from conftest import DESK_DISCOUNT
from core_model import VideoConfig
from errors import CriticalLoadError, InvalidArgumentError
from schedulers import PriorityRanking, qaa_rank
from simulator import BatchResult

LAMBDA_CASES = [
    {'name': 'uniform_channel_double_load', 'input': (4.5, 2.0), 'expected': 2.25},
    {'name': 'unit_load', 'input': (4.5, 1.0), 'expected': 4.5},
    {'name': 'equal', 'input': (3.0, 3.0), 'expected': 1.0},
]

# desk video: 16 buffer states, index 4 = (1, 0), index 5 = (1, 1)
DRAIN_CASES = [
    {'name': 'both_layers', 'input': {5: 1.0}, 'expected': 2.0},
    {'name': 'stalled', 'input': {0: 1.0}, 'expected': 0.0},
    {'name': 'half_and_half', 'input': {4: 0.5, 5: 0.5}, 'expected': 1.5},
    {'name': 'second_channel_state', 'input': {16 + 5: 2.0}, 'expected': 2.0},
]


def _point(rho, lam, mu):
    return SweepPoint(subchannels=1, rho=rho, lambda_avg=lam, mu_avg=mu, objective_per_user=0.0)


@pytest.mark.parametrize('case', LAMBDA_CASES, ids=lambda case: case['name'])
def test_lambda_avg(case):
    assert lambda_avg(*case['input']) == pytest.approx(case['expected'])


def test_lambda_avg_from_channel(wide_channel):
    assert lambda_avg(wide_channel, 2.0) == pytest.approx(2.25)
    with pytest.raises(InvalidArgumentError):
        lambda_avg(wide_channel, 0.0)


@pytest.mark.parametrize('case', DRAIN_CASES, ids=lambda case: case['name'])
def test_mu_avg(case, desk_video):
    x0 = np.zeros(32)
    for state, mass in case['input'].items():
        x0[state] = mass
    assert mu_avg(x0, np.zeros(32), desk_video) == pytest.approx(case['expected'])


def test_layer_shares_sum_to_one(desk_solution, desk_video):
    _, solution = desk_solution
    group = solution.groups[0]
    shares = layer_time_shares(group.x0, group.x1, desk_video)
    assert shares.shape == (3,)
    assert shares.sum() == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(InvalidArgumentError):
        layer_time_shares(np.zeros(32), np.zeros(32), desk_video)


CRITICAL_CASES = [
    {'name': 'interpolated', 'input': [(1.0, 4.0, 2.0), (2.0, 2.0, 3.0)], 'expected': 1.0 + 2.0 / 3.0},
    {'name': 'exact_zero', 'input': [(1.0, 4.0, 2.0), (1.5, 2.5, 2.5), (2.0, 2.0, 3.0)], 'expected': 1.5},
    {'name': 'unsorted_input', 'input': [(3.0, 1.0, 3.0), (1.0, 3.0, 1.0)], 'expected': 2.0},
]


@pytest.mark.parametrize('case', CRITICAL_CASES, ids=lambda case: case['name'])
def test_find_critical_load(case):
    found = find_critical_load([_point(*values) for values in case['input']])
    assert found.rho == pytest.approx(case['expected'])
    assert found.bracket[0] <= found.rho <= found.bracket[1]


def test_no_sign_change_raises_with_sweep():
    points = [_point(1.0, 4.0, 2.0), _point(2.0, 3.0, 2.0)]
    with pytest.raises(CriticalLoadError) as info:
        find_critical_load(points)
    assert len(info.value.details['sweep']) == 2


def test_load_sweep_orders_by_load(desk_group):
    sweep = load_sweep(desk_group, [3, 1, 2], DESK_DISCOUNT)
    rhos = [point.rho for point in sweep.points]
    assert rhos == sorted(rhos)
    lambdas = [point.lambda_avg for point in sweep.points]
    assert all(a > b for a, b in zip(lambdas, lambdas[1:]))
    assert list(sweep.to_frame().columns) == ['subchannels', 'rho', 'lambda_avg', 'mu_avg', 'objective_per_user']


def test_load_sweep_rejects_zero_subchannels(desk_group):
    with pytest.raises(InvalidArgumentError):
        load_sweep(desk_group, [0, 2], DESK_DISCOUNT)


def test_buffer_limit_sweep(desk_group):
    frame = buffer_limit_sweep(desk_group, [2, 3], 2, DESK_DISCOUNT)
    assert frame['buffer_limit'].tolist() == [2, 3]
    assert frame['objective_per_user'].notna().all()


def test_heatmap_frame(desk_solution, desk_video):
    _, solution = desk_solution
    ranking = qaa_rank(solution.groups)
    frame = heatmap_frame(ranking, desk_video)
    assert list(frame.columns) == ['channel_state', 'b1', 'b2', 'priority_index', 'pruned']
    assert len(frame) == 32
    assert (frame.loc[frame['pruned'], 'priority_index'] == 1.0).all()
    assert frame['priority_index'].min() == pytest.approx(1.0 / len(ranking))


def test_heatmap_frame_flat_for_other_layer_counts():
    ranking = PriorityRanking(order=((0, 1),), num_states=(3,), num_buffer_states=(3,), num_active=1)
    frame = heatmap_frame(ranking, VideoConfig(layer_rates=(1.0,), buffer_limit=2))
    assert list(frame.columns) == ['state', 'priority_index', 'pruned']


def test_priority_correlations(desk_solution, desk_video):
    _, solution = desk_solution
    result = priority_correlations(qaa_rank(solution.groups), desk_video)
    assert set(result) == {'channel', 'buffer', 'num_states'}
    for key in ('channel', 'buffer'):
        assert result[key] is None or -1.0 <= result[key] <= 1.0


def test_correlation_is_none_when_constant(desk_video):
    ranking = PriorityRanking(order=((0, 1), (0, 2)), num_states=(32,), num_buffer_states=(16,), num_active=2)
    result = priority_correlations(ranking, desk_video)
    assert result['channel'] is None
    assert result['num_states'] == 2


def test_comparison_table():
    batch = BatchResult(seeds=[0, 1], per_seed=[], mean={'reward': 2.0}, stderr={'reward': 0.1})
    frame = comparison_table({('BCF', 4): batch, ('BCF', 0): batch}, 20)
    assert frame['subchannels'].tolist() == [0, 4]
    assert math.isinf(frame['load'].iloc[0])
    assert frame['load'].iloc[1] == 5.0
    assert frame['reward_mean'].tolist() == [2.0, 2.0]
