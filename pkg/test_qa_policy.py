import numpy as np
import pytest

from channel import ChannelModel
from core_model import VideoConfig, buffer_grid, index_buffer, is_monotone, playback_table
from errors import InvalidArgumentError
from qa_policy import (CbpRule, PolicyMatrix, QaSpec, build_passive_matrix, build_policy_matrices,
                       build_policy_matrix, default_cbp_rules, qa_decide, slot_budget)

VIDEO_3 = VideoConfig(layer_rates=(1.0, 1.0, 1.0), buffer_limit=10)
VIDEO_2 = VideoConfig(layer_rates=(1.0, 1.0), buffer_limit=10)
SMALL_2 = VideoConfig(layer_rates=(1.0, 1.0), buffer_limit=3)

DECIDE_CASES = [
    {'name': 'dbp_fills_top_layer',
     'input': {'qa': QaSpec.dbp(2), 'buffer': (6, 4, 1), 'budget': 1, 'video': VIDEO_3},
     'expected': (0, 0, 1)},
    {'name': 'dbp_short_lead_refills_lower_layer',
     'input': {'qa': QaSpec.dbp(2), 'buffer': (6, 5, 1), 'budget': 1, 'video': VIDEO_3},
     'expected': (1, 0, 0)},
    {'name': 'dbp_cascades_down_when_order_would_break',
     'input': {'qa': QaSpec.dbp(0), 'buffer': (1, 1), 'budget': 1, 'video': SMALL_2},
     'expected': (1, 0)},
    {'name': 'bpp_base_below_switch',
     'input': {'qa': QaSpec.bpp(0.5), 'buffer': (2, 0), 'budget': 2, 'video': VIDEO_2},
     'expected': (2, 0)},
    {'name': 'bpp_full_quality_above_switch',
     'input': {'qa': QaSpec.bpp(0.5), 'buffer': (7, 3), 'budget': 1, 'video': VIDEO_2},
     'expected': (0, 1)},
    {'name': 'full_buffer_downloads_nothing',
     'input': {'qa': QaSpec.dbp(2), 'buffer': (3, 3), 'budget': 4, 'video': SMALL_2},
     'expected': (0, 0)},
    {'name': 'zero_budget',
     'input': {'qa': QaSpec.dbp(2), 'buffer': (0, 0), 'budget': 0, 'video': SMALL_2},
     'expected': (0, 0)},
]

CBP_CASES = [
    {'name': 'bad_state_base_only', 'input': {'state': 0, 'buffer': (0, 0), 'budget': 3},
     'expected': (3, 0)},
    {'name': 'good_state_full_quality', 'input': {'state': 1, 'buffer': (0, 0), 'budget': 3},
     'expected': (2, 1)},
]


@pytest.mark.parametrize('case', DECIDE_CASES, ids=lambda case: case['name'])
def test_qa_decide(case):
    params = case['input']
    downloads = qa_decide(params['qa'], params['buffer'], 0, params['budget'], params['video'], 1)
    assert tuple(downloads.tolist()) == case['expected']


@pytest.mark.parametrize('case', CBP_CASES, ids=lambda case: case['name'])
def test_cbp_default_rules(case):
    params = case['input']
    downloads = qa_decide(QaSpec.cbp(), params['buffer'], params['state'], params['budget'], VIDEO_2, 2)
    assert tuple(downloads.tolist()) == case['expected']


def test_cbp_split_rule_spends_base_share_first():
    rules = (CbpRule(mode='split', base_share=2 / 3),)
    downloads = qa_decide(QaSpec.cbp(rules), (0, 0), 0, 3, VIDEO_2)
    assert tuple(downloads.tolist()) == (2, 1)


def test_default_cbp_rules_layout():
    modes = [rule.mode for rule in default_cbp_rules(4)]
    assert modes == ['base_only', 'base_only', 'split', 'full_quality']
    assert default_cbp_rules(1)[0].mode == 'full_quality'


def test_cbp_rule_table_must_cover_channel():
    qa = QaSpec.cbp((CbpRule(mode='base_only'),))
    with pytest.raises(InvalidArgumentError):
        qa.rules_for(2)


def test_dbp_needs_one_threshold_per_pair():
    qa = QaSpec(kind='DBP', thresholds=(1.0, 2.0))
    with pytest.raises(InvalidArgumentError):
        qa.pair_thresholds(VIDEO_2)


def test_dbp_policy_row_after_playback():
    channel = ChannelModel(states=(1.0,), transition_matrix=((1.0,),))
    matrix = build_policy_matrix(QaSpec.dbp(2), VIDEO_3, channel, 0)
    row = index_buffer((6, 4, 1), VIDEO_3)
    assert matrix.targets[row] == index_buffer((5, 3, 1), VIDEO_3)
    assert tuple(matrix.downloads[row].tolist()) == (0, 0, 1)


def test_slot_budget():
    assert slot_budget(4.5, VIDEO_2) == 4
    unequal = VideoConfig(layer_rates=(1.0, 2.0))
    assert slot_budget(3.0, unequal) == pytest.approx(3.0)


def test_unequal_layers_pay_their_size():
    unequal = VideoConfig(layer_rates=(1.0, 2.0), buffer_limit=5)
    downloads = qa_decide(QaSpec.dbp(0), (3, 0), 0, 2.5, unequal, 1)
    assert tuple(downloads.tolist()) == (0, 1)


@pytest.mark.parametrize('qa', [QaSpec.dbp(1), QaSpec.bpp(0.5), QaSpec.cbp()], ids=lambda qa: qa.label)
def test_policy_rows_stay_valid(qa, desk_channel):
    matrices = build_policy_matrices(qa, SMALL_2, desk_channel)
    grid = buffer_grid(SMALL_2)
    table = playback_table(SMALL_2)
    for matrix in matrices:
        assert len(matrix) == SMALL_2.num_buffer_states
        for row, target in enumerate(matrix.targets):
            after = grid[target]
            assert after.max() <= SMALL_2.buffer_limit
            if is_monotone(grid[table.next_index[row]]):
                assert is_monotone(after)


def test_passive_matrix_is_playback(desk_video):
    passive = build_passive_matrix(desk_video)
    np.testing.assert_array_equal(passive.targets, playback_table(desk_video).next_index)
    assert passive.to_sparse().sum() == desk_video.num_buffer_states


def test_policy_matrix_rejects_bad_targets():
    with pytest.raises(InvalidArgumentError):
        PolicyMatrix(targets=np.array([0, 2]), downloads=np.zeros((2, 1), dtype=int))


def test_channel_state_out_of_range(desk_video, desk_channel):
    with pytest.raises(InvalidArgumentError):
        build_policy_matrix(QaSpec.dbp(1), desk_video, desk_channel, 2)
