import numpy as np
import pytest

from core_model import VideoConfig
from errors import InvalidArgumentError
from qa_policy import QaSpec
from rb_lp import UserGroup
from schedulers import SchedulerSpec
from simulator import SimConfig, run, run_batch

HORIZON = 30


@pytest.fixture
def saturated_group(fast_channel):
    """Full-quality QA on a link that carries ten sub-segments per slot."""
    return UserGroup(name="fast", count=3, qa=QaSpec.cbp(), channel=fast_channel,
                     video=VideoConfig(layer_rates=(1.0, 1.0)))


def _config(groups, subchannels, kind='BCF', **extra):
    return SimConfig(groups=tuple(groups), subchannels=subchannels, scheduler=SchedulerSpec(kind=kind),
                     horizon=HORIZON, **extra)


def test_no_subchannels_means_constant_stall(desk_video, desk_channel):
    video = desk_video.model_copy(update={'rebuffer_penalty': 0.05})
    group = UserGroup(count=3, qa=QaSpec.dbp(3), channel=desk_channel, video=video)
    metrics = run(_config([group], 0)).metrics
    expected = 0.05 * sum(0.99 ** k for k in range(HORIZON))
    np.testing.assert_allclose(metrics.reward, expected)
    np.testing.assert_allclose(metrics.rebuffer_fraction, 1.0)
    np.testing.assert_array_equal(metrics.startup_slots, HORIZON)
    np.testing.assert_allclose(metrics.base_only_fraction, 0.0)
    np.testing.assert_allclose(metrics.layer_fractions, 0.0)


def test_everyone_served_on_a_saturated_link(saturated_group):
    metrics = run(_config([saturated_group], 3, warmup_slots=1)).metrics
    expected = sum(0.99 ** k for k in range(HORIZON - 1))
    np.testing.assert_allclose(metrics.reward, expected, rtol=1e-12)
    np.testing.assert_allclose(metrics.rebuffer_fraction, 0.0)
    np.testing.assert_array_equal(metrics.startup_slots, 0)
    np.testing.assert_allclose(metrics.base_only_fraction, 0.0)


@pytest.mark.parametrize('kind', ['QAA', 'BEAS', 'PF', 'BCF', 'LBF'])
def test_same_seed_same_result(kind, desk_group):
    first = run(_config([desk_group], 2, kind, seed=5)).metrics
    second = run(_config([desk_group], 2, kind, seed=5)).metrics
    np.testing.assert_array_equal(first.reward, second.reward)
    np.testing.assert_array_equal(first.rebuffer_fraction, second.rebuffer_fraction)


@pytest.mark.parametrize('kind', ['QAA', 'BEAS', 'PF'])
def test_trace_respects_budget_and_limits(kind, desk_group):
    result = run(_config([desk_group], 2, kind, record_trace=True))
    trace = result.trace
    assert len(trace) == HORIZON * desk_group.count
    assert (trace.groupby('slot')['scheduled'].sum() == 2).all()
    buffers = np.array([[int(v) for v in cell.split(';')] for cell in trace['buffer_per_layer']])
    assert buffers.max() <= desk_group.video.buffer_limit
    downloads = np.array([[int(v) for v in cell.split(';')] for cell in trace['downloads_per_layer']])
    assert not downloads[~trace['scheduled'].to_numpy()].any()


def test_metrics_are_fractions(desk_group):
    metrics = run(_config([desk_group], 2, 'BEAS', seed=1)).metrics
    assert np.all((metrics.rebuffer_fraction >= 0) & (metrics.rebuffer_fraction <= 1))
    shares = metrics.layer_fractions.sum(axis=1)
    assert np.all((np.isclose(shares, 1.0)) | (shares == 0))
    summary = metrics.summary()
    assert set(summary) == {'reward', 'rebuffer_fraction', 'startup_slots', 'base_only_fraction',
                            'layer_1_fraction', 'layer_2_fraction'}


def test_warmup_must_leave_measured_slots(desk_group):
    with pytest.raises(InvalidArgumentError):
        run(_config([desk_group], 2, warmup_slots=HORIZON))


def test_groups_must_share_layer_count(desk_group, desk_channel):
    single = UserGroup(count=1, qa=QaSpec.dbp(1), channel=desk_channel, video=VideoConfig(layer_rates=(1.0,)))
    with pytest.raises(InvalidArgumentError):
        run(_config([desk_group, single], 1))


def test_batch_statistics(desk_group):
    single = run_batch(_config([desk_group], 2), [3])
    assert all(value is None for value in single.stderr.values())
    assert single.mean['reward'] == pytest.approx(single.per_seed[0]['reward'])

    repeated = run_batch(_config([desk_group], 2), [4, 4], threads=2)
    assert repeated.per_seed[0] == repeated.per_seed[1]
    assert repeated.stderr['reward'] == pytest.approx(0.0)
    assert len(repeated.users) == desk_group.count
    assert list(repeated.table()['seed']) == [4, 4]


@pytest.mark.parametrize('kind', ['BCF', 'LBF'])
def test_rebuffering_grows_with_load(kind, desk_group):
    seeds = list(range(6))
    batches = sorted(
        ((desk_group.count / m, run_batch(_config([desk_group], m, kind), seeds)) for m in (4, 2, 1)),
        key=lambda entry: entry[0])
    for (_, lighter), (_, heavier) in zip(batches, batches[1:]):
        pooled = np.hypot(lighter.stderr['rebuffer_fraction'], heavier.stderr['rebuffer_fraction'])
        assert heavier.mean['rebuffer_fraction'] >= lighter.mean['rebuffer_fraction'] - pooled - 1e-12


def test_batch_needs_seeds(desk_group):
    with pytest.raises(InvalidArgumentError):
        run_batch(_config([desk_group], 2), [])


def test_heterogeneous_groups_run(desk_group, desk_channel, desk_video):
    other = UserGroup(name="cbp", count=2, qa=QaSpec.cbp(), channel=desk_channel, video=desk_video)
    result = run(_config([desk_group, other], 3, 'QAA', record_trace=True))
    assert len(result.metrics.reward) == 6
    assert set(result.trace['group']) == {0, 1}
