"""
Slot-level simulation of M subchannels shared by N streaming users.

One slot lasts one segment. In every slot the channels are observed, the
scheduler picks users, scheduled users download what their QA asks for and
every user plays back from the buffer it had at the start of the slot, so a
fresh download is never played in the slot it arrives.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from logging import getLogger
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from channel import avg_rate, sample_next_many
from core_model import buffer_grid, playback_table
from errors import InvalidArgumentError
from qa_policy import build_policy_matrices
from rb_lp import UserGroup, solve_rb
from schedulers import (BaselineScheduler, BeasScheduler, PriorityRanking, QaaScheduler,
                        Scheduler, SchedulerSpec, SlotView, qaa_rank)

logger = getLogger(__name__)

__all__ = [
    'SimConfig',
    'Metrics',
    'SimResult',
    'BatchResult',
    'make_scheduler',
    'ranking_for',
    'run',
    'run_batch',
]

TRACE_COLUMNS = ['slot', 'user', 'group', 'channel_state', 'scheduled',
                 'downloads_per_layer', 'buffer_per_layer', 'rebuffered', 'reward']


class SimConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    groups: Tuple[UserGroup, ...]
    subchannels: int = Field(..., ge=0)
    scheduler: SchedulerSpec
    horizon: int = Field(600, ge=1)
    discount: float = Field(0.99, gt=0.0, lt=1.0)
    seed: int = Field(0, ge=0)
    warmup_slots: int = Field(0, ge=0)
    record_trace: bool = False

    @property
    def num_users(self) -> int:
        return sum(group.count for group in self.groups)

    @property
    def segment_duration(self) -> float:
        return self.groups[0].video.segment_duration


@dataclass
class Metrics:
    """Per-user QoE over the measured slots."""

    reward: np.ndarray
    rebuffer_fraction: np.ndarray
    startup_slots: np.ndarray
    base_only_fraction: np.ndarray
    layer_fractions: np.ndarray

    def summary(self) -> Dict[str, float]:
        summary = {
            'reward': float(self.reward.mean()),
            'rebuffer_fraction': float(self.rebuffer_fraction.mean()),
            'startup_slots': float(self.startup_slots.mean()),
            'base_only_fraction': float(self.base_only_fraction.mean()),
        }
        for layer in range(self.layer_fractions.shape[1]):
            summary[f'layer_{layer + 1}_fraction'] = float(self.layer_fractions[:, layer].mean())
        return summary

    def to_dict(self) -> Dict[str, Any]:
        return {
            'aggregate': self.summary(),
            'users': [
                {
                    'user': user,
                    'reward': float(self.reward[user]),
                    'rebuffer_fraction': float(self.rebuffer_fraction[user]),
                    'startup_slots': int(self.startup_slots[user]),
                    'base_only_fraction': float(self.base_only_fraction[user]),
                    'layer_fractions': self.layer_fractions[user].tolist(),
                }
                for user in range(len(self.reward))
            ],
        }


@dataclass
class SimResult:
    config: SimConfig
    metrics: Metrics
    trace: Optional[pd.DataFrame] = None


@lru_cache(maxsize=32)
def _policy_tables(group: UserGroup):
    """(targets[c, b], downloads[c, b, l]) of the group's QA."""
    matrices = build_policy_matrices(group.qa, group.video, group.channel)
    targets = np.stack([matrix.targets for matrix in matrices])
    downloads = np.stack([matrix.downloads for matrix in matrices])
    return targets, downloads


def ranking_for(groups: Sequence[UserGroup], subchannels: int, discount: float) -> PriorityRanking:
    _, solution = solve_rb(groups, subchannels, discount)
    return qaa_rank(solution.groups)


def make_scheduler(config: SimConfig, ranking: Optional[PriorityRanking] = None) -> Scheduler:
    spec = config.scheduler
    if spec.kind == 'QAA':
        if ranking is None:
            ranking = ranking_for(config.groups, config.subchannels, config.discount)
        return QaaScheduler(ranking, spec)
    if spec.kind == 'BEAS':
        return BeasScheduler(spec, config.num_users, config.segment_duration, config.segment_duration)
    averages = np.concatenate([np.full(group.count, avg_rate(group.channel)) for group in config.groups])
    return BaselineScheduler(spec, averages)


class _Population:
    """Channel and buffer state of all users, grouped in contiguous slices."""

    def __init__(self, groups: Sequence[UserGroup], rng: np.random.Generator):
        self.groups = list(groups)
        self.slices = []
        self.channel = []
        self.buffer = []
        start = 0
        for group in self.groups:
            space = group.state_space
            initial = rng.choice(space.size, size=group.count, p=group.alpha())
            channel, buffer = space.split(initial)
            self.channel.append(np.asarray(channel, dtype=int))
            self.buffer.append(np.asarray(buffer, dtype=int))
            self.slices.append(slice(start, start + group.count))
            start += group.count
        self.num_users = start
        self.user_groups = np.concatenate([np.full(group.count, g) for g, group in enumerate(self.groups)])

    def view(self) -> SlotView:
        rates, bases, states, deliveries = [], [], [], []
        for g, group in enumerate(self.groups):
            _, downloads = _policy_tables(group)
            grid = buffer_grid(group.video)
            channel, buffer = self.channel[g], self.buffer[g]
            rates.append(group.channel.rates[channel])
            bases.append(grid[buffer, 0])
            states.append(channel * group.video.num_buffer_states + buffer)
            deliveries.append(downloads[channel, buffer].sum(axis=1))
        return SlotView(
            channel_rates=np.concatenate(rates),
            base_counts=np.concatenate(bases),
            user_groups=self.user_groups,
            user_states=np.concatenate(states),
            deliveries=np.concatenate(deliveries),
        )


def run(config: SimConfig, ranking: Optional[PriorityRanking] = None) -> SimResult:
    """Simulate one seeded run.

    Args:
        config (SimConfig): Groups, scheduler, horizon and seed.
        ranking (PriorityRanking): QAA ranking; solved from the groups when
            omitted.

    Returns:
        SimResult: Per-user metrics and, when requested, the slot trace.
    """
    if not config.groups:
        raise InvalidArgumentError("simulation needs at least one user group")
    if config.warmup_slots >= config.horizon:
        raise InvalidArgumentError("warm-up must be shorter than the horizon",
                                   {'warmup_slots': config.warmup_slots, 'horizon': config.horizon})
    num_layers = {group.video.num_layers for group in config.groups}
    if len(num_layers) != 1:
        raise InvalidArgumentError("all groups must stream the same number of layers")
    num_layers = num_layers.pop()

    rng = np.random.default_rng(config.seed)
    scheduler = make_scheduler(config, ranking)
    population = _Population(config.groups, rng)
    n = population.num_users
    slot_discount = config.discount ** config.segment_duration

    reward = np.zeros(n)
    stalled = np.zeros(n)
    startup = np.zeros(n, dtype=int)
    started = np.zeros(n, dtype=bool)
    played = np.zeros(n)
    base_only = np.zeros(n)
    layer_counts = np.zeros((n, num_layers))
    trace_frames = []

    logger.info("simulating %d users, M=%d, %s, seed %d, %d slots",
                n, config.subchannels, config.scheduler.label, config.seed, config.horizon)
    for t in range(config.horizon):
        view = population.view()
        scheduled = scheduler.select(view, config.subchannels)
        scheduler.observe(view, scheduled)
        is_scheduled = np.zeros(n, dtype=bool)
        is_scheduled[scheduled] = True

        measured = t >= config.warmup_slots
        weight = slot_discount ** (t - config.warmup_slots)
        slot_downloads = np.zeros((n, num_layers), dtype=int)
        slot_reward = np.zeros(n)
        slot_rebuffered = np.zeros(n, dtype=bool)
        buffers_before = np.zeros((n, num_layers), dtype=int)
        channels_before = np.concatenate(population.channel)

        for g, group in enumerate(population.groups):
            users = population.slices[g]
            targets, downloads = _policy_tables(group)
            table = playback_table(group.video)
            channel, buffer = population.channel[g], population.buffer[g]
            active = is_scheduled[users]

            slot_reward[users] = table.reward[buffer]
            slot_rebuffered[users] = table.rebuffered[buffer]
            buffers_before[users] = buffer_grid(group.video)[buffer]
            slot_downloads[users] = np.where(active[:, None], downloads[channel, buffer], 0)
            prefix = table.prefix[buffer]
            if measured:
                base_only[users] += prefix == 1
                played[users] += prefix > 0

            population.buffer[g] = np.where(active, targets[channel, buffer], table.next_index[buffer])
            population.channel[g] = sample_next_many(group.channel, channel, rng)

        if measured:
            reward += weight * slot_reward
            stalled += slot_rebuffered
            layer_counts += slot_downloads
            waiting = ~started & slot_rebuffered
            startup += waiting
            started |= ~slot_rebuffered

        if config.record_trace:
            trace_frames.append(pd.DataFrame({
                'slot': t,
                'user': np.arange(n),
                'group': population.user_groups,
                'channel_state': channels_before,
                'scheduled': is_scheduled,
                'downloads_per_layer': [";".join(map(str, row)) for row in slot_downloads],
                'buffer_per_layer': [";".join(map(str, row)) for row in buffers_before],
                'rebuffered': slot_rebuffered,
                'reward': slot_reward,
            }, columns=TRACE_COLUMNS))

    measured_slots = config.horizon - config.warmup_slots
    total_downloads = layer_counts.sum(axis=1, keepdims=True)
    metrics = Metrics(
        reward=reward,
        rebuffer_fraction=stalled / measured_slots,
        startup_slots=startup,
        base_only_fraction=np.divide(base_only, played, out=np.zeros(n), where=played > 0),
        layer_fractions=np.divide(layer_counts, total_downloads, out=np.zeros_like(layer_counts),
                                  where=total_downloads > 0),
    )
    logger.info("seed %d done: reward %.4f, rebuffering %.4f",
                config.seed, metrics.summary()['reward'], metrics.summary()['rebuffer_fraction'])
    trace = pd.concat(trace_frames, ignore_index=True) if trace_frames else None
    return SimResult(config, metrics, trace)


@dataclass
class BatchResult:
    seeds: List[int]
    per_seed: List[Dict[str, float]]
    mean: Dict[str, float]
    stderr: Dict[str, Optional[float]]
    users: List[Dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'seeds': self.seeds,
            'mean': self.mean,
            'stderr': self.stderr,
            'users': self.users,
            'per_seed': [dict(summary, seed=seed) for seed, summary in zip(self.seeds, self.per_seed)],
        }

    def table(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.per_seed)
        frame.insert(0, 'seed', self.seeds)
        return frame


def run_batch(config: SimConfig, seeds: Sequence[int], threads: int = 1,
              ranking: Optional[PriorityRanking] = None) -> BatchResult:
    """Independent runs over ``seeds``; mean and standard error per metric.

    With a single seed the standard error is reported as ``None``. The QAA
    ranking is solved once and shared read-only by all runs.
    """
    seeds = [int(seed) for seed in seeds]
    if not seeds:
        raise InvalidArgumentError("run_batch needs at least one seed")
    if config.scheduler.kind == 'QAA' and ranking is None:
        ranking = ranking_for(config.groups, config.subchannels, config.discount)
    configs = [config.model_copy(update={'seed': seed}) for seed in seeds]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(lambda cfg: run(cfg, ranking), configs))

    per_seed = [result.metrics.summary() for result in results]
    frame = pd.DataFrame(per_seed)
    mean = {key: float(value) for key, value in frame.mean().items()}
    if len(seeds) > 1:
        stderr = {key: float(value) for key, value in (frame.std(ddof=1) / np.sqrt(len(seeds))).items()}
    else:
        stderr = {key: None for key in frame.columns}
    users = [
        {
            'user': user,
            'reward': float(np.mean([r.metrics.reward[user] for r in results])),
            'rebuffer_fraction': float(np.mean([r.metrics.rebuffer_fraction[user] for r in results])),
            'base_only_fraction': float(np.mean([r.metrics.base_only_fraction[user] for r in results])),
        }
        for user in range(config.num_users)
    ]
    return BatchResult(seeds, per_seed, mean, stderr, users)
