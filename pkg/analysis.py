"""
Post-solve analytics: fill and drain rates, the critical load, priority
heatmaps and the comparison tables behind the load plots.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from logging import getLogger
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from channel import ChannelModel, avg_rate
from core_model import VideoConfig, buffer_grid, playback_table
from errors import CriticalLoadError, InvalidArgumentError
from lp_solver import SolverOptions
from qa_policy import QaSpec
from rb_lp import UserGroup, solve_rb
from schedulers import PriorityRanking
from simulator import BatchResult

logger = getLogger(__name__)

__all__ = [
    'SweepPoint',
    'LoadSweep',
    'CriticalLoad',
    'lambda_avg',
    'layer_time_shares',
    'mu_avg',
    'load_sweep',
    'find_critical_load',
    'critical_load',
    'buffer_limit_sweep',
    'heatmap_frame',
    'priority_correlations',
    'comparison_table',
]


def lambda_avg(channel: Union[ChannelModel, float], rho: float) -> float:
    """Average fill rate c_avg / rho of one user at load rho = N / M."""
    if rho <= 0:
        raise InvalidArgumentError("load must be positive", {'rho': rho})
    c_avg = avg_rate(channel) if isinstance(channel, ChannelModel) else float(channel)
    return c_avg / rho


def layer_time_shares(x0: np.ndarray, x1: np.ndarray, video: VideoConfig) -> np.ndarray:
    """tau_l for l = 0..L: share of discounted time spent with decodable prefix l.

    Full states are channel-major, so the buffer index is the state modulo
    the number of buffer states.
    """
    mass = np.asarray(x0, dtype=float) + np.asarray(x1, dtype=float)
    total = mass.sum()
    if total <= 0:
        raise InvalidArgumentError("occupancy measure is empty")
    prefix = playback_table(video).prefix[np.arange(len(mass)) % video.num_buffer_states]
    return np.bincount(prefix, weights=mass, minlength=video.num_layers + 1) / total


def mu_avg(x0: np.ndarray, x1: np.ndarray, video: VideoConfig) -> float:
    """Average drain rate sum_l (q_1 + ... + q_l) * tau_l, in Mbps."""
    cumulative = np.concatenate([[0.0], np.cumsum(video.layer_rates)])
    return float(cumulative @ layer_time_shares(x0, x1, video))


@dataclass
class SweepPoint:
    subchannels: int
    rho: float
    lambda_avg: float
    mu_avg: float
    objective_per_user: float


@dataclass
class CriticalLoad:
    rho: float
    bracket: Tuple[float, float]


@dataclass
class LoadSweep:
    points: List[SweepPoint]
    critical: Optional[CriticalLoad] = None

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(point) for point in self.points],
                            columns=['subchannels', 'rho', 'lambda_avg', 'mu_avg', 'objective_per_user'])


def _sweep_point(group: UserGroup, subchannels: int, discount: float,
                 options: Optional[SolverOptions]) -> SweepPoint:
    _, solution = solve_rb([group], subchannels, discount, options)
    rho = group.count / subchannels
    solved = solution.groups[0]
    point = SweepPoint(
        subchannels=subchannels,
        rho=rho,
        lambda_avg=lambda_avg(group.channel, rho),
        mu_avg=mu_avg(solved.x0, solved.x1, group.video),
        objective_per_user=solution.per_user_objective,
    )
    logger.info("sweep M=%d rho=%.3f: lambda %.4f, mu %.4f", subchannels, rho,
                point.lambda_avg, point.mu_avg)
    return point


def load_sweep(group: UserGroup, subchannel_values: Sequence[int], discount: float = 0.99,
               options: Optional[SolverOptions] = None, threads: int = 1,
               strict: bool = False) -> LoadSweep:
    """Solve the RB LP for every M and record (rho, lambda_avg, mu_avg).

    Points come back sorted by increasing load. The critical load is
    attached when the sweep brackets it; with ``strict`` a missing sign
    change raises :class:`CriticalLoadError`, otherwise it is logged.
    """
    values = sorted({int(m) for m in subchannel_values}, reverse=True)
    if not values or values[-1] <= 0:
        raise InvalidArgumentError("sweep needs positive subchannel counts", {'subchannels': values})
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        points = list(pool.map(lambda m: _sweep_point(group, m, discount, options), values))
    sweep = LoadSweep(points)
    try:
        sweep.critical = find_critical_load(points)
    except CriticalLoadError:
        if strict:
            raise
        logger.warning("no critical load inside rho in [%.3f, %.3f]", points[0].rho, points[-1].rho)
    return sweep


def find_critical_load(points: Sequence[SweepPoint]) -> CriticalLoad:
    """Linear interpolation of lambda_avg - mu_avg = 0 between bracketing points."""
    ordered = sorted(points, key=lambda point: point.rho)
    gaps = [point.lambda_avg - point.mu_avg for point in ordered]
    for point, gap in zip(ordered, gaps):
        if gap == 0:
            return CriticalLoad(point.rho, (point.rho, point.rho))
    for left, right, g_left, g_right in zip(ordered, ordered[1:], gaps, gaps[1:]):
        if g_left * g_right < 0:
            rho = left.rho + g_left * (right.rho - left.rho) / (g_left - g_right)
            return CriticalLoad(rho, (left.rho, right.rho))
    raise CriticalLoadError(
        "lambda_avg - mu_avg does not change sign over the sweep",
        {'sweep': [asdict(point) for point in ordered]})


def critical_load(channel: ChannelModel, qa: QaSpec, video: VideoConfig,
                  subchannel_values: Sequence[int], num_users: int = 20,
                  discount: float = 0.99, options: Optional[SolverOptions] = None,
                  threads: int = 1) -> Tuple[CriticalLoad, LoadSweep]:
    group = UserGroup(name="sweep", count=num_users, qa=qa, channel=channel, video=video)
    sweep = load_sweep(group, subchannel_values, discount, options, threads, strict=True)
    return sweep.critical, sweep


def buffer_limit_sweep(group: UserGroup, buffer_limits: Sequence[int], subchannels: int,
                       discount: float = 0.99, options: Optional[SolverOptions] = None) -> pd.DataFrame:
    rows = []
    for limit in buffer_limits:
        video = group.video.model_copy(update={'buffer_limit': int(limit)})
        resized = group.model_copy(update={'video': video, 'initial_distribution': None})
        _, solution = solve_rb([resized], subchannels, discount, options)
        solved = solution.groups[0]
        rows.append({
            'buffer_limit': int(limit),
            'objective_per_user': solution.per_user_objective,
            'mu_avg': mu_avg(solved.x0, solved.x1, video),
        })
    return pd.DataFrame(rows, columns=['buffer_limit', 'objective_per_user', 'mu_avg'])


def heatmap_frame(ranking: PriorityRanking, video: VideoConfig, group: int = 0) -> pd.DataFrame:
    """Normalized priority index per state; pruned states get 1 and a flag.

    Two-layer videos are exported on the (channel_state, b1, b2) axes, other
    layer counts as a flat state table.
    """
    index = ranking.priority_index(group)
    pruned = ~ranking.retained(group)
    if video.num_layers != 2:
        return pd.DataFrame({'state': np.arange(len(index)), 'priority_index': index, 'pruned': pruned})
    channel, buffer = np.divmod(np.arange(len(index)), video.num_buffer_states)
    grid = buffer_grid(video)[buffer]
    return pd.DataFrame({
        'channel_state': channel,
        'b1': grid[:, 0],
        'b2': grid[:, 1],
        'priority_index': index,
        'pruned': pruned,
    })


def _spearman(first: np.ndarray, second: np.ndarray) -> Optional[float]:
    if len(first) < 3 or np.all(first == first[0]) or np.all(second == second[0]):
        return None
    value = float(spearmanr(first, second)[0])
    return None if math.isnan(value) else value


def priority_correlations(ranking: PriorityRanking, video: VideoConfig, group: int = 0) -> Dict[str, Optional[float]]:
    """Spearman correlation of the priority index with channel state and total buffer.

    Only ranked states enter. ``None`` when a side is constant.
    """
    retained = np.flatnonzero(ranking.retained(group))
    index = ranking.priority_index(group)[retained]
    channel, buffer = np.divmod(retained, video.num_buffer_states)
    occupancy = buffer_grid(video)[buffer].sum(axis=1)
    return {
        'channel': _spearman(index, channel),
        'buffer': _spearman(index, occupancy),
        'num_states': int(len(retained)),
    }


def comparison_table(results: Mapping[Tuple[str, int], BatchResult], num_users: int) -> pd.DataFrame:
    """One row per (scheduler, M): load and mean / standard error of every metric."""
    rows = []
    for (scheduler, subchannels), batch in sorted(results.items()):
        row: Dict[str, Any] = {
            'scheduler': scheduler,
            'subchannels': subchannels,
            'load': num_users / subchannels if subchannels > 0 else math.inf,
        }
        for metric, value in batch.mean.items():
            row[f'{metric}_mean'] = value
            row[f'{metric}_stderr'] = batch.stderr[metric]
        rows.append(row)
    return pd.DataFrame(rows)
