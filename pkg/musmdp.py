"""
Multi-user semi-Markov decision process (MUSMDP) benchmark.

Here QA and scheduling are decided jointly: an active user picks which layer
to download next, and the action lasts until that sub-segment has arrived.
Time runs in slots of tau_slot = min sub-segment size / max rate, so the
fastest download takes exactly one slot, and a state is
(channel state, buffer, playback offset u in slots of the current segment).

Per-slot rewards are the segment reward scaled by tau_slot / tau_seg, so one
second of playback earns the same reward as one RB slot, and the per-slot
discount is beta ** tau_slot for a per-second beta.
"""

from collections import defaultdict
from dataclasses import dataclass
from functools import lru_cache
from logging import getLogger
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from channel import ChannelModel, require_valid, stationary_distribution
from core_model import VideoConfig, buffer_grid, playback_table
from errors import InvalidArgumentError
from lp_solver import LpProblem, LpSolution, SolverOptions, solve
from rb_lp import UserGroup

logger = getLogger(__name__)

__all__ = [
    'SmdpStateSpace',
    'FirstPassage',
    'slot_duration',
    'offsets_per_segment',
    'first_passage',
    'build_hl',
    'expected_reward_and_duration',
    'SmdpModel',
    'SmdpSolution',
    'build_musmdp_model',
    'build_musmdp_lp',
    'solve_musmdp',
]

DEFAULT_TAIL_TOL = 1e-9
MAX_PASSAGE_SLOTS = 100_000


@dataclass(frozen=True)
class SmdpStateSpace:
    num_channel_states: int
    num_buffer_states: int
    num_offsets: int

    @property
    def local_size(self) -> int:
        return self.num_buffer_states * self.num_offsets

    @property
    def size(self) -> int:
        return self.num_channel_states * self.local_size

    def full_index(self, channel_state, buffer_index, offset):
        return (channel_state * self.num_buffer_states + buffer_index) * self.num_offsets + offset

    def split(self, full_index):
        """Inverse of :meth:`full_index`: (channel state, buffer index, offset)."""
        rest, offset = np.divmod(full_index, self.num_offsets)
        channel_state, buffer_index = np.divmod(rest, self.num_buffer_states)
        return channel_state, buffer_index, offset


@dataclass(frozen=True)
class FirstPassage:
    """Joint law of (duration, next channel state) for one initial state.

    ``pmf[t - 1, j]`` = P(duration = t, channel after the action = j).
    """

    pmf: np.ndarray
    tail_mass: float

    @property
    def horizon(self) -> int:
        return self.pmf.shape[0]

    @property
    def duration_pmf(self) -> np.ndarray:
        return self.pmf.sum(axis=1)

    def total(self) -> float:
        return float(self.pmf.sum())

    def mean_duration(self) -> float:
        return float(np.arange(1, self.horizon + 1) @ self.duration_pmf)


def slot_duration(video: VideoConfig, channel: ChannelModel) -> float:
    """Duration of the shortest possible action, in seconds."""
    fastest = channel.rates.max()
    if fastest <= 0:
        raise InvalidArgumentError("channel never delivers anything", {'states': list(channel.states)})
    return float(video.sub_segment_sizes.min() / fastest)


def offsets_per_segment(video: VideoConfig, slot: float) -> int:
    ratio = video.segment_duration / slot
    offsets = int(round(ratio))
    if offsets < 1 or abs(ratio - offsets) > 1e-9 * max(1.0, ratio):
        raise InvalidArgumentError(
            "segment duration must be an integer multiple of the slot",
            {'segment_duration': video.segment_duration, 'slot': slot})
    return offsets


@lru_cache(maxsize=64)
def _first_passage_cached(size: float, channel: ChannelModel, slot: float,
                          tail_tol: float) -> Tuple[FirstPassage, ...]:
    rates = channel.rates * slot
    transitions = channel.matrix
    target = size * (1.0 - 1e-9)
    tables = []
    for start in range(channel.num_states):
        frontier = {(0.0, start): 1.0}
        rows = []
        while True:
            row = np.zeros(channel.num_states)
            pending = defaultdict(float)
            for (delivered, state), mass in frontier.items():
                delivered += rates[state]
                if delivered >= target:
                    row += mass * transitions[state]
                    continue
                key = round(delivered, 12)
                for nxt in np.flatnonzero(transitions[state]):
                    pending[(key, nxt)] += mass * transitions[state, nxt]
            rows.append(row)
            frontier = pending
            remaining = sum(frontier.values())
            if remaining < tail_tol:
                # pending keys already carry the channel after this slot
                for (_, state), mass in frontier.items():
                    rows[-1][state] += mass
                break
            if len(rows) >= MAX_PASSAGE_SLOTS:
                raise InvalidArgumentError(
                    "first-passage time does not converge",
                    {'size': size, 'remaining_mass': remaining})
        tables.append(FirstPassage(pmf=np.array(rows), tail_mass=float(remaining)))
        logger.debug("first passage size=%g start=%d: horizon %d, tail %.3g",
                     size, start, len(rows), remaining)
    return tuple(tables)


def first_passage(size: float, channel: ChannelModel, slot: float,
                  tail_tol: float = DEFAULT_TAIL_TOL) -> List[FirstPassage]:
    """First-passage law of downloading ``size`` Mb, one entry per initial channel state.

    Forward dynamic programming over (delivered amount, channel state); the
    action ends in the first slot where the delivered amount reaches ``size``.
    The horizon grows until less than ``tail_tol`` mass is still pending, and
    that mass is folded into the last slot.
    """
    if size <= 0 or tail_tol <= 0 or slot <= 0:
        raise InvalidArgumentError(
            "size, slot and tail_tol must be positive",
            {'size': size, 'slot': slot, 'tail_tol': tail_tol})
    if channel.rates.max() <= 0:
        raise InvalidArgumentError("channel never delivers anything", {'states': list(channel.states)})
    return list(_first_passage_cached(float(size), channel, float(slot), float(tail_tol)))


def expected_reward_and_duration(passage: FirstPassage, slot_rewards: Sequence[float],
                                 discount: float) -> Tuple[float, float]:
    """Expected discounted reward and duration of one action.

    Args:
        passage (FirstPassage): Duration law from the action's start state.
        slot_rewards (Sequence[float]): Per-slot reward along the action's
            trajectory, at least ``passage.horizon`` entries.
        discount (float): Per-slot discount e^-s.

    Returns:
        tuple: (r_bar, tau_bar).
    """
    weights = discount ** np.arange(passage.horizon)
    discounted = np.cumsum(weights * np.asarray(slot_rewards[:passage.horizon], dtype=float))
    elapsed = np.cumsum(weights)
    durations = passage.duration_pmf
    return float(durations @ discounted), float(durations @ elapsed)


class _LocalDynamics:
    """Deterministic buffer/offset evolution of one user between decisions."""

    def __init__(self, video: VideoConfig, slot: float, offsets: int):
        table = playback_table(video)
        self.video = video
        self.offsets = offsets
        local = np.arange(video.num_buffer_states * offsets)
        buffer_index, offset = np.divmod(local, offsets)
        stalled = table.rebuffered[buffer_index]
        self.reward = table.reward[buffer_index] * (slot / video.segment_duration)
        advanced = offset + 1
        finished = advanced == offsets
        next_buffer = np.where(finished, table.next_index[buffer_index], buffer_index)
        next_offset = np.where(finished, 0, advanced)
        self.step = np.where(stalled, local, next_buffer * offsets + next_offset)
        self.local = local
        self.buffer_index = buffer_index
        self.offset = offset

    def completion(self, layer: int) -> np.ndarray:
        """Local state after one sub-segment of ``layer`` arrives.

        Arrivals that would exceed the buffer limit or break prefix order are
        discarded.
        """
        grid = buffer_grid(self.video)
        grown = np.array(grid)
        grown[:, layer] += 1
        fits = grown[:, layer] <= self.video.buffer_limit
        if layer > 0:
            fits &= grown[:, layer] <= grid[:, layer - 1]
        shape = (self.video.radix,) * self.video.num_layers
        grown_index = np.ravel_multi_index(tuple(np.minimum(grown, self.video.buffer_limit).T), shape)
        target = np.where(fits, grown_index, np.arange(len(grid)))
        return target[self.buffer_index] * self.offsets + self.offset

    def trajectories(self, horizon: int, discount: float):
        """Positions after k slots and discounted rewards of the first t slots."""
        positions = np.empty((horizon + 1, len(self.local)), dtype=int)
        gains = np.zeros((horizon + 1, len(self.local)))
        positions[0] = self.local
        for k in range(horizon):
            gains[k + 1] = gains[k] + discount ** k * self.reward[positions[k]]
            positions[k + 1] = self.step[positions[k]]
        return positions, gains


def build_hl(video: VideoConfig, channel: ChannelModel, layer: Optional[int], discount: float,
             passages: Optional[Sequence[FirstPassage]] = None, slot: Optional[float] = None,
             dynamics: Optional[_LocalDynamics] = None) -> sparse.csr_matrix:
    """Discounted transition matrix of action ``layer`` (``None`` = passive, one slot).

    Block (i, j) = sum_k discount^k f_i(k, j) P^l(k), rows sub-stochastic.
    """
    if not 0.0 < discount <= 1.0:
        raise InvalidArgumentError("per-slot discount must lie in (0, 1]", {'discount': discount})
    slot = slot if slot is not None else slot_duration(video, channel)
    if dynamics is None:
        dynamics = _LocalDynamics(video, slot, offsets_per_segment(video, slot))
    size = len(dynamics.local)
    transitions = channel.matrix
    rows, cols, data = [], [], []

    if layer is None:
        for i in range(channel.num_states):
            for j in np.flatnonzero(transitions[i]):
                rows.append(i * size + dynamics.local)
                cols.append(j * size + dynamics.step)
                data.append(np.full(size, discount * transitions[i, j]))
    else:
        if passages is None:
            passages = first_passage(video.sub_segment_sizes[layer], channel, slot)
        horizon = max(passage.horizon for passage in passages)
        positions, _ = dynamics.trajectories(horizon, discount)
        arrival = dynamics.completion(layer)
        for i, passage in enumerate(passages):
            for k in range(1, passage.horizon + 1):
                targets = arrival[positions[k]]
                for j in np.flatnonzero(passage.pmf[k - 1]):
                    rows.append(i * size + dynamics.local)
                    cols.append(j * size + targets)
                    data.append(np.full(size, discount ** k * passage.pmf[k - 1, j]))

    total = channel.num_states * size
    return sparse.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(total, total))


@dataclass
class SmdpModel:
    groups: List[UserGroup]
    subchannels: int
    slot: float
    discount: float
    spaces: List[SmdpStateSpace]
    transitions: List[List[sparse.csr_matrix]]
    rewards: List[np.ndarray]
    durations: List[np.ndarray]
    alphas: List[np.ndarray]
    offsets: List[int]
    problem: LpProblem

    @property
    def total_users(self) -> int:
        return sum(group.count for group in self.groups)

    def columns(self, group: int, action: int) -> slice:
        start = self.offsets[group] + action * self.spaces[group].size
        return slice(start, start + self.spaces[group].size)


def _group_tables(group: UserGroup, slot: float, discount: float, tail_tol: float):
    video, channel = group.video, group.channel
    offsets = offsets_per_segment(video, slot)
    dynamics = _LocalDynamics(video, slot, offsets)
    local_size = len(dynamics.local)
    space = SmdpStateSpace(channel.num_states, video.num_buffer_states, offsets)

    matrices = [build_hl(video, channel, None, discount, slot=slot, dynamics=dynamics)]
    rewards = [np.tile(dynamics.reward, channel.num_states)]
    durations = [np.ones(space.size)]
    for layer in range(video.num_layers):
        passages = first_passage(video.sub_segment_sizes[layer], channel, slot, tail_tol)
        matrices.append(build_hl(video, channel, layer, discount, passages, slot, dynamics))
        horizon = max(passage.horizon for passage in passages)
        _, gains = dynamics.trajectories(horizon, discount)
        weights = np.cumsum(discount ** np.arange(horizon))
        reward = np.empty(space.size)
        duration = np.empty(space.size)
        for i, passage in enumerate(passages):
            pmf = passage.duration_pmf
            block = slice(i * local_size, (i + 1) * local_size)
            reward[block] = pmf @ gains[1:passage.horizon + 1]
            duration[block] = pmf @ weights[:passage.horizon]
        rewards.append(reward)
        durations.append(duration)

    alpha = np.zeros(space.size)
    if group.initial_distribution is not None:
        rb_alpha = np.asarray(group.initial_distribution)
        for full in np.flatnonzero(rb_alpha):
            channel_state, buffer_index = divmod(full, video.num_buffer_states)
            alpha[space.full_index(channel_state, buffer_index, 0)] = rb_alpha[full]
    else:
        alpha[space.full_index(np.arange(channel.num_states), 0, 0)] = stationary_distribution(channel)
    return space, matrices, rewards, durations, alpha


def build_musmdp_model(groups: Sequence[UserGroup], subchannels: int, discount_per_second: float,
                       tail_tol: float = DEFAULT_TAIL_TOL,
                       discount_per_slot: Optional[float] = None) -> SmdpModel:
    """Tables and the LP of the joint QA and scheduling problem.

    Actions are 0 (idle for one slot) and 1..L (download one sub-segment of
    that layer). Only active actions consume the subchannel budget.
    """
    groups = list(groups)
    if not groups:
        raise InvalidArgumentError("at least one user group is required")
    if not 0.0 < discount_per_second < 1.0:
        raise InvalidArgumentError("discount must lie strictly between 0 and 1",
                                   {'discount': discount_per_second})
    total_users = sum(group.count for group in groups)
    if subchannels < 0 or subchannels > total_users:
        raise InvalidArgumentError("subchannels must lie between 0 and the number of users",
                                   {'subchannels': subchannels, 'users': total_users})
    for group in groups:
        require_valid(group.channel)

    slot = min(slot_duration(group.video, group.channel) for group in groups)
    matched = discount_per_second ** slot
    discount = matched if discount_per_slot is None else discount_per_slot
    if abs(discount - matched) > 1e-12:
        logger.warning("per-slot discount %.12g differs from beta**tau_slot = %.12g; "
                       "comparisons with the RB model are not matched", discount, matched)

    spaces, transitions, rewards, durations, alphas, offsets = [], [], [], [], [], []
    blocks, objective, resource, names = [], [], [], []
    offset = 0
    for g, group in enumerate(groups):
        space, matrices, reward, duration, alpha = _group_tables(group, slot, discount, tail_tol)
        identity = sparse.identity(space.size, format='csr')
        blocks.append(sparse.hstack([identity - matrix.T for matrix in matrices], format='csr'))
        objective.append(group.count * np.concatenate(reward))
        resource.append(group.count * np.concatenate([np.zeros(space.size)] + duration[1:]))
        names.extend((g, s, a) for a in range(len(matrices)) for s in range(space.size))
        spaces.append(space)
        transitions.append(matrices)
        rewards.append(np.array(reward))
        durations.append(np.array(duration))
        alphas.append(alpha)
        offsets.append(offset)
        offset += len(matrices) * space.size

    constraints = sparse.vstack(
        [sparse.block_diag(blocks, format='csr'), sparse.csr_matrix(np.concatenate(resource))],
        format='csr')
    row_names = [('polytope', g, s) for g, space in enumerate(spaces) for s in range(space.size)]
    problem = LpProblem(
        objective=np.concatenate(objective),
        constraints=constraints,
        rhs=np.concatenate(alphas + [np.array([subchannels / (1.0 - discount)])]),
        sense='max',
        variable_names=names,
        constraint_names=row_names + [('resource',)],
    )
    logger.info("MUSMDP LP: slot %.4gs, per-slot discount %.8g, %d variables, %d constraints",
                slot, discount, problem.num_variables, problem.num_constraints)
    return SmdpModel(groups, subchannels, slot, discount, spaces, transitions, rewards,
                     durations, alphas, offsets, problem)


def build_musmdp_lp(groups: Sequence[UserGroup], subchannels: int, discount_per_second: float,
                    tail_tol: float = DEFAULT_TAIL_TOL) -> LpProblem:
    return build_musmdp_model(groups, subchannels, discount_per_second, tail_tol).problem


@dataclass
class SmdpSolution:
    objective: float
    per_user_objective: float
    slot: float
    discount: float
    occupancy: List[np.ndarray]
    lp: LpSolution

    def to_dict(self) -> Dict[str, Any]:
        return {
            'objective': self.objective,
            'per_user_objective': self.per_user_objective,
            'slot': self.slot,
            'discount_per_slot': self.discount,
            'num_variables': int(len(self.lp.x)),
            'iterations': int(self.lp.iterations),
            'method': self.lp.method,
            'groups': [{'y': occupancy.tolist()} for occupancy in self.occupancy],
        }


def solve_musmdp(groups: Sequence[UserGroup], subchannels: int, discount_per_second: float,
                 options: Optional[SolverOptions] = None,
                 tail_tol: float = DEFAULT_TAIL_TOL) -> Tuple[SmdpModel, SmdpSolution]:
    model = build_musmdp_model(groups, subchannels, discount_per_second, tail_tol)
    solution = solve(model.problem, options)
    occupancy = []
    for g, group in enumerate(model.groups):
        actions = group.video.num_layers + 1
        occupancy.append(np.vstack([solution.x[model.columns(g, a)] for a in range(actions)]))
    return model, SmdpSolution(
        objective=solution.objective,
        per_user_objective=solution.objective / model.total_users,
        slot=model.slot,
        discount=model.discount,
        occupancy=occupancy,
        lp=solution,
    )
