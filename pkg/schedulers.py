"""
Per-slot user selection.

- QAA ranks full states from the RB primal support and reduced costs and
  schedules the M users whose states rank highest.
- BEAS tracks a smoothed buffer-trend level per user and needs no QA or LP.
- PF, BCF and LBF are the channel-only and buffer-only baselines.

Every scheduler returns exactly min(M, N) distinct user indices; ties are
broken by user index.
"""

from collections import deque
from dataclasses import dataclass, field
from logging import getLogger
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from errors import InvalidArgumentError, SolverError

logger = getLogger(__name__)

__all__ = [
    'SUPPORT_TOL',
    'SchedulerSpec',
    'PriorityRanking',
    'SlotView',
    'BeasState',
    'reachable_states',
    'prune_unreachable',
    'rank_states',
    'qaa_rank',
    'qaa_schedule',
    'beas_select',
    'beas_update',
    'beas_step',
    'playback_drain',
    'pf_update',
    'baseline_schedule',
    'Scheduler',
    'QaaScheduler',
    'BeasScheduler',
    'BaselineScheduler',
]

SUPPORT_TOL = 1e-12
GAMMA_DECIMALS = 9


class SchedulerSpec(BaseModel):
    """Scheduler kind and its knobs.

    ``epsilon``, ``b_thresh``, ``h_slope``/``h_intercept`` (h(x) = slope * x +
    intercept seconds) and ``initial_level`` belong to BEAS, ``pf_time_constant``
    (slots) to PF. With ``h_intercept`` left at 0 a served user never drops
    below ``b_thresh``; set it to ``-playback_drain(...)`` to charge playout.
    """

    model_config = ConfigDict(frozen=True)

    kind: Literal['QAA', 'BEAS', 'PF', 'BCF', 'LBF']
    epsilon: float = Field(0.1, ge=0.0, lt=1.0)
    b_thresh: float = 0.0
    h_slope: float = 1.0
    h_intercept: float = 0.0
    initial_level: float = 0.0
    pf_time_constant: float = Field(50.0, gt=1.0)

    @property
    def label(self) -> str:
        return self.kind


# ======================
# QAA
# ======================

def reachable_states(alpha: np.ndarray, transitions: Sequence, occupancy: Sequence[np.ndarray],
                     tol: float = SUPPORT_TOL) -> np.ndarray:
    """Closure of support(alpha) along edges l -> s with h^a_ls > 0 and x^a_l > tol.

    Args:
        alpha (np.ndarray): Initial distribution.
        transitions (Sequence): One sparse matrix per action.
        occupancy (Sequence[np.ndarray]): Primal values per action.
        tol (float): Support threshold.

    Returns:
        np.ndarray: Boolean mask of reachable states.
    """
    size = len(alpha)
    seen = np.zeros(size, dtype=bool)
    queue = deque(np.flatnonzero(alpha > 0))
    seen[list(queue)] = True
    rows = [matrix.tocsr() for matrix in transitions]
    while queue:
        state = queue.popleft()
        for matrix, x in zip(rows, occupancy):
            if x[state] <= tol:
                continue
            start, end = matrix.indptr[state], matrix.indptr[state + 1]
            for target, weight in zip(matrix.indices[start:end], matrix.data[start:end]):
                if weight > 0 and not seen[target]:
                    seen[target] = True
                    queue.append(target)
    return seen


def prune_unreachable(x0: np.ndarray, x1: np.ndarray, h0=None, h1=None,
                      alpha: Optional[np.ndarray] = None, tol: float = SUPPORT_TOL,
                      verify: bool = False) -> np.ndarray:
    """States kept for ranking: those with x0 > 0 or x1 > 0.

    With ``verify`` the kept set is checked against the reachable closure of
    the initial distribution and a mismatch raises :class:`SolverError`.
    """
    retained = (x0 > tol) | (x1 > tol)
    if verify:
        if h0 is None or h1 is None or alpha is None:
            raise InvalidArgumentError("verification needs h0, h1 and alpha")
        reachable = reachable_states(alpha, [h0, h1], [x0, x1], tol)
        if not np.array_equal(retained, reachable):
            raise SolverError(
                "LP support differs from the reachable set",
                {'support_only': np.flatnonzero(retained & ~reachable).tolist(),
                 'reachable_only': np.flatnonzero(reachable & ~retained).tolist()})
    logger.debug("pruned %d of %d states", int((~retained).sum()), len(retained))
    return retained


def _split(states: np.ndarray, num_buffer_states: Optional[int]):
    if num_buffer_states is None:
        return np.zeros_like(states), states
    return np.divmod(states, num_buffer_states)


def rank_states(x0, x1, gamma0, gamma1, num_buffer_states: Optional[int] = None,
                tol: float = SUPPORT_TOL) -> np.ndarray:
    """Single-group ranking Q = [Q1, Q0].

    Q1 = {x1 > 0} by descending gamma0, Q0 = {x0 > 0, x1 = 0} by ascending
    gamma1. Ties go to the lower buffer index, then the higher channel state.
    """
    ranking = _merge_ranking([(np.asarray(x0), np.asarray(x1), np.asarray(gamma0),
                               np.asarray(gamma1), num_buffer_states)], tol)
    return np.array([state for _, state in ranking], dtype=int)


def _merge_ranking(groups, tol: float) -> List[Tuple[int, int]]:
    keys = {name: [] for name in ('group', 'state', 'active', 'gamma', 'buffer', 'channel')}
    for g, (x0, x1, gamma0, gamma1, num_buffer_states) in enumerate(groups):
        active = x1 > tol
        passive = (x0 > tol) & ~active
        states = np.flatnonzero(active | passive)
        channel, buffer = _split(states, num_buffer_states)
        gamma = np.where(active[states], -gamma0[states], gamma1[states])
        keys['group'].append(np.full(len(states), g))
        keys['state'].append(states)
        keys['active'].append(active[states])
        keys['gamma'].append(np.round(gamma, GAMMA_DECIMALS))
        keys['buffer'].append(buffer)
        keys['channel'].append(channel)
    merged = {name: np.concatenate(values) for name, values in keys.items()}
    order = np.lexsort((merged['group'], -merged['channel'], merged['buffer'],
                        merged['gamma'], ~merged['active']))
    return [(int(merged['group'][i]), int(merged['state'][i])) for i in order]


@dataclass(frozen=True)
class PriorityRanking:
    """Global QAA order over (group, full state) pairs.

    ``positions[g][s]`` is the 1-based rank of state s of group g, 0 when the
    state was pruned. The normalized index is position / number of ranked
    states, and pruned states get index 1.
    """

    order: Tuple[Tuple[int, int], ...]
    num_states: Tuple[int, ...]
    num_buffer_states: Tuple[int, ...]
    num_active: int
    positions: Tuple[np.ndarray, ...] = field(init=False, compare=False)

    def __post_init__(self):
        positions = [np.zeros(size, dtype=int) for size in self.num_states]
        for rank, (group, state) in enumerate(self.order, start=1):
            positions[group][state] = rank
        object.__setattr__(self, 'positions', tuple(positions))

    def __len__(self) -> int:
        return len(self.order)

    def retained(self, group: int = 0) -> np.ndarray:
        return self.positions[group] > 0

    def priority_index(self, group: int = 0) -> np.ndarray:
        positions = self.positions[group]
        return np.where(positions > 0, positions / max(len(self.order), 1), 1.0)

    def states(self, group: int = 0) -> np.ndarray:
        return np.array([state for g, state in self.order if g == group], dtype=int)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'order': [list(pair) for pair in self.order],
            'num_states': list(self.num_states),
            'num_buffer_states': list(self.num_buffer_states),
            'num_active': self.num_active,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PriorityRanking":
        return cls(
            order=tuple((int(g), int(s)) for g, s in data['order']),
            num_states=tuple(int(n) for n in data['num_states']),
            num_buffer_states=tuple(int(n) for n in data['num_buffer_states']),
            num_active=int(data['num_active']),
        )


def qaa_rank(group_solutions: Sequence, tol: float = SUPPORT_TOL) -> PriorityRanking:
    """Ranking from solved RB groups (objects with x0, x1, gamma0, gamma1, space).

    The groups are merged into one list since their reduced costs come from
    the same LP and share a scale.
    """
    groups = [(sol.x0, sol.x1, sol.gamma0, sol.gamma1, sol.space.num_buffer_states)
              for sol in group_solutions]
    order = _merge_ranking(groups, tol)
    num_active = sum(int((sol.x1 > tol).sum()) for sol in group_solutions)
    ranking = PriorityRanking(
        order=tuple(order),
        num_states=tuple(len(sol.x0) for sol in group_solutions),
        num_buffer_states=tuple(sol.space.num_buffer_states for sol in group_solutions),
        num_active=num_active,
    )
    logger.info("QAA ranking: %d ranked states, %d in Q1", len(ranking), num_active)
    return ranking


def qaa_schedule(ranking: PriorityRanking, user_groups: np.ndarray, user_states: np.ndarray,
                 subchannels: int) -> np.ndarray:
    """The ``subchannels`` users whose current states rank highest.

    Users in pruned states come last, ordered by lower buffer index then
    higher channel state; remaining ties go to the lower user index.
    """
    user_groups = np.asarray(user_groups, dtype=int)
    user_states = np.asarray(user_states, dtype=int)
    users = np.arange(len(user_states))
    positions = np.array([ranking.positions[g][s] for g, s in zip(user_groups, user_states)], dtype=int)
    primary = np.where(positions > 0, positions, len(ranking) + 1)
    buffer_sizes = np.asarray(ranking.num_buffer_states)[user_groups]
    channel, buffer = np.divmod(user_states, buffer_sizes)
    order = np.lexsort((users, -channel, buffer, primary))
    return order[:min(subchannels, len(users))]


# ======================
# BEAS
# ======================

@dataclass
class BeasState:
    levels: np.ndarray
    spec: SchedulerSpec

    @classmethod
    def start(cls, num_users: int, spec: SchedulerSpec) -> "BeasState":
        return cls(np.full(num_users, spec.initial_level, dtype=float), spec)


def _top(scores: np.ndarray, candidates: np.ndarray, count: int, descending: bool) -> np.ndarray:
    keyed = -scores[candidates] if descending else scores[candidates]
    return candidates[np.lexsort((candidates, keyed))][:count]


def beas_select(state: BeasState, channel_rates: np.ndarray, base_counts: np.ndarray,
                subchannels: int) -> np.ndarray:
    """Users below the threshold by best channel, the rest by fewest base layers."""
    count = min(subchannels, len(state.levels))
    low = np.flatnonzero(state.levels < state.spec.b_thresh)
    if len(low) >= count:
        return _top(np.asarray(channel_rates, dtype=float), low, count, descending=True)
    rest = np.flatnonzero(state.levels >= state.spec.b_thresh)
    fill = _top(np.asarray(base_counts, dtype=float), rest, count - len(low), descending=False)
    return np.concatenate([low, fill]).astype(int)


def playback_drain(num_layers: int, slot: float, segment_duration: float) -> float:
    """Sub-segments played out per slot when every layer is decodable.

    Used as a negative ``h_intercept`` this makes a served user's level follow
    net buffer growth instead of raw deliveries.
    """
    return num_layers * slot / segment_duration


def beas_update(state: BeasState, scheduled: np.ndarray, deliveries: np.ndarray,
                slot: float, segment_duration: float) -> BeasState:
    """Unscheduled levels decay by slot, scheduled ones grow with h(delivered)."""
    eps = state.spec.epsilon
    levels = (1 - eps) * state.levels - eps * slot
    delivered = np.asarray(deliveries, dtype=float)[scheduled]
    h = state.spec.h_slope * delivered + state.spec.h_intercept
    levels[scheduled] = (1 - eps) * state.levels[scheduled] + eps * segment_duration * h
    return BeasState(levels, state.spec)


def beas_step(state: BeasState, channel_rates: np.ndarray, base_counts: np.ndarray,
              subchannels: int, deliveries: np.ndarray, slot: float = 1.0,
              segment_duration: float = 1.0) -> Tuple[np.ndarray, BeasState]:
    """One BEAS slot.

    Args:
        state (BeasState): Levels before the slot.
        channel_rates (np.ndarray): Current rate of every user.
        base_counts (np.ndarray): Buffered base-layer sub-segments per user.
        subchannels (int): M.
        deliveries (np.ndarray): Sub-segments each user would receive if
            scheduled this slot.
        slot (float): Slot duration in seconds.
        segment_duration (float): Segment duration in seconds.

    Returns:
        tuple: (scheduled users, next state).
    """
    scheduled = beas_select(state, channel_rates, base_counts, subchannels)
    return scheduled, beas_update(state, scheduled, deliveries, slot, segment_duration)


# ======================
# Baselines
# ======================

def pf_update(averages: np.ndarray, channel_rates: np.ndarray, scheduled: np.ndarray,
              time_constant: float = 50.0) -> np.ndarray:
    """Throughput EMA: served users add their channel rate, the rest add 0."""
    served = np.zeros(len(averages))
    served[scheduled] = np.asarray(channel_rates, dtype=float)[scheduled]
    weight = 1.0 / time_constant
    return (1 - weight) * np.asarray(averages, dtype=float) + weight * served


def baseline_schedule(kind: str, channel_rates: np.ndarray, subchannels: int,
                      averages: Optional[np.ndarray] = None,
                      base_counts: Optional[np.ndarray] = None) -> np.ndarray:
    """PF: top-M by rate / average. BCF: top-M by rate. LBF: bottom-M by base layers."""
    rates = np.asarray(channel_rates, dtype=float)
    users = np.arange(len(rates))
    count = min(subchannels, len(users))
    if kind == 'PF':
        if averages is None:
            raise InvalidArgumentError("PF needs the throughput averages")
        score = rates / np.maximum(np.asarray(averages, dtype=float), 1e-12)
        return _top(score, users, count, descending=True)
    if kind == 'BCF':
        return _top(rates, users, count, descending=True)
    if kind == 'LBF':
        if base_counts is None:
            raise InvalidArgumentError("LBF needs the base-layer occupancies")
        return _top(np.asarray(base_counts, dtype=float), users, count, descending=False)
    raise InvalidArgumentError(f"unknown baseline {kind!r}")


# ======================
# Stateful wrappers used by the simulator
# ======================

@dataclass
class SlotView:
    """What a scheduler may look at in one slot."""

    channel_rates: np.ndarray
    base_counts: np.ndarray
    user_groups: np.ndarray
    user_states: np.ndarray
    deliveries: np.ndarray


class Scheduler:
    spec: SchedulerSpec

    def select(self, view: SlotView, subchannels: int) -> np.ndarray:
        raise NotImplementedError

    def observe(self, view: SlotView, scheduled: np.ndarray):
        pass


class QaaScheduler(Scheduler):
    def __init__(self, ranking: PriorityRanking, spec: Optional[SchedulerSpec] = None):
        self.ranking = ranking
        self.spec = spec or SchedulerSpec(kind='QAA')

    def swap_ranking(self, ranking: PriorityRanking):
        """Use a re-solved ranking from the next slot on."""
        if ranking.num_states != self.ranking.num_states:
            raise InvalidArgumentError(
                "replacement ranking covers different state spaces",
                {'current': list(self.ranking.num_states), 'new': list(ranking.num_states)})
        self.ranking = ranking

    def select(self, view: SlotView, subchannels: int) -> np.ndarray:
        return qaa_schedule(self.ranking, view.user_groups, view.user_states, subchannels)


class BeasScheduler(Scheduler):
    def __init__(self, spec: SchedulerSpec, num_users: int, slot: float, segment_duration: float):
        self.spec = spec
        self.state = BeasState.start(num_users, spec)
        self.slot = slot
        self.segment_duration = segment_duration

    def select(self, view: SlotView, subchannels: int) -> np.ndarray:
        return beas_select(self.state, view.channel_rates, view.base_counts, subchannels)

    def observe(self, view: SlotView, scheduled: np.ndarray):
        self.state = beas_update(self.state, scheduled, view.deliveries, self.slot, self.segment_duration)


class BaselineScheduler(Scheduler):
    def __init__(self, spec: SchedulerSpec, average_rates: Optional[np.ndarray] = None):
        self.spec = spec
        self.averages = None if average_rates is None else np.array(average_rates, dtype=float)
        if spec.kind == 'PF' and self.averages is None:
            raise InvalidArgumentError("PF needs initial throughput averages")

    def select(self, view: SlotView, subchannels: int) -> np.ndarray:
        return baseline_schedule(self.spec.kind, view.channel_rates, subchannels,
                                 self.averages, view.base_counts)

    def observe(self, view: SlotView, scheduled: np.ndarray):
        if self.spec.kind == 'PF':
            self.averages = pf_update(self.averages, view.channel_rates, scheduled,
                                      self.spec.pf_time_constant)
