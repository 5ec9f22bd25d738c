"""
Quality-adaptation (QA) policies and their policy matrices.

A QA decides which sub-segments a user requests in one slot. Three families
are supported:

- DBP (diagonal buffer policy): fill a layer until its lead over the layer
  above reaches the pre-fetch threshold, then move up.
- CBP (channel based policy): the split between base and enhancement layers
  depends on the current channel state.
- BPP (base layer priority policy): base layers only while the base buffer
  is low, full-quality segments afterwards.

Decisions are taken against the buffer as it will be after this slot's
playback, because a sub-segment downloaded in a slot cannot be played in the
same slot. A request is feasible when the layer stays within the buffer limit
and the buffer stays prefix-monotone; an infeasible choice cascades to the
layers above, then to the layers below, and the slot ends when nothing fits.
"""

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from logging import getLogger
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.sparse import csr_matrix

from channel import ChannelModel, sub_segments_deliverable
from core_model import VideoConfig, buffer_grid, playback_table
from errors import InvalidArgumentError

logger = getLogger(__name__)

__all__ = [
    'QaKind',
    'CbpRule',
    'QaSpec',
    'PolicyMatrix',
    'default_cbp_rules',
    'slot_budget',
    'qa_decide',
    'build_policy_matrix',
    'build_policy_matrices',
    'build_passive_matrix',
]


class QaKind(str, Enum):
    DBP = "DBP"
    CBP = "CBP"
    BPP = "BPP"


class CbpRule(BaseModel):
    """Budget rule of CBP for one channel state."""

    model_config = ConfigDict(frozen=True)

    mode: Literal['base_only', 'split', 'full_quality']
    base_share: float = Field(2.0 / 3.0, ge=0.0, le=1.0)


def default_cbp_rules(num_states: int) -> Tuple[CbpRule, ...]:
    """Lower half of the states base-only, best state full quality, the rest split 2/3."""
    if num_states == 1:
        return (CbpRule(mode='full_quality'),)
    base_only = max(1, num_states // 2)
    rules = []
    for state in range(num_states):
        if state == num_states - 1:
            rules.append(CbpRule(mode='full_quality'))
        elif state < base_only:
            rules.append(CbpRule(mode='base_only'))
        else:
            rules.append(CbpRule(mode='split'))
    return tuple(rules)


class QaSpec(BaseModel):
    """One QA family and its parameters.

    ``threshold``/``thresholds`` are DBP pre-fetch thresholds in seconds,
    ``switch_fraction`` is the BPP x (fraction of the buffer limit) and
    ``cbp_rules`` lists one :class:`CbpRule` per channel state.
    """

    model_config = ConfigDict(frozen=True)

    kind: QaKind
    threshold: float = Field(10.0, ge=0.0)
    thresholds: Optional[Tuple[float, ...]] = None
    switch_fraction: float = Field(0.5, gt=0.0, le=1.0)
    cbp_rules: Optional[Tuple[CbpRule, ...]] = None

    @field_validator('thresholds')
    @classmethod
    def _non_negative(cls, values):
        if values is not None and any(value < 0 for value in values):
            raise ValueError("thresholds must be non-negative")
        return values

    @classmethod
    def dbp(cls, threshold: float) -> "QaSpec":
        return cls(kind=QaKind.DBP, threshold=threshold)

    @classmethod
    def bpp(cls, switch_fraction: float) -> "QaSpec":
        return cls(kind=QaKind.BPP, switch_fraction=switch_fraction)

    @classmethod
    def cbp(cls, rules: Optional[Sequence[CbpRule]] = None) -> "QaSpec":
        return cls(kind=QaKind.CBP, cbp_rules=tuple(rules) if rules else None)

    @property
    def label(self) -> str:
        if self.kind == QaKind.DBP:
            return f"DBP-{self.threshold:g}s" if self.thresholds is None else "DBP"
        if self.kind == QaKind.BPP:
            return f"BPP-{self.switch_fraction * 100:g}"
        return "CBP"

    def pair_thresholds(self, video: VideoConfig) -> np.ndarray:
        """DBP thresholds per layer pair, in sub-segments."""
        pairs = video.num_layers - 1
        seconds = self.thresholds if self.thresholds is not None else (self.threshold,) * pairs
        if len(seconds) != pairs:
            raise InvalidArgumentError(
                "DBP needs one threshold per layer pair",
                {'thresholds': list(seconds), 'layer_pairs': pairs})
        return np.array([round(value / video.segment_duration) for value in seconds], dtype=int)

    def rules_for(self, num_states: int) -> Tuple[CbpRule, ...]:
        if self.cbp_rules is None:
            return default_cbp_rules(num_states)
        if len(self.cbp_rules) != num_states:
            raise InvalidArgumentError(
                "CBP rule table must cover every channel state",
                {'rules': len(self.cbp_rules), 'channel_states': num_states})
        return self.cbp_rules


def slot_budget(rate: float, video: VideoConfig, slot: Optional[float] = None) -> float:
    """Slot capacity counted in base-layer sub-segments.

    With equal layer rates this is the whole number of sub-segments the slot
    carries. With unequal rates the capacity stays fractional and each layer
    consumes its size relative to the base layer.
    """
    slot = video.segment_duration if slot is None else slot
    sizes = video.sub_segment_sizes
    if np.all(sizes == sizes[0]):
        return sub_segments_deliverable(rate, slot, sizes[0])
    return rate * slot / sizes[0]


def _full_quality_layer(current: np.ndarray) -> int:
    top = current[-1]
    return int(np.flatnonzero(current == top)[0])


def _cascade(first: int, num_layers: int) -> List[int]:
    return list(range(first, num_layers)) + list(range(first - 1, -1, -1))


def _preferences(qa: QaSpec, current: np.ndarray, picks: int, rule: Optional[CbpRule],
                 budget: float, pair_thresholds: Optional[np.ndarray], video: VideoConfig) -> List[int]:
    num_layers = video.num_layers
    if qa.kind == QaKind.DBP:
        first = num_layers - 1
        for layer in range(num_layers - 1):
            if current[layer] - current[layer + 1] < pair_thresholds[layer]:
                first = layer
                break
        return _cascade(first, num_layers)

    if qa.kind == QaKind.BPP:
        if current[0] < qa.switch_fraction * video.buffer_limit:
            return _cascade(0, num_layers)
        return _cascade(_full_quality_layer(current), num_layers)

    if rule.mode == 'base_only':
        return _cascade(0, num_layers)
    if rule.mode == 'full_quality':
        return _cascade(_full_quality_layer(current), num_layers)
    base_picks = math.floor(budget * rule.base_share + 1e-9)
    if picks < base_picks or num_layers == 1:
        return _cascade(0, num_layers)
    return list(range(1, num_layers)) + [0]


def qa_decide(qa: QaSpec, b: Sequence[int], channel_state: int, budget: float,
              video: VideoConfig, num_channel_states: Optional[int] = None) -> np.ndarray:
    """Sub-segments requested per layer in one slot.

    Args:
        qa (QaSpec): QA family and parameters.
        b (Sequence[int]): Buffer at the start of the slot.
        channel_state (int): Index of the current channel state (CBP only).
        budget (float): Slot capacity in base-layer sub-segments.
        video (VideoConfig): Layer sizes and buffer limit.
        num_channel_states (int): Size of the channel, needed to resolve the
            default CBP rule table.

    Returns:
        np.ndarray: Download vector d, one count per layer.
    """
    num_layers = video.num_layers
    buffer = np.asarray(b, dtype=int)
    prefix = int(np.cumprod(buffer > 0).sum())
    consumed = (np.arange(num_layers) < prefix).astype(int)
    current = buffer - consumed
    room = video.buffer_limit - consumed
    costs = np.asarray(video.layer_rates) / video.layer_rates[0]

    rule = None
    pair_thresholds = None
    if qa.kind == QaKind.CBP:
        if num_channel_states is None and qa.cbp_rules is None:
            raise InvalidArgumentError("default CBP rules need the number of channel states")
        states = num_channel_states if num_channel_states is not None else len(qa.cbp_rules)
        rule = qa.rules_for(states)[channel_state]
    elif qa.kind == QaKind.DBP:
        pair_thresholds = qa.pair_thresholds(video)

    downloads = np.zeros(num_layers, dtype=int)
    remaining = float(budget)
    picks = 0
    while remaining > 0:
        layer = None
        for candidate in _preferences(qa, current, picks, rule, budget, pair_thresholds, video):
            if current[candidate] + 1 > room[candidate]:
                continue
            if candidate > 0 and current[candidate] + 1 > current[candidate - 1]:
                continue
            layer = candidate
            break
        if layer is None or costs[layer] > remaining + 1e-9:
            break
        downloads[layer] += 1
        current[layer] += 1
        remaining -= costs[layer]
        picks += 1
    return downloads


@dataclass(frozen=True)
class PolicyMatrix:
    """Binary matrix stored as a row -> column map.

    ``targets[i]`` is the only nonzero column of row i and ``downloads[i]`` the
    request vector that produced it.
    """

    targets: np.ndarray
    downloads: np.ndarray
    budget: float = 0.0

    def __post_init__(self):
        if self.targets.ndim != 1 or self.downloads.shape[0] != len(self.targets):
            raise InvalidArgumentError("policy matrix rows and downloads disagree")
        if len(self.targets) and (self.targets.min() < 0 or self.targets.max() >= len(self.targets)):
            raise InvalidArgumentError("policy matrix target out of range")

    def __len__(self) -> int:
        return len(self.targets)

    def to_sparse(self) -> csr_matrix:
        n = len(self.targets)
        return csr_matrix((np.ones(n), (np.arange(n), self.targets)), shape=(n, n))


def build_policy_matrix(qa: QaSpec, video: VideoConfig, channel: ChannelModel, c: int,
                        slot: Optional[float] = None) -> PolicyMatrix:
    """Policy matrix of ``qa`` while the channel sits in state ``c``."""
    if not 0 <= c < channel.num_states:
        raise InvalidArgumentError("channel state out of range", {'state': c})
    budget = slot_budget(channel.states[c], video, slot)
    grid = buffer_grid(video)
    playback = playback_table(video)
    downloads = np.zeros_like(grid)
    for index, buffer in enumerate(grid):
        downloads[index] = qa_decide(qa, buffer, c, budget, video, channel.num_states)
    consumed = np.arange(video.num_layers)[None, :] < playback.prefix[:, None]
    next_grid = grid - consumed + downloads
    shape = (video.radix,) * video.num_layers
    targets = np.ravel_multi_index(tuple(next_grid.T), shape)
    logger.debug("policy matrix %s state %d: budget %s, %d rows",
                 qa.label, c, budget, len(targets))
    return PolicyMatrix(targets=targets, downloads=downloads, budget=budget)


@lru_cache(maxsize=16)
def build_policy_matrices(qa: QaSpec, video: VideoConfig, channel: ChannelModel) -> Tuple[PolicyMatrix, ...]:
    """One policy matrix per channel state, cached per (qa, video, channel)."""
    return tuple(build_policy_matrix(qa, video, channel, c) for c in range(channel.num_states))


def build_passive_matrix(video: VideoConfig) -> PolicyMatrix:
    """P0: pure playback; stalled rows are self-loops."""
    playback = playback_table(video)
    downloads = np.zeros((video.num_buffer_states, video.num_layers), dtype=int)
    return PolicyMatrix(targets=np.array(playback.next_index), downloads=downloads)
