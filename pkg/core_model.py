"""
Layered (SVC) video model.
Buffer representation, playback semantics and the QoE reward function.
"""

import math
from functools import lru_cache
from logging import getLogger
from typing import NamedTuple, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import InvalidArgumentError

logger = getLogger(__name__)

__all__ = [
    'VideoConfig',
    'PlaybackResult',
    'playback_reward',
    'decodable_prefix',
    'playback_step',
    'index_buffer',
    'unindex_buffer',
    'is_monotone',
    'buffer_grid',
    'playback_table',
]

DEFAULT_QOE_PHI = 0.16
DEFAULT_QOE_THETA = 0.66

BufferState = Tuple[int, ...]


class VideoConfig(BaseModel):
    """Per-layer rates, segment duration, buffer limit and QoE constants.

    ``layer_rates`` are in Mbps; one sub-segment of layer l holds
    ``layer_rates[l] * segment_duration`` Mb. ``buffer_limit`` is counted in
    sub-segments per layer.
    """

    model_config = ConfigDict(frozen=True)

    layer_rates: Tuple[float, ...] = Field(..., min_length=1)
    segment_duration: float = Field(1.0, gt=0)
    buffer_limit: int = Field(20, ge=1)
    qoe_phi: float = DEFAULT_QOE_PHI
    qoe_theta: float = DEFAULT_QOE_THETA
    rebuffer_penalty: float = 0.0

    @field_validator('layer_rates')
    @classmethod
    def _positive_rates(cls, rates):
        if any(rate <= 0 for rate in rates):
            raise ValueError("all layer rates must be positive")
        return tuple(float(rate) for rate in rates)

    @model_validator(mode='after')
    def _check_penalty(self):
        base_only = playback_reward(self.layer_rates[0], self)
        if self.rebuffer_penalty > base_only:
            logger.warning(
                "rebuffer_penalty %.4f exceeds the base-layer-only reward %.4f",
                self.rebuffer_penalty, base_only)
        return self

    @property
    def num_layers(self) -> int:
        return len(self.layer_rates)

    @property
    def max_rate(self) -> float:
        return float(sum(self.layer_rates))

    @property
    def radix(self) -> int:
        return self.buffer_limit + 1

    @property
    def num_buffer_states(self) -> int:
        return self.radix ** self.num_layers

    @property
    def sub_segment_sizes(self) -> np.ndarray:
        return np.asarray(self.layer_rates) * self.segment_duration


class PlaybackResult(NamedTuple):
    next_buffer: BufferState
    reward: float
    rebuffered: bool


def playback_reward(played_rate: float, video: VideoConfig, rebuffering: bool = False) -> float:
    """QoE reward of one played segment.

    Args:
        played_rate (float): Sum of the rates of the decodable layers.
        video (VideoConfig): Supplies R_max, phi, theta and r_pen.
        rebuffering (bool): Stall in this slot.

    Returns:
        float: ``r_pen`` on a stall, else exp(-phi * (R_p/R_max)^-theta + phi).
    """
    if rebuffering:
        return video.rebuffer_penalty
    if played_rate <= 0:
        raise InvalidArgumentError(
            "played rate must be positive when not rebuffering",
            {'played_rate': played_rate})
    ratio = played_rate / video.max_rate
    if ratio > 1.0 + 1e-12:
        raise InvalidArgumentError(
            "played rate exceeds the full-quality rate",
            {'played_rate': played_rate, 'max_rate': video.max_rate})
    phi = video.qoe_phi
    return math.exp(-phi * ratio ** (-video.qoe_theta) + phi)


def decodable_prefix(b: Sequence[int]) -> int:
    """Number of leading layers with at least one buffered sub-segment."""
    count = 0
    for occupancy in b:
        if occupancy <= 0:
            break
        count += 1
    return count


def playback_step(b: Sequence[int], video: VideoConfig) -> PlaybackResult:
    """Play one segment from buffer ``b``.

    Only the decodable prefix is consumed; layers above a gap stay put.
    """
    prefix = decodable_prefix(b)
    if prefix == 0:
        return PlaybackResult(tuple(b), playback_reward(0.0, video, True), True)
    next_buffer = tuple(
        occupancy - 1 if layer < prefix else occupancy
        for layer, occupancy in enumerate(b))
    played = sum(video.layer_rates[:prefix])
    return PlaybackResult(next_buffer, playback_reward(played, video), False)


def _check_buffer(b: Sequence[int], video: VideoConfig):
    if len(b) != video.num_layers:
        raise InvalidArgumentError(
            "buffer has the wrong number of layers",
            {'buffer': list(b), 'num_layers': video.num_layers})
    for occupancy in b:
        if occupancy < 0 or occupancy > video.buffer_limit:
            raise InvalidArgumentError(
                "buffer component out of range",
                {'buffer': list(b), 'buffer_limit': video.buffer_limit})


def index_buffer(b: Sequence[int], video: VideoConfig) -> int:
    """Mixed-radix index: sum_l b_l * (b_max+1)^(L-l)."""
    _check_buffer(b, video)
    index = 0
    for occupancy in b:
        index = index * video.radix + int(occupancy)
    return index


def unindex_buffer(index: int, video: VideoConfig) -> BufferState:
    if index < 0 or index >= video.num_buffer_states:
        raise InvalidArgumentError(
            "buffer index out of range",
            {'index': index, 'num_buffer_states': video.num_buffer_states})
    digits = []
    for _ in range(video.num_layers):
        index, digit = divmod(index, video.radix)
        digits.append(digit)
    return tuple(reversed(digits))


def is_monotone(b: Sequence[int]) -> bool:
    return all(b[layer] >= b[layer + 1] for layer in range(len(b) - 1))


@lru_cache(maxsize=32)
def buffer_grid(video: VideoConfig) -> np.ndarray:
    """All buffer states as an (n, L) integer array in index order."""
    shape = (video.radix,) * video.num_layers
    grid = np.array(np.unravel_index(np.arange(video.num_buffer_states), shape)).T
    grid.setflags(write=False)
    return grid


class PlaybackTable(NamedTuple):
    next_index: np.ndarray
    reward: np.ndarray
    rebuffered: np.ndarray
    prefix: np.ndarray


@lru_cache(maxsize=32)
def playback_table(video: VideoConfig) -> PlaybackTable:
    """Vectorized ``playback_step`` over every buffer index."""
    grid = buffer_grid(video)
    positive = grid > 0
    prefix = np.cumprod(positive, axis=1).sum(axis=1)
    consumed = np.arange(video.num_layers)[None, :] < prefix[:, None]
    next_grid = grid - consumed
    shape = (video.radix,) * video.num_layers
    next_index = np.ravel_multi_index(tuple(next_grid.T), shape)

    cumulative = np.concatenate([[0.0], np.cumsum(video.layer_rates)])
    played = cumulative[prefix]
    reward = np.full(len(grid), video.rebuffer_penalty, dtype=float)
    playing = prefix > 0
    ratio = played[playing] / video.max_rate
    phi = video.qoe_phi
    reward[playing] = np.exp(-phi * ratio ** (-video.qoe_theta) + phi)

    table = PlaybackTable(next_index, reward, prefix == 0, prefix)
    for array in table:
        array.setflags(write=False)
    return table
