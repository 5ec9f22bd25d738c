"""
Experiment configuration.

One JSON document describes an experiment. Channels and QA specs are named
and groups refer to them by name. Defaults are filled in by pydantic and the
fully resolved document is written next to every run's artifacts.
"""

import hashlib
import json
import os
from logging import getLogger
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from channel import ChannelModel, doubly_stochastic_channel, tilted_channel
from core_model import VideoConfig
from errors import ConfigError
from lp_solver import SolverOptions
from qa_policy import QaSpec
from rb_lp import UserGroup
from schedulers import SchedulerSpec

logger = getLogger(__name__)

__all__ = [
    'OUTPUT_DIR_ENV',
    'ChannelSpec',
    'GroupSpec',
    'MusmdpOptions',
    'ExperimentConfig',
    'load_config',
    'resolve_output_dir',
]

OUTPUT_DIR_ENV = "SVC_SCHED_OUTPUT_DIR"

DEFAULT_SCHEDULERS = tuple(SchedulerSpec(kind=kind) for kind in ('QAA', 'BEAS', 'PF', 'BCF', 'LBF'))


class ChannelSpec(BaseModel):
    """Explicit matrix, or a generator: ``doubly_stochastic`` or ``tilted`` (needs ``target_avg``)."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    states: Tuple[float, ...]
    transition_matrix: Optional[Tuple[Tuple[float, ...], ...]] = None
    generator: Optional[Literal['doubly_stochastic', 'tilted']] = None
    target_avg: Optional[float] = None
    stay: float = Field(0.5, ge=0.0, lt=1.0)

    @model_validator(mode='after')
    def _one_source(self):
        if (self.transition_matrix is None) == (self.generator is None):
            raise ValueError("give either transition_matrix or generator")
        if self.generator == 'tilted' and self.target_avg is None:
            raise ValueError("the tilted generator needs target_avg")
        return self

    def build(self) -> ChannelModel:
        if self.transition_matrix is not None:
            return ChannelModel(states=self.states, transition_matrix=self.transition_matrix)
        if self.generator == 'doubly_stochastic':
            return doubly_stochastic_channel(self.states, self.stay)
        return tilted_channel(self.states, self.target_avg, self.stay)


class GroupSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    name: str
    count: int = Field(..., ge=1)
    qa: str
    channel: str
    initial_distribution: Optional[Tuple[float, ...]] = None


class MusmdpOptions(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    tail_tol: float = Field(1e-9, gt=0.0, lt=1e-3)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    video: VideoConfig
    channels: Dict[str, ChannelSpec]
    qa: Dict[str, QaSpec]
    groups: Tuple[GroupSpec, ...] = Field(..., min_length=1)
    subchannels: Tuple[int, ...] = Field(..., min_length=1)
    discount: float = Field(0.99, gt=0.0, lt=1.0)
    schedulers: Tuple[SchedulerSpec, ...] = DEFAULT_SCHEDULERS
    seeds: Tuple[int, ...] = (0,)
    horizon: int = Field(600, ge=1)
    warmup_slots: int = Field(0, ge=0)
    buffer_limits: Optional[Tuple[int, ...]] = None
    solver: SolverOptions = SolverOptions()
    musmdp: MusmdpOptions = MusmdpOptions()
    output_dir: str = "out"

    @model_validator(mode='after')
    def _references(self):
        for group in self.groups:
            if group.qa not in self.qa:
                raise ValueError(f"group {group.name!r} refers to unknown qa {group.qa!r}")
            if group.channel not in self.channels:
                raise ValueError(f"group {group.name!r} refers to unknown channel {group.channel!r}")
        if any(m < 0 for m in self.subchannels):
            raise ValueError("subchannels must be non-negative")
        if any(seed < 0 for seed in self.seeds):
            raise ValueError("seeds must be non-negative")
        if self.warmup_slots >= self.horizon:
            raise ValueError("warmup_slots must be smaller than horizon")
        return self

    @property
    def num_users(self) -> int:
        return sum(group.count for group in self.groups)

    def user_groups(self) -> List[UserGroup]:
        channels = {name: spec.build() for name, spec in self.channels.items()}
        return [
            UserGroup(
                name=group.name,
                count=group.count,
                qa=self.qa[group.qa],
                channel=channels[group.channel],
                video=self.video,
                initial_distribution=group.initial_distribution,
            )
            for group in self.groups
        ]

    def resolved(self) -> Dict:
        return self.model_dump(mode='json')

    def config_hash(self) -> str:
        """SHA-256 of the resolved document with sorted keys."""
        return _digest(self.resolved())

    def model_hash(self) -> str:
        """SHA-256 of the parts that determine the LP models and their solutions."""
        return _digest(self.model_dump(mode='json', include=MODEL_FIELDS))


MODEL_FIELDS = {'video', 'channels', 'qa', 'groups', 'subchannels', 'discount', 'solver', 'musmdp'}


def _digest(document: Dict) -> str:
    text = json.dumps(document, sort_keys=True)
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def load_config(path: Union[str, Path], seed: Optional[int] = None) -> ExperimentConfig:
    """Read and validate a config file; ``seed`` replaces the seed list."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
    except FileNotFoundError:
        raise ConfigError("config file not found", {'path': str(path)})
    except json.JSONDecodeError as exc:
        raise ConfigError("config file is not valid JSON",
                          {'path': str(path), 'line': exc.lineno, 'column': exc.colno})
    if seed is not None and isinstance(data, dict):
        data['seeds'] = [seed]
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError.from_validation(exc)
    logger.info("loaded config %s (%d users, M=%s)", path, config.num_users, list(config.subchannels))
    return config


def resolve_output_dir(config: ExperimentConfig, override: Optional[str] = None) -> Path:
    """--out first, then $SVC_SCHED_OUTPUT_DIR, then the config's output_dir."""
    if override:
        return Path(override)
    return Path(os.getenv(OUTPUT_DIR_ENV) or config.output_dir)
