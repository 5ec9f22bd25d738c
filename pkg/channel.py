"""
Finite-state Markov channel model.
Validation, sampling, stationary statistics, the per-slot sub-segment budget,
and fixture generators for unpublished channel matrices.
"""

import math
from dataclasses import dataclass, field
from logging import getLogger
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.optimize import brentq
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from errors import ChannelValidationError, InvalidArgumentError

logger = getLogger(__name__)

__all__ = [
    'ChannelModel',
    'ChannelDiagnostics',
    'validate',
    'require_valid',
    'stationary_distribution',
    'avg_rate',
    'sub_segments_deliverable',
    'sample_next',
    'sample_next_many',
    'doubly_stochastic_channel',
    'tilted_channel',
]

STOCHASTIC_TOL = 1e-12


class ChannelModel(BaseModel):
    """Rates (Mbps per subchannel) and their row-stochastic transition matrix.

    Only the shape is checked at construction; the stochastic properties are
    reported by :func:`validate`.
    """

    model_config = ConfigDict(frozen=True)

    states: Tuple[float, ...] = Field(..., min_length=1)
    transition_matrix: Tuple[Tuple[float, ...], ...]

    @field_validator('states')
    @classmethod
    def _as_floats(cls, states):
        return tuple(float(rate) for rate in states)

    @field_validator('transition_matrix')
    @classmethod
    def _as_float_rows(cls, rows):
        return tuple(tuple(float(p) for p in row) for row in rows)

    @model_validator(mode='after')
    def _square(self):
        n = len(self.states)
        if len(self.transition_matrix) != n or any(len(row) != n for row in self.transition_matrix):
            raise ValueError(f"transition_matrix must be {n}x{n}")
        return self

    @property
    def num_states(self) -> int:
        return len(self.states)

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.transition_matrix, dtype=float)

    @property
    def rates(self) -> np.ndarray:
        return np.array(self.states, dtype=float)


@dataclass
class ChannelDiagnostics:
    problems: List[Dict[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems

    def add(self, prop: str, message: str):
        self.problems.append({'property': prop, 'message': message})


def validate(model: ChannelModel) -> ChannelDiagnostics:
    """Check row-stochasticity, irreducibility and sorted distinct states."""
    diagnostics = ChannelDiagnostics()
    matrix = model.matrix
    rates = model.rates

    if np.any(rates < 0):
        diagnostics.add('states', "rates must be non-negative")
    if np.any(np.diff(rates) <= 0):
        diagnostics.add('states', "states must be strictly increasing")

    if np.any(matrix < 0) or np.any(matrix > 1):
        diagnostics.add('stochastic', "entries must lie in [0, 1]")
    row_sums = matrix.sum(axis=1)
    bad_rows = np.flatnonzero(np.abs(row_sums - 1.0) > STOCHASTIC_TOL)
    if len(bad_rows):
        diagnostics.add(
            'stochastic',
            f"rows {bad_rows.tolist()} do not sum to 1 (sums {row_sums[bad_rows].tolist()})")

    n_components, _ = connected_components(
        csr_matrix(matrix > 0), directed=True, connection='strong')
    if n_components != 1:
        diagnostics.add('irreducible', f"chain is reducible ({n_components} communicating classes)")
    return diagnostics


def require_valid(model: ChannelModel):
    diagnostics = validate(model)
    if not diagnostics.ok:
        raise ChannelValidationError("channel model is invalid", {'problems': diagnostics.problems})


def stationary_distribution(model: ChannelModel) -> np.ndarray:
    """Solve pi^T P = pi^T with sum(pi) = 1."""
    require_valid(model)
    n = model.num_states
    system = np.vstack([model.matrix.T - np.eye(n), np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def avg_rate(model: ChannelModel) -> float:
    return float(stationary_distribution(model) @ model.rates)


def sub_segments_deliverable(rate: float, slot: float, size: float) -> int:
    """Whole sub-segments of ``size`` Mb deliverable at ``rate`` Mbps in ``slot`` seconds."""
    if size <= 0:
        raise InvalidArgumentError("sub-segment size must be positive", {'size': size})
    # 1e-9 absorbs float error such as 0.1 * 10 != 1.0
    return max(0, math.floor(rate * slot / size + 1e-9))


def _cumulative(model: ChannelModel) -> np.ndarray:
    cdf = np.cumsum(model.matrix, axis=1)
    cdf[:, -1] = 1.0
    return cdf


def sample_next(model: ChannelModel, current: int, rng: np.random.Generator) -> int:
    cdf = _cumulative(model)[current]
    return int(min(np.searchsorted(cdf, rng.random(), side='right'), model.num_states - 1))


def sample_next_many(model: ChannelModel, current: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One transition for each entry of ``current``, one uniform draw per entry."""
    cdf = _cumulative(model)
    draws = rng.random(len(current))
    nxt = (cdf[np.asarray(current)] <= draws[:, None]).sum(axis=1)
    return np.minimum(nxt, model.num_states - 1)


# ======================
# Fixture generators
# ======================

def _birth_death_proposal(n: int, stay: float) -> np.ndarray:
    proposal = np.zeros((n, n))
    move = (1.0 - stay) / 2.0
    for i in range(n):
        if i > 0:
            proposal[i, i - 1] = move
        if i < n - 1:
            proposal[i, i + 1] = move
        proposal[i, i] = 1.0 - proposal[i].sum()
    return proposal


def doubly_stochastic_channel(states: Sequence[float], stay: float = 0.5) -> ChannelModel:
    """Symmetric birth-death chain over sorted ``states``.

    Symmetric rows and columns make the matrix doubly stochastic, so pi is
    uniform and c_avg is the plain mean of the rates.
    """
    if not 0.0 <= stay < 1.0:
        raise InvalidArgumentError("stay must lie in [0, 1)", {'stay': stay})
    matrix = _birth_death_proposal(len(states), stay)
    return ChannelModel(states=tuple(states), transition_matrix=tuple(map(tuple, matrix)))


def _tilted_weights(rates: np.ndarray, tilt: float) -> np.ndarray:
    scaled = (rates - rates.mean()) / (rates.max() - rates.min())
    logits = tilt * scaled
    weights = np.exp(logits - logits.max())
    return weights / weights.sum()


def tilted_channel(states: Sequence[float], target_avg: float, stay: float = 0.5) -> ChannelModel:
    """Reversible birth-death chain whose stationary mean rate is ``target_avg``.

    pi is an exponential tilt of the uniform law, pi_i ~ exp(t * C_i); t is found
    by bisection and the matrix follows from Metropolis acceptance on the
    birth-death proposal, so detailed balance holds for that pi.
    """
    rates = np.asarray(states, dtype=float)
    if len(rates) < 2 or not rates.min() < target_avg < rates.max():
        raise InvalidArgumentError(
            "target average must lie strictly between the smallest and largest rate",
            {'states': list(states), 'target_avg': target_avg})
    if not 0.0 <= stay < 1.0:
        raise InvalidArgumentError("stay must lie in [0, 1)", {'stay': stay})

    def gap(tilt):
        return float(_tilted_weights(rates, tilt) @ rates) - target_avg

    bound = 1.0
    while gap(-bound) > 0 or gap(bound) < 0:
        bound *= 2.0
        if bound > 1e6:
            raise InvalidArgumentError("could not bracket the tilt", {'target_avg': target_avg})
    tilt = brentq(gap, -bound, bound, xtol=1e-14)
    pi = _tilted_weights(rates, tilt)

    proposal = _birth_death_proposal(len(rates), stay)
    matrix = np.zeros_like(proposal)
    for i in range(len(rates)):
        for j in range(len(rates)):
            if i != j and proposal[i, j] > 0:
                matrix[i, j] = proposal[i, j] * min(1.0, pi[j] / pi[i])
        matrix[i, i] = 1.0 - matrix[i].sum()
    logger.debug("tilted channel: tilt=%.6f pi=%s", tilt, np.round(pi, 6).tolist())
    return ChannelModel(states=tuple(rates), transition_matrix=tuple(map(tuple, matrix)))
