"""
Shared fixtures.

The desk instance (two layers, b_max = 3, a two-state channel, four users)
is small enough to check by hand and to solve with the dense tableau below.
"""

import numpy as np
import pytest

from channel import ChannelModel, doubly_stochastic_channel
from core_model import VideoConfig
from qa_policy import QaSpec
from rb_lp import UserGroup, solve_rb

DESK_DISCOUNT = 0.95


class _Tableau:
    """Dense two-phase simplex with Bland's rule, used as an independent oracle."""

    def __init__(self, constraints, rhs, tol=1e-10):
        matrix = np.array(constraints, dtype=float)
        rhs = np.array(rhs, dtype=float)
        negative = rhs < 0
        matrix[negative] *= -1
        rhs[negative] *= -1
        self.m, self.n = matrix.shape
        self.tol = tol
        self.table = np.hstack([matrix, np.eye(self.m), rhs[:, None]])
        self.basis = list(range(self.n, self.n + self.m))

    def pivot(self, row, col):
        self.table[row] /= self.table[row, col]
        for r in range(len(self.table)):
            if r != row and self.table[r, col] != 0:
                self.table[r] -= self.table[r, col] * self.table[row]
        self.basis[row] = col

    def optimize(self, cost, allowed):
        while True:
            reduced = cost - cost[self.basis] @ self.table[:, :-1]
            candidates = [j for j in allowed if j not in self.basis and reduced[j] < -self.tol]
            if not candidates:
                return True
            col = candidates[0]
            column = self.table[:, col]
            rows = [i for i in range(len(self.table)) if column[i] > self.tol]
            if not rows:
                return False
            ratios = [self.table[i, -1] / column[i] for i in rows]
            best = min(ratios)
            tied = [i for i, ratio in zip(rows, ratios) if ratio <= best + self.tol]
            self.pivot(min(tied, key=lambda i: self.basis[i]), col)

    def drive_out_artificials(self):
        redundant = []
        for row, column in enumerate(list(self.basis)):
            if column < self.n:
                continue
            options = [j for j in range(self.n)
                       if j not in self.basis and abs(self.table[row, j]) > self.tol]
            if options:
                self.pivot(row, options[0])
            else:
                redundant.append(row)
        self.table = np.delete(self.table, redundant, axis=0)
        self.basis = [column for row, column in enumerate(self.basis) if row not in redundant]


def tableau_solve(constraints, rhs, objective, sense='max'):
    """Optimal objective and x, ``None`` when infeasible; raises on unbounded."""
    tableau = _Tableau(constraints, rhs)
    n, m = tableau.n, tableau.m
    phase_one = np.concatenate([np.zeros(n), np.ones(m)])
    tableau.optimize(phase_one, range(n + m))
    if phase_one[tableau.basis] @ tableau.table[:, -1] > 1e-8:
        return None
    tableau.drive_out_artificials()

    objective = np.asarray(objective, dtype=float)
    cost = np.concatenate([-objective if sense == 'max' else objective, np.zeros(m)])
    if not tableau.optimize(cost, range(n)):
        raise ValueError("unbounded")
    x = np.zeros(n + m)
    x[tableau.basis] = tableau.table[:, -1]
    return float(objective @ x[:n]), x[:n]


@pytest.fixture
def tableau():
    return tableau_solve


@pytest.fixture
def desk_video():
    return VideoConfig(layer_rates=(1.0, 1.0), buffer_limit=3)


@pytest.fixture
def desk_channel():
    return ChannelModel(states=(1.0, 2.0), transition_matrix=((0.7, 0.3), (0.3, 0.7)))


@pytest.fixture
def desk_group(desk_video, desk_channel):
    return UserGroup(name="desk", count=4, qa=QaSpec.dbp(3), channel=desk_channel, video=desk_video)


@pytest.fixture
def desk_solution(desk_group):
    """(model, solution) of the desk instance at M = 2."""
    return solve_rb([desk_group], 2, DESK_DISCOUNT)


@pytest.fixture
def wide_channel():
    return doubly_stochastic_channel((1.0, 2.0, 5.0, 10.0), stay=0.5)


@pytest.fixture
def fast_channel():
    return ChannelModel(states=(10.0,), transition_matrix=((1.0,),))
