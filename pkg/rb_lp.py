"""
Restless bandit (RB) model of multi-user layered streaming.

Each user is an arm whose state is (channel state, buffer). Being scheduled
(action 1) moves the buffer along the QA policy matrix of the current channel
state, idling (action 0) only plays back. The LP over discounted state-action
frequencies x_s^a relaxes "exactly M users per slot" to "M users on average".

Full states are channel-major: full = c * (b_max+1)^L + buffer_index, which
is the block layout of H^1.
"""

from dataclasses import dataclass
from logging import getLogger
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import sparse

from channel import ChannelModel, require_valid, stationary_distribution
from core_model import VideoConfig, playback_table
from errors import InvalidArgumentError
from lp_solver import LpProblem, LpSolution, SolverOptions, dual_problem, solve
from qa_policy import PolicyMatrix, QaSpec, build_passive_matrix, build_policy_matrices

logger = getLogger(__name__)

__all__ = [
    'UserGroup',
    'RbStateSpace',
    'RbModel',
    'RbGroupSolution',
    'RbSolution',
    'build_h0',
    'build_h1',
    'state_reward_vector',
    'build_rb_model',
    'build_rb_lp',
    'build_rb_dual',
    'unpack_rb_solution',
    'solve_rb',
]


class UserGroup(BaseModel):
    """Homogeneous users sharing one QA, channel model and video."""

    model_config = ConfigDict(frozen=True)

    name: str = "group"
    count: int = Field(..., ge=1)
    qa: QaSpec
    channel: ChannelModel
    video: VideoConfig
    initial_distribution: Optional[Tuple[float, ...]] = None

    @model_validator(mode='after')
    def _alpha_shape(self):
        if self.initial_distribution is not None:
            size = self.channel.num_states * self.video.num_buffer_states
            if len(self.initial_distribution) != size:
                raise ValueError(f"initial_distribution needs {size} entries")
            if abs(sum(self.initial_distribution) - 1.0) > 1e-9:
                raise ValueError("initial_distribution must sum to 1")
            if min(self.initial_distribution) < 0:
                raise ValueError("initial_distribution must be non-negative")
        return self

    @property
    def state_space(self) -> "RbStateSpace":
        return RbStateSpace(self.channel.num_states, self.video.num_buffer_states)

    def alpha(self) -> np.ndarray:
        """Initial distribution; empty buffer with the channel drawn from pi by default."""
        if self.initial_distribution is not None:
            return np.asarray(self.initial_distribution, dtype=float)
        space = self.state_space
        alpha = np.zeros(space.size)
        alpha[space.full_index(np.arange(space.num_channel_states), 0)] = \
            stationary_distribution(self.channel)
        return alpha


@dataclass(frozen=True)
class RbStateSpace:
    num_channel_states: int
    num_buffer_states: int

    @property
    def size(self) -> int:
        return self.num_channel_states * self.num_buffer_states

    def full_index(self, channel_state, buffer_index):
        return channel_state * self.num_buffer_states + buffer_index

    def split(self, full_index):
        """Inverse of :meth:`full_index`: (channel state, buffer index)."""
        return np.divmod(full_index, self.num_buffer_states)


def build_h0(channel: ChannelModel, p0: PolicyMatrix) -> sparse.csr_matrix:
    """H0 = C kron P0."""
    return sparse.kron(sparse.csr_matrix(channel.matrix), p0.to_sparse(), format='csr')


def build_h1(channel: ChannelModel, policy_matrices: Sequence[PolicyMatrix]) -> sparse.csr_matrix:
    """Block (i, j) = C_ij * P(c_i)."""
    if len(policy_matrices) != channel.num_states:
        raise InvalidArgumentError(
            "one policy matrix per channel state is required",
            {'policy_matrices': len(policy_matrices), 'channel_states': channel.num_states})
    size = len(policy_matrices[0])
    if any(len(matrix) != size for matrix in policy_matrices):
        raise InvalidArgumentError("policy matrices differ in dimension")
    transitions = channel.matrix
    rows, cols, data = [], [], []
    local = np.arange(size)
    for i, matrix in enumerate(policy_matrices):
        for j in np.flatnonzero(transitions[i]):
            rows.append(i * size + local)
            cols.append(j * size + matrix.targets)
            data.append(np.full(size, transitions[i, j]))
    total = channel.num_states * size
    return sparse.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(total, total))


def state_reward_vector(video: VideoConfig, channel: ChannelModel) -> np.ndarray:
    """R_s per full state; the channel component does not enter the reward."""
    return np.tile(playback_table(video).reward, channel.num_states)


@dataclass
class RbModel:
    groups: List[UserGroup]
    subchannels: int
    discount: float
    spaces: List[RbStateSpace]
    h0: List[sparse.csr_matrix]
    h1: List[sparse.csr_matrix]
    rewards: List[np.ndarray]
    alphas: List[np.ndarray]
    offsets: List[int]
    problem: LpProblem

    @property
    def total_users(self) -> int:
        return sum(group.count for group in self.groups)

    def columns(self, group: int, action: int) -> slice:
        start = self.offsets[group] + action * self.spaces[group].size
        return slice(start, start + self.spaces[group].size)

    def polytope_rows(self, group: int) -> slice:
        start = sum(space.size for space in self.spaces[:group])
        return slice(start, start + self.spaces[group].size)


def _check_parameters(groups: Sequence[UserGroup], subchannels: int, discount: float):
    if not groups:
        raise InvalidArgumentError("at least one user group is required")
    if not 0.0 < discount < 1.0:
        raise InvalidArgumentError("discount must lie strictly between 0 and 1", {'discount': discount})
    total = sum(group.count for group in groups)
    if subchannels < 0 or subchannels > total:
        raise InvalidArgumentError(
            "subchannels must lie between 0 and the number of users",
            {'subchannels': subchannels, 'users': total})


def build_rb_model(groups: Sequence[UserGroup], subchannels: int, discount: float) -> RbModel:
    """Transition matrices, rewards and the primal LP of the RB relaxation.

    One variable block [x^0 | x^1] per group, one polytope constraint per
    group state and one resource constraint. The objective weighs each group
    by its size, so it is the total discounted reward of all users.
    """
    groups = list(groups)
    _check_parameters(groups, subchannels, discount)
    total_users = sum(group.count for group in groups)

    spaces, h0s, h1s, rewards, alphas, offsets = [], [], [], [], [], []
    blocks, objective, resource = [], [], []
    offset = 0
    for group in groups:
        require_valid(group.channel)
        space = group.state_space
        h0 = build_h0(group.channel, build_passive_matrix(group.video))
        h1 = build_h1(group.channel, build_policy_matrices(group.qa, group.video, group.channel))
        reward = state_reward_vector(group.video, group.channel)
        identity = sparse.identity(space.size, format='csr')
        blocks.append(sparse.hstack(
            [identity - discount * h0.T, identity - discount * h1.T], format='csr'))
        objective.append(np.concatenate([group.count * reward, group.count * reward]))
        weight = 1.0 if len(groups) == 1 else float(group.count)
        resource.append(np.concatenate([np.zeros(space.size), np.full(space.size, weight)]))

        spaces.append(space)
        h0s.append(h0)
        h1s.append(h1)
        rewards.append(reward)
        alphas.append(group.alpha())
        offsets.append(offset)
        offset += 2 * space.size

    if len(groups) == 1:
        resource_rhs = subchannels / (total_users * (1.0 - discount))
    else:
        resource_rhs = subchannels / (1.0 - discount)

    constraints = sparse.vstack(
        [sparse.block_diag(blocks, format='csr'), sparse.csr_matrix(np.concatenate(resource))],
        format='csr')
    names = [(g, s, a) for g, space in enumerate(spaces) for a in (0, 1) for s in range(space.size)]
    row_names = [('polytope', g, s) for g, space in enumerate(spaces) for s in range(space.size)]
    problem = LpProblem(
        objective=np.concatenate(objective),
        constraints=constraints,
        rhs=np.concatenate(alphas + [np.array([resource_rhs])]),
        sense='max',
        variable_names=names,
        constraint_names=row_names + [('resource',)],
    )
    logger.info("RB LP: %d groups, %d variables, %d constraints, M=%d, beta=%g",
                len(groups), problem.num_variables, problem.num_constraints, subchannels, discount)
    return RbModel(groups, subchannels, discount, spaces, h0s, h1s, rewards, alphas, offsets, problem)


def build_rb_lp(groups: Sequence[UserGroup], subchannels: int, discount: float) -> LpProblem:
    return build_rb_model(groups, subchannels, discount).problem


def build_rb_dual(problem: LpProblem) -> LpProblem:
    """Dual of the RB LP: min alpha.lambda + rhs * lambda_M over A^T y >= N R."""
    return dual_problem(problem)


@dataclass
class RbGroupSolution:
    group: UserGroup
    space: RbStateSpace
    x0: np.ndarray
    x1: np.ndarray
    gamma0: np.ndarray
    gamma1: np.ndarray
    state_duals: np.ndarray

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.group.name,
            'count': self.group.count,
            'num_channel_states': self.space.num_channel_states,
            'num_buffer_states': self.space.num_buffer_states,
            'x0': self.x0.tolist(),
            'x1': self.x1.tolist(),
            'gamma0': self.gamma0.tolist(),
            'gamma1': self.gamma1.tolist(),
            'state_duals': self.state_duals.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], group: UserGroup) -> "RbGroupSolution":
        space = group.state_space
        if (data['num_channel_states'], data['num_buffer_states']) != \
                (space.num_channel_states, space.num_buffer_states):
            raise InvalidArgumentError(
                "stored solution does not match the group's state space",
                {'group': group.name, 'stored': [data['num_channel_states'], data['num_buffer_states']]})
        return cls(
            group=group,
            space=space,
            **{key: np.asarray(data[key], dtype=float)
               for key in ('x0', 'x1', 'gamma0', 'gamma1', 'state_duals')},
        )


@dataclass
class RbSolution:
    objective: float
    per_user_objective: float
    resource_dual: float
    subchannels: int
    discount: float
    groups: List[RbGroupSolution]
    lp: LpSolution

    def to_dict(self) -> Dict[str, Any]:
        return {
            'objective': self.objective,
            'per_user_objective': self.per_user_objective,
            'resource_dual': self.resource_dual,
            'subchannels': self.subchannels,
            'discount': self.discount,
            'num_variables': int(len(self.lp.x)),
            'iterations': int(self.lp.iterations),
            'method': self.lp.method,
            'groups': [group.to_dict() for group in self.groups],
        }


def unpack_rb_solution(model: RbModel, solution: LpSolution) -> RbSolution:
    groups = []
    for g, group in enumerate(model.groups):
        passive, active = model.columns(g, 0), model.columns(g, 1)
        groups.append(RbGroupSolution(
            group=group,
            space=model.spaces[g],
            x0=solution.x[passive],
            x1=solution.x[active],
            gamma0=solution.reduced_costs[passive],
            gamma1=solution.reduced_costs[active],
            state_duals=solution.duals[model.polytope_rows(g)],
        ))
    return RbSolution(
        objective=solution.objective,
        per_user_objective=solution.objective / model.total_users,
        resource_dual=float(solution.duals[-1]),
        subchannels=model.subchannels,
        discount=model.discount,
        groups=groups,
        lp=solution,
    )


def solve_rb(groups: Sequence[UserGroup], subchannels: int, discount: float,
             options: Optional[SolverOptions] = None) -> Tuple[RbModel, RbSolution]:
    model = build_rb_model(groups, subchannels, discount)
    solution = solve(model.problem, options)
    return model, unpack_rb_solution(model, solution)
