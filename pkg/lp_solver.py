"""
Revised simplex solver for equality-form linear programs.

    max (or min)  c^T x   subject to   A x = b,  x >= 0

The solver works in two phases on [A | I] with one artificial column per row,
keeps the basis as a sparse LU factorization plus an eta file of product-form
updates, and prices with Dantzig's rule, switching to Bland's rule after a run
of degenerate pivots. It returns a vertex together with the dual values and
the reduced cost of every column.

Dual and reduced-cost conventions (independent of the path used to solve):

- ``max``: y solves  min b^T y  s.t.  A^T y >= c,  and  gamma = A^T y - c >= 0.
- ``min``: y solves  max b^T y  s.t.  A^T y <= c,  and  gamma = c - A^T y >= 0.
"""

from dataclasses import dataclass, field
from logging import getLogger
from typing import Any, Dict, Hashable, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import sparse
from scipy.optimize import linprog
from scipy.sparse.linalg import splu

from errors import (
    InfeasibleLPError,
    InvalidArgumentError,
    IterationLimitError,
    SolverError,
    UnboundedLPError,
)

logger = getLogger(__name__)

__all__ = [
    'SolverOptions',
    'LpProblem',
    'LpSolution',
    'solve',
    'dual_problem',
    'check_solution',
]


class SolverOptions(BaseModel):
    model_config = ConfigDict(frozen=True)

    method: Literal['revised-simplex', 'highs'] = 'revised-simplex'
    pivot_rule: Literal['dantzig', 'bland'] = 'dantzig'
    degenerate_pivot_limit: int = Field(50, ge=1)
    feasibility_tol: float = Field(1e-9, gt=0)
    optimality_tol: float = Field(1e-9, gt=0)
    pivot_tol: float = Field(1e-9, gt=0)
    max_iterations: int = Field(200_000, ge=1)
    refactor_interval: int = Field(64, ge=1)


def _key_to_json(key):
    return list(key) if isinstance(key, tuple) else key


def _key_from_json(key):
    return tuple(key) if isinstance(key, list) else key


@dataclass
class LpProblem:
    """Equality-form LP with non-negative variables.

    ``variable_names`` maps columns to keys such as (group, state, action);
    every key must be unique.
    """

    objective: np.ndarray
    constraints: sparse.csr_matrix
    rhs: np.ndarray
    sense: str = 'max'
    variable_names: List[Hashable] = field(default_factory=list)
    constraint_names: List[Hashable] = field(default_factory=list)

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float)
        self.rhs = np.asarray(self.rhs, dtype=float)
        self.constraints = sparse.csr_matrix(self.constraints, dtype=float)
        m, n = self.constraints.shape
        if len(self.objective) != n or len(self.rhs) != m:
            raise InvalidArgumentError(
                "LP dimensions are inconsistent",
                {'shape': [m, n], 'objective': len(self.objective), 'rhs': len(self.rhs)})
        if self.sense not in ('max', 'min'):
            raise InvalidArgumentError("sense must be 'max' or 'min'", {'sense': self.sense})
        if self.variable_names:
            if len(self.variable_names) != n or len(set(self.variable_names)) != n:
                raise InvalidArgumentError("every variable needs exactly one unique name")
        self._columns = None

    @property
    def num_variables(self) -> int:
        return self.constraints.shape[1]

    @property
    def num_constraints(self) -> int:
        return self.constraints.shape[0]

    def column(self, key: Hashable) -> int:
        if self._columns is None:
            self._columns = {name: j for j, name in enumerate(self.variable_names)}
        return self._columns[key]

    def to_dict(self) -> Dict[str, Any]:
        """JSON form: dense objective and rhs, constraint matrix as COO triplets."""
        coo = self.constraints.tocoo()
        return {
            'sense': self.sense,
            'num_variables': self.num_variables,
            'num_constraints': self.num_constraints,
            'objective': self.objective.tolist(),
            'rhs': self.rhs.tolist(),
            'rows': coo.row.tolist(),
            'cols': coo.col.tolist(),
            'values': coo.data.tolist(),
            'variable_names': [_key_to_json(key) for key in self.variable_names],
            'constraint_names': [_key_to_json(key) for key in self.constraint_names],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LpProblem":
        shape = (data['num_constraints'], data['num_variables'])
        matrix = sparse.coo_matrix((data['values'], (data['rows'], data['cols'])), shape=shape)
        return cls(
            objective=np.asarray(data['objective']),
            constraints=matrix.tocsr(),
            rhs=np.asarray(data['rhs']),
            sense=data.get('sense', 'max'),
            variable_names=[_key_from_json(key) for key in data.get('variable_names', [])],
            constraint_names=[_key_from_json(key) for key in data.get('constraint_names', [])],
        )


@dataclass
class LpSolution:
    status: str
    objective: float
    x: np.ndarray
    duals: np.ndarray
    reduced_costs: np.ndarray
    basis: np.ndarray
    iterations: int
    method: str

    def to_dict(self) -> Dict[str, Any]:
        return {
            'status': self.status,
            'objective': float(self.objective),
            'x': self.x.tolist(),
            'duals': self.duals.tolist(),
            'reduced_costs': self.reduced_costs.tolist(),
            'basis': self.basis.tolist(),
            'iterations': int(self.iterations),
            'method': self.method,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LpSolution":
        return cls(
            status=data['status'],
            objective=float(data['objective']),
            x=np.asarray(data['x'], dtype=float),
            duals=np.asarray(data['duals'], dtype=float),
            reduced_costs=np.asarray(data['reduced_costs'], dtype=float),
            basis=np.asarray(data['basis'], dtype=int),
            iterations=int(data['iterations']),
            method=data['method'],
        )


class _Basis:
    """Sparse LU of the initial basis followed by an eta file."""

    def __init__(self, columns: sparse.csc_matrix, basis: np.ndarray):
        try:
            self.lu = splu(columns[:, basis].tocsc())
        except RuntimeError as exc:
            raise SolverError("basis matrix is singular", {'reason': str(exc)}) from exc
        self.etas = []

    def ftran(self, vector: np.ndarray) -> np.ndarray:
        x = self.lu.solve(vector)
        for row, eta in self.etas:
            pivot = x[row] / eta[row]
            x -= eta * pivot
            x[row] = pivot
        return x

    def btran(self, vector: np.ndarray) -> np.ndarray:
        z = np.array(vector, dtype=float)
        for row, eta in reversed(self.etas):
            z[row] = (z[row] - (eta @ z - eta[row] * z[row])) / eta[row]
        return self.lu.solve(z, trans='T')

    def update(self, row: int, eta: np.ndarray):
        self.etas.append((row, eta.copy()))


class RevisedSimplex:
    """Two-phase revised simplex on a minimization problem."""

    def __init__(self, constraints: sparse.csr_matrix, rhs: np.ndarray, cost: np.ndarray,
                 options: SolverOptions):
        self.options = options
        self.m, self.n = constraints.shape
        self.rhs = rhs
        identity = sparse.identity(self.m, format='csc')
        self.columns = sparse.hstack([constraints.tocsc(), identity], format='csc')
        self.columns_t = self.columns.T.tocsr()
        self.cost = cost
        self.basis = np.arange(self.n, self.n + self.m)
        self.is_basic = np.zeros(self.n + self.m, dtype=bool)
        self.is_basic[self.basis] = True
        self.iterations = 0
        self._refactor()

    def _column(self, j: int) -> np.ndarray:
        column = np.zeros(self.m)
        start, end = self.columns.indptr[j], self.columns.indptr[j + 1]
        column[self.columns.indices[start:end]] = self.columns.data[start:end]
        return column

    def _refactor(self):
        self.factor = _Basis(self.columns, self.basis)
        self.x_basic = self.factor.ftran(self.rhs)
        tol = self.options.feasibility_tol
        self.x_basic[(self.x_basic < 0) & (self.x_basic > -tol * (1 + np.abs(self.rhs).max()))] = 0.0

    def _run_phase(self, cost: np.ndarray, allowed: np.ndarray, phase: int) -> np.ndarray:
        options = self.options
        bland = options.pivot_rule == 'bland'
        degenerate_run = 0
        while True:
            duals = self.factor.btran(cost[self.basis])
            reduced = cost - self.columns_t @ duals
            candidates = allowed & ~self.is_basic & (reduced < -options.optimality_tol)
            if not candidates.any():
                return duals
            if self.iterations >= options.max_iterations:
                raise IterationLimitError(
                    "simplex iteration limit reached",
                    {'iterations': self.iterations, 'phase': phase,
                     'basis': self.basis.tolist(),
                     'objective': float(cost[self.basis] @ self.x_basic)})

            indices = np.flatnonzero(candidates)
            entering = int(indices[0]) if bland else int(indices[np.argmin(reduced[indices])])
            direction = self.factor.ftran(self._column(entering))

            rows = np.flatnonzero(direction > options.pivot_tol)
            ratios = np.maximum(self.x_basic[rows], 0.0) / direction[rows]
            if phase == 2:
                stuck = np.flatnonzero((self.basis >= self.n) & (np.abs(direction) > options.pivot_tol))
                stuck = np.setdiff1d(stuck, rows)
                rows = np.concatenate([rows, stuck])
                ratios = np.concatenate([ratios, np.zeros(len(stuck))])
            if len(rows) == 0:
                ray = np.zeros(self.n + self.m)
                ray[entering] = 1.0
                ray[self.basis] = -direction
                raise UnboundedLPError(
                    "objective is unbounded",
                    {'entering': entering, 'ray': ray[:self.n].tolist()})

            best = ratios.min()
            tied = rows[ratios <= best + options.feasibility_tol]
            if bland:
                leaving_row = int(tied[np.argmin(self.basis[tied])])
            else:
                leaving_row = int(tied[np.argmax(np.abs(direction[tied]))])
            step = float(max(best, 0.0))

            self.x_basic -= step * direction
            self.x_basic[leaving_row] = step
            self.is_basic[self.basis[leaving_row]] = False
            self.basis[leaving_row] = entering
            self.is_basic[entering] = True
            self.factor.update(leaving_row, direction)
            self.iterations += 1

            if step <= options.feasibility_tol:
                degenerate_run += 1
                if not bland and degenerate_run >= options.degenerate_pivot_limit:
                    logger.debug("%d degenerate pivots, switching to Bland's rule", degenerate_run)
                    bland = True
            else:
                degenerate_run = 0
                bland = options.pivot_rule == 'bland'

            if len(self.factor.etas) >= options.refactor_interval:
                self._refactor()

    def solve(self):
        total = self.n + self.m
        phase_one_cost = np.concatenate([np.zeros(self.n), np.ones(self.m)])
        duals = self._run_phase(phase_one_cost, np.ones(total, dtype=bool), 1)
        self._refactor()
        infeasibility = float(phase_one_cost[self.basis] @ self.x_basic)
        if infeasibility > self.options.feasibility_tol * (1.0 + np.abs(self.rhs).sum()):
            raise InfeasibleLPError(
                "problem is infeasible",
                {'phase1_objective': infeasibility, 'farkas': duals.tolist()})
        logger.debug("phase I done after %d iterations", self.iterations)

        phase_two_cost = np.concatenate([self.cost, np.zeros(self.m)])
        allowed = np.concatenate([np.ones(self.n, dtype=bool), np.zeros(self.m, dtype=bool)])
        self._run_phase(phase_two_cost, allowed, 2)
        self._refactor()
        duals = self.factor.btran(phase_two_cost[self.basis])
        x = np.zeros(total)
        x[self.basis] = self.x_basic
        return x[:self.n], duals


def _finish(problem: LpProblem, x: np.ndarray, duals_min: np.ndarray, flip: np.ndarray,
            basis: np.ndarray, iterations: int, method: str) -> LpSolution:
    duals = duals_min * flip
    scale = 1.0 + np.abs(x).max(initial=0.0)
    x = np.where(np.abs(x) <= 1e-12 * scale, 0.0, x)
    x = np.maximum(x, 0.0)
    at_y = problem.constraints.T @ duals
    if problem.sense == 'max':
        duals = -duals
        reduced = -at_y - problem.objective
    else:
        reduced = problem.objective - at_y
    return LpSolution(
        status='optimal',
        objective=float(problem.objective @ x),
        x=x,
        duals=duals,
        reduced_costs=reduced,
        basis=np.sort(basis),
        iterations=iterations,
        method=method,
    )


def _solve_highs(problem: LpProblem, constraints, rhs, cost, options: SolverOptions):
    result = linprog(cost, A_eq=constraints, b_eq=rhs, bounds=(0, None), method='highs-ds',
                     options={'maxiter': options.max_iterations,
                              'primal_feasibility_tolerance': max(options.feasibility_tol, 1e-10),
                              'dual_feasibility_tolerance': max(options.optimality_tol, 1e-10)})
    if result.status == 2:
        raise InfeasibleLPError("problem is infeasible", {'message': result.message})
    if result.status == 3:
        raise UnboundedLPError("objective is unbounded", {'message': result.message})
    if result.status == 1:
        raise IterationLimitError("HiGHS iteration limit reached", {'iterations': int(result.nit)})
    if result.status != 0:
        raise SolverError("HiGHS failed", {'status': int(result.status), 'message': result.message})
    x = np.asarray(result.x)
    return x, np.asarray(result.eqlin.marginals), np.flatnonzero(x > 0), int(result.nit)


def solve(problem: LpProblem, options: Optional[SolverOptions] = None) -> LpSolution:
    """Solve ``problem`` to a vertex optimum.

    Raises:
        InfeasibleLPError: Phase I could not remove the artificial mass.
        UnboundedLPError: an improving ray exists.
        IterationLimitError: ``options.max_iterations`` pivots were not enough.
    """
    options = options or SolverOptions()
    flip = np.where(problem.rhs < 0, -1.0, 1.0)
    constraints = sparse.diags(flip) @ problem.constraints
    rhs = problem.rhs * flip
    cost = -problem.objective if problem.sense == 'max' else problem.objective.copy()
    logger.info("solving LP: %d constraints, %d variables (%s)",
                problem.num_constraints, problem.num_variables, options.method)

    if options.method == 'highs':
        x, duals_min, basis, iterations = _solve_highs(problem, constraints, rhs, cost, options)
    else:
        simplex = RevisedSimplex(constraints.tocsr(), rhs, cost, options)
        x, duals_min = simplex.solve()
        basis = simplex.basis[simplex.basis < problem.num_variables]
        iterations = simplex.iterations

    solution = _finish(problem, x, duals_min, flip, basis, iterations, options.method)
    logger.info("LP optimal: objective %.10g after %d iterations", solution.objective, iterations)
    residuals = check_solution(problem, solution)
    if residuals['primal_residual'] > 1e-8 * (1.0 + np.abs(problem.rhs).max(initial=0.0)):
        logger.warning("primal residual %.3g above tolerance", residuals['primal_residual'])
    return solution


def dual_problem(problem: LpProblem) -> LpProblem:
    """Dual of ``problem`` in equality form.

    Free duals are split as y = y+ - y-, and one surplus (or slack) column per
    primal variable turns A^T y >= c (or <= c) into an equality.
    """
    m, n = problem.constraints.shape
    transposed = problem.constraints.T.tocsr()
    surplus_sign = -1.0 if problem.sense == 'max' else 1.0
    matrix = sparse.hstack(
        [transposed, -transposed, surplus_sign * sparse.identity(n, format='csr')], format='csr')
    objective = np.concatenate([problem.rhs, -problem.rhs, np.zeros(n)])
    names = ([('y+', i) for i in range(m)] + [('y-', i) for i in range(m)]
             + [('surplus', j) for j in range(n)])
    return LpProblem(
        objective=objective,
        constraints=matrix,
        rhs=problem.objective.copy(),
        sense='min' if problem.sense == 'max' else 'max',
        variable_names=names,
        constraint_names=[('column', j) for j in range(n)],
    )


def check_solution(problem: LpProblem, solution: LpSolution) -> Dict[str, float]:
    """Residuals recomputed from the problem data alone."""
    x, duals, reduced = solution.x, solution.duals, solution.reduced_costs
    at_y = problem.constraints.T @ duals
    expected = at_y - problem.objective if problem.sense == 'max' else problem.objective - at_y
    return {
        'primal_residual': float(np.abs(problem.constraints @ x - problem.rhs).max(initial=0.0)),
        'min_primal': float(x.min(initial=0.0)),
        'min_reduced_cost': float(reduced.min(initial=0.0)),
        'reduced_cost_mismatch': float(np.abs(expected - reduced).max(initial=0.0)),
        'complementary_slackness': float(np.abs(x * reduced).max(initial=0.0)),
        'duality_gap': float(abs(problem.objective @ x - problem.rhs @ duals)),
    }
