"""
Exact solver for the one-hot assignment program

    maximize   sum_ij value[i, j] * x[i, j]
    subject to sum_j x[i, j] = 1                    (each item placed once)
               sum_i sm[i, j] * x[i, j] <= sm_cap[j]
               sum_i mem[i, j] * x[i, j] <= mem_cap[j]
               x[i, j] = 0 where allowed[i, j] is False

Depth-first branch and bound over items, bounded by the best remaining
per-item value. ``solve_enumeration`` is the brute-force reference.
"""
import itertools
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

TOLERANCE = 1e-9


@dataclass
class AssignmentProblem:
    value: np.ndarray
    sm: np.ndarray
    mem: np.ndarray
    sm_cap: np.ndarray
    mem_cap: np.ndarray
    allowed: Optional[np.ndarray] = None

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=float)
        self.sm = np.asarray(self.sm, dtype=float)
        self.mem = np.asarray(self.mem, dtype=float)
        self.sm_cap = np.asarray(self.sm_cap, dtype=float)
        self.mem_cap = np.asarray(self.mem_cap, dtype=float)
        if self.allowed is None:
            self.allowed = np.ones(self.value.shape, dtype=bool)
        self.allowed = np.asarray(self.allowed, dtype=bool)
        shape = self.value.shape
        if len(shape) != 2:
            raise ValueError(f"value must be a 2-D items x bins array, got shape {shape}")
        for name in ('sm', 'mem', 'allowed'):
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.sm_cap.shape != (shape[1],) or self.mem_cap.shape != (shape[1],):
            raise ValueError("capacity vectors must have one entry per bin")

    @property
    def num_items(self) -> int:
        return self.value.shape[0]

    @property
    def num_bins(self) -> int:
        return self.value.shape[1]

    @property
    def dims(self) -> int:
        return self.num_items * self.num_bins

    def is_feasible(self, assignment: Tuple[int, ...]) -> bool:
        sm_used = np.zeros(self.num_bins)
        mem_used = np.zeros(self.num_bins)
        for item, bin_index in enumerate(assignment):
            if not self.allowed[item, bin_index]:
                return False
            sm_used[bin_index] += self.sm[item, bin_index]
            mem_used[bin_index] += self.mem[item, bin_index]
        return bool(np.all(sm_used <= self.sm_cap + TOLERANCE)
                    and np.all(mem_used <= self.mem_cap * (1 + TOLERANCE)))

    def objective(self, assignment: Tuple[int, ...]) -> float:
        return float(sum(self.value[item, bin_index] for item, bin_index in enumerate(assignment)))

    def one_hot(self, assignment: Tuple[int, ...]) -> np.ndarray:
        x = np.zeros(self.value.shape, dtype=int)
        for item, bin_index in enumerate(assignment):
            x[item, bin_index] = 1
        return x


@dataclass
class AssignmentSolution:
    feasible: bool
    assignment: Tuple[int, ...] = ()
    objective: float = float('-inf')
    nodes: int = 0


def solve_branch_and_bound(problem: AssignmentProblem) -> AssignmentSolution:
    """
    Optimal assignment, or ``feasible=False`` when none exists.

    Bins are tried in index order and only strictly better solutions replace
    the incumbent, so among optimal assignments the lexicographically first
    one is returned.
    """
    n, m = problem.value.shape
    if n == 0:
        return AssignmentSolution(True, (), 0.0, 0)
    if m == 0:
        return AssignmentSolution(False)

    masked = np.where(problem.allowed, problem.value, -np.inf)
    best_per_item = masked.max(axis=1)
    if np.any(np.isneginf(best_per_item)):
        return AssignmentSolution(False)
    # bound[k] = best value still obtainable from items k..n-1
    bound = np.concatenate([np.cumsum(best_per_item[::-1])[::-1], [0.0]])

    sm_used = np.zeros(m)
    mem_used = np.zeros(m)
    current = [0] * n
    best = AssignmentSolution(False)

    def search(item: int, value: float) -> None:
        best.nodes += 1
        if item == n:
            if not best.feasible or value > best.objective + TOLERANCE:
                best.feasible = True
                best.objective = value
                best.assignment = tuple(current)
            return
        if best.feasible and value + bound[item] <= best.objective + TOLERANCE:
            return
        for j in range(m):
            if not problem.allowed[item, j]:
                continue
            sm, mem = problem.sm[item, j], problem.mem[item, j]
            if sm_used[j] + sm > problem.sm_cap[j] + TOLERANCE:
                continue
            if mem_used[j] + mem > problem.mem_cap[j] * (1 + TOLERANCE):
                continue
            sm_used[j] += sm
            mem_used[j] += mem
            current[item] = j
            search(item + 1, value + problem.value[item, j])
            sm_used[j] -= sm
            mem_used[j] -= mem

    search(0, 0.0)
    logger.debug(f"branch and bound: {n}x{m} problem, {best.nodes} nodes, "
                 f"feasible={best.feasible} objective={best.objective:.4f}")
    return best


def solve_enumeration(problem: AssignmentProblem) -> AssignmentSolution:
    """Check every assignment; for small instances only."""
    best = AssignmentSolution(False)
    if problem.num_items == 0:
        return AssignmentSolution(True, (), 0.0, 0)
    for assignment in itertools.product(range(problem.num_bins), repeat=problem.num_items):
        best.nodes += 1
        if not problem.is_feasible(assignment):
            continue
        value = problem.objective(assignment)
        if value > best.objective + (TOLERANCE if best.feasible else 0.0):
            best = AssignmentSolution(True, assignment, value, best.nodes)
    return best
