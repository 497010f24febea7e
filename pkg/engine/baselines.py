"""
Comparison methods: predefined linear penalties, appearance-only greedy
matching, and a pairwise spectral matcher (principal eigenvector of a
candidate compatibility matrix, greedily discretized).
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from engine.config import SpectralParams
from engine.core import CandidateMatch, PenaltyModel
from engine.matching import MatchAssignment, PointSet, candidate_matches

logger = logging.getLogger(__name__)


def linear_penalty_model(k_max: int = 3) -> PenaltyModel:
    """
    g_c(eta) = eta for both classes.
    """
    if k_max < 2:
        raise ValueError("k_max must be at least 2")
    table = np.arange(k_max + 1, dtype=float)
    return PenaltyModel.from_tables(table, table)


def greedy_appearance(left: PointSet, right: PointSet) -> MatchAssignment:
    """
    Each left feature takes its most similar right feature; no geometry.
    """
    best = candidate_matches(left, right, 1)
    lefts = sorted(best)
    return MatchAssignment(
        pairs=tuple((l, best[l][0].right_index) for l in lefts),
        scores=tuple(best[l][0].appearance_weight for l in lefts),
    )


def compatibility_matrix(
    left: PointSet,
    right: PointSet,
    candidates: Sequence[CandidateMatch],
    params: Optional[SpectralParams] = None,
) -> np.ndarray:
    """
    Appearance weights on the diagonal; exp(-(d_L - d_R)^2 / sigma^2) between
    candidates (l1, r1), (l2, r2) with l1 != l2, r1 != r2 and d_L within the
    distance threshold.
    """
    params = params or SpectralParams()
    ls = np.array([c.left_index for c in candidates], dtype=int)
    rs = np.array([c.right_index for c in candidates], dtype=int)
    d_left = cdist(left.points[ls], left.points[ls])
    d_right = cdist(right.points[rs], right.points[rs])
    affinity = np.exp(-((d_left - d_right) ** 2) / params.sigma ** 2)
    allowed = (ls[:, None] != ls[None, :]) & (rs[:, None] != rs[None, :]) & (d_left <= params.distance_threshold)
    M = np.where(allowed, affinity, 0.0)
    np.fill_diagonal(M, [c.appearance_weight for c in candidates])
    return M


@dataclass(frozen=True)
class PowerIterationResult:
    vector: np.ndarray
    converged: bool
    iterations: int


def principal_eigenvector(M: np.ndarray, tolerance: float = 1e-8, max_iters: int = 1000) -> PowerIterationResult:
    n = M.shape[0]
    x = np.full(n, 1.0 / np.sqrt(n)) if n else np.zeros(0)
    if n == 0:
        return PowerIterationResult(x, True, 0)
    for it in range(1, max_iters + 1):
        y = M @ x
        norm = np.linalg.norm(y)
        if norm == 0:
            return PowerIterationResult(x, True, it)
        y /= norm
        if np.linalg.norm(y - x) < tolerance:
            return PowerIterationResult(y, True, it)
        x = y
    logger.warning(f"Power iteration did not converge in {max_iters} iterations; using the last iterate")
    return PowerIterationResult(x, False, max_iters)


def greedy_one_to_one(candidates: Sequence[CandidateMatch], values: np.ndarray) -> List[int]:
    """
    Accepts candidates in descending value order unless their left or right
    feature is already taken. Returns accepted candidate positions.
    """
    order = sorted(
        range(len(candidates)),
        key=lambda i: (-values[i], candidates[i].left_index, candidates[i].right_index),
    )
    used_l, used_r, accepted = set(), set(), []
    for i in order:
        c = candidates[i]
        if c.left_index in used_l or c.right_index in used_r:
            continue
        used_l.add(c.left_index)
        used_r.add(c.right_index)
        accepted.append(i)
    return accepted


def pairwise_score(M: np.ndarray, indicator: np.ndarray) -> float:
    """
    Sum of compatibilities over pairs of selected candidates, x^T M x.
    """
    x = np.asarray(indicator, dtype=float)
    return float(x @ M @ x)


def spectral_match(
    left: PointSet, right: PointSet, params: Optional[SpectralParams] = None
) -> Tuple[MatchAssignment, PowerIterationResult]:
    params = params or SpectralParams()
    per_left = candidate_matches(left, right, params.m)
    candidates = [c for l in sorted(per_left) for c in per_left[l]]
    M = compatibility_matrix(left, right, candidates, params)
    power = principal_eigenvector(M, params.tolerance, params.max_iters)
    values = np.abs(power.vector)
    accepted = sorted(greedy_one_to_one(candidates, values), key=lambda i: candidates[i].left_index)
    assignment = MatchAssignment(
        pairs=tuple((candidates[i].left_index, candidates[i].right_index) for i in accepted),
        scores=tuple(float(values[i]) for i in accepted),
        unassigned=tuple(sorted(set(per_left) - {candidates[i].left_index for i in accepted})),
    )
    return assignment, power
