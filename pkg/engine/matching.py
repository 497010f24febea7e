"""
Hypergraph construction for feature matching and discretization of beliefs.

Nodes are candidate matches (left feature, right feature); hyperedges are
triangles of left features paired with the right triangles induced by the
candidate sets of their vertices.
"""
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from engine.config import BPOptions, MatchParams
from engine.core import CandidateMatch, Hyperedge, MatchHypergraph, PenaltyModel
from engine.errors import (
    DegenerateDescriptorError,
    DegenerateTriangleError,
    EmptyPointSetError,
    MissingDescriptorsError,
)
from engine.inference import BeliefState, build_factor_graph, run_sum_product

logger = logging.getLogger(__name__)

BELIEF_FLOOR = 1e-12
DEGENERACY_RATIO = 1e-9


@dataclass(frozen=True, eq=False)
class PointSet:
    points: np.ndarray  # (n, 2)
    descriptors: Optional[np.ndarray] = None  # (n, d)

    def __post_init__(self):
        pts = np.array(self.points, dtype=float, copy=True).reshape(-1, 2)
        if not np.isfinite(pts).all():
            raise ValueError("Point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.descriptors is not None:
            desc = np.array(self.descriptors, dtype=float, copy=True)
            if desc.ndim != 2 or desc.shape[0] != len(pts):
                raise ValueError(
                    f"Expected one descriptor row per point ({len(pts)}), got shape {desc.shape}"
                )
            if desc.shape[1] < 1 and len(pts) > 0:
                raise ValueError("Descriptor dimension must be at least 1")
            desc.setflags(write=False)
            object.__setattr__(self, "descriptors", desc)

    def __len__(self) -> int:
        return len(self.points)

    def to_dict(self) -> Dict:
        data = {"points": self.points.tolist()}
        if self.descriptors is not None:
            data["descriptors"] = self.descriptors.tolist()
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "PointSet":
        if "points" not in data:
            raise ValueError("PointSet JSON needs a 'points' field")
        desc = data.get("descriptors")
        return cls(np.array(data["points"], dtype=float).reshape(-1, 2), None if desc is None else np.array(desc, dtype=float))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path: str) -> "PointSet":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class MatchAssignment:
    pairs: Tuple[Tuple[int, int], ...]
    scores: Tuple[float, ...]
    unassigned: Tuple[int, ...] = ()

    def __post_init__(self):
        lefts = [l for l, _ in self.pairs]
        if len(set(lefts)) != len(lefts):
            raise ValueError("Each left feature may appear at most once in an assignment")
        if len(self.scores) != len(self.pairs):
            raise ValueError("One score per assigned pair is required")

    def as_dict(self) -> Dict[int, int]:
        return dict(self.pairs)

    def to_frame(self, ground_truth: Optional[Mapping[int, int]] = None) -> pd.DataFrame:
        df = pd.DataFrame(
            {
                "left_index": [l for l, _ in self.pairs],
                "right_index": [r for _, r in self.pairs],
                "score": list(self.scores),
            },
            columns=["left_index", "right_index", "score"],
        )
        if ground_truth is not None:
            df["is_correct"] = [int(ground_truth.get(l) == r) for l, r in self.pairs]
        return df.sort_values("left_index", kind="stable").reset_index(drop=True)

    def write_csv(self, path: str, ground_truth: Optional[Mapping[int, int]] = None) -> None:
        self.to_frame(ground_truth).to_csv(path, index=False, float_format="%.10g")

    @classmethod
    def read_csv(cls, path: str) -> "MatchAssignment":
        df = pd.read_csv(path)
        missing = {"left_index", "right_index", "score"} - set(df.columns)
        if missing:
            raise ValueError(f"Assignment CSV {path} missing columns {sorted(missing)}")
        pairs = tuple(zip(df["left_index"].astype(int).tolist(), df["right_index"].astype(int).tolist()))
        return cls(pairs, tuple(df["score"].astype(float).tolist()))


@dataclass
class BuildReport:
    n_nodes: int = 0
    n_edges: int = 0
    left_triangles: int = 0
    candidate_triangles: int = 0
    repeated_right: int = 0
    degenerate_left: int = 0
    degenerate_right: int = 0
    discarded: int = 0
    duplicate_edges: int = 0
    unassigned_left: int = 0

    def as_dict(self) -> Dict[str, int]:
        return asdict(self)


def appearance_weight(desc_l: Sequence[float], desc_r: Sequence[float]) -> float:
    """
    Normalized correlation of two descriptors, clamped to [0, 1].
    """
    u = np.asarray(desc_l, dtype=float)
    v = np.asarray(desc_r, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"Descriptor dimensions differ: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateDescriptorError("Normalized correlation is undefined for an all-zero descriptor")
    return float(np.clip(np.dot(u, v) / (nu * nv), 0.0, 1.0))


def _unit_rows(desc: np.ndarray, side: str) -> np.ndarray:
    norms = np.linalg.norm(desc, axis=1)
    if (norms == 0).any():
        bad = np.flatnonzero(norms == 0).tolist()
        raise DegenerateDescriptorError(f"All-zero {side} descriptors at indices {bad}")
    return desc / norms[:, None]


def appearance_matrix(left: PointSet, right: PointSet) -> np.ndarray:
    """
    Clamped normalized correlation between every left and right descriptor, (n_L, n_R).
    """
    if left.descriptors is None or right.descriptors is None:
        raise MissingDescriptorsError("Both point sets need descriptors")
    if len(left) and len(right) and left.descriptors.shape[1] != right.descriptors.shape[1]:
        raise ValueError("Left and right descriptors have different dimensions")
    corr = _unit_rows(left.descriptors, "left") @ _unit_rows(right.descriptors, "right").T
    return np.clip(corr, 0.0, 1.0)


def candidate_matches(left: PointSet, right: PointSet, m: int) -> Dict[int, List[CandidateMatch]]:
    """
    The m right features with highest appearance weight for every left
    feature (ties go to the lower right index).
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    if left.descriptors is None or right.descriptors is None:
        raise MissingDescriptorsError("Candidate selection needs descriptors on both sides")
    if len(right) == 0:
        raise EmptyPointSetError("Right point set is empty; no candidates can be formed")
    weights = appearance_matrix(left, right)
    right_ids = np.arange(len(right))
    candidates = {}
    for l in range(len(left)):
        order = np.lexsort((right_ids, -weights[l]))[:m]
        candidates[l] = [CandidateMatch(l, int(r), float(weights[l, r])) for r in order]
    return candidates


def interior_angles(p1, p2, p3) -> Tuple[float, float, float]:
    """
    Interior angles (radians) at p1, p2, p3, in vertex order.
    """
    pts = np.array([p1, p2, p3], dtype=float)
    e12, e13, e23 = pts[1] - pts[0], pts[2] - pts[0], pts[2] - pts[1]
    cross = abs(e12[0] * e13[1] - e12[1] * e13[0])
    diameter_sq = max(e12 @ e12, e13 @ e13, e23 @ e23)
    if cross / 2.0 <= DEGENERACY_RATIO * diameter_sq:
        raise DegenerateTriangleError(f"Degenerate triangle {pts.tolist()}")
    a1 = np.arctan2(cross, e12 @ e13)
    a2 = np.arctan2(cross, (-e12) @ e23)
    a3 = np.pi - a1 - a2
    return float(a1), float(a2), float(a3)


def geometric_weight(angles_l: Sequence[float], angles_r: Sequence[float], delta: float = 0.5) -> Optional[float]:
    """
    1 - eps/delta for eps = sum of squared angle differences; None when eps > delta
    (the triangle pair is discarded).
    """
    eps = float(np.sum((np.asarray(angles_l, dtype=float) - np.asarray(angles_r, dtype=float)) ** 2))
    if eps > delta:
        return None
    return 1.0 - eps / delta


def _neighbors(points: np.ndarray, knn: int) -> List[List[int]]:
    n = len(points)
    if n < 2:
        return [[] for _ in range(n)]
    k = min(knn + 1, n)
    _, idx = cKDTree(points).query(points, k=k)
    idx = np.asarray(idx).reshape(n, k)
    return [[int(j) for j in row if j != i][:knn] for i, row in enumerate(idx)]


def build_match_hypergraph(
    left: PointSet, right: PointSet, params: Optional[MatchParams] = None
) -> Tuple[MatchHypergraph, BuildReport]:
    params = params or MatchParams()
    if len(left) == 0:
        raise EmptyPointSetError("Left point set is empty")
    candidates = candidate_matches(left, right, params.m)

    nodes: List[CandidateMatch] = []
    node_id: Dict[Tuple[int, int], int] = {}
    for l in range(len(left)):
        for c in candidates[l]:
            node_id[(c.left_index, c.right_index)] = len(nodes)
            nodes.append(c)

    report = BuildReport(n_nodes=len(nodes))
    edges: Dict[Tuple[int, ...], float] = {}
    seen_triangles = set()
    right_angles: Dict[Tuple[int, int, int], Optional[Tuple[float, float, float]]] = {}

    for a, neigh in enumerate(_neighbors(left.points, params.knn)):
        for u, v in itertools.combinations(neigh, 2):
            tri = (a, u, v)
            key = tuple(sorted(tri))
            if key in seen_triangles:
                continue
            seen_triangles.add(key)
            report.left_triangles += 1
            try:
                angles_l = interior_angles(*left.points[list(tri)])
            except DegenerateTriangleError:
                report.degenerate_left += 1
                continue

            for ca, cu, cv in itertools.product(candidates[a], candidates[u], candidates[v]):
                report.candidate_triangles += 1
                rtri = (ca.right_index, cu.right_index, cv.right_index)
                if len(set(rtri)) < 3:
                    report.repeated_right += 1
                    continue
                if rtri not in right_angles:
                    try:
                        right_angles[rtri] = interior_angles(*right.points[list(rtri)])
                    except DegenerateTriangleError:
                        right_angles[rtri] = None
                angles_r = right_angles[rtri]
                if angles_r is None:
                    report.degenerate_right += 1
                    continue
                geo = geometric_weight(angles_l, angles_r, params.delta)
                if geo is None:
                    report.discarded += 1
                    continue
                lam = float(np.clip(geo * ca.appearance_weight * cu.appearance_weight * cv.appearance_weight, 0.0, 1.0))
                ids = tuple(sorted(node_id[(c.left_index, c.right_index)] for c in (ca, cu, cv)))
                if ids in edges:
                    report.duplicate_edges += 1
                    edges[ids] = max(edges[ids], lam)
                else:
                    edges[ids] = lam

    graph = MatchHypergraph.from_matches(
        nodes,
        [Hyperedge(ids, lam) for ids, lam in sorted(edges.items())],
        max_candidates=params.m,
        left_indices=range(len(left)),
    )
    report.n_edges = len(graph.edges)
    logger.info(
        f"Hypergraph built: {report.n_nodes} nodes, {report.n_edges} hyperedges "
        f"({report.discarded} discarded, {report.degenerate_left + report.degenerate_right} degenerate)"
    )
    return graph, report


def _node_scores(beliefs: BeliefState) -> np.ndarray:
    if beliefs.log_node_beliefs is not None:
        return beliefs.log_ratios
    b = np.maximum(np.asarray(beliefs.node_beliefs, dtype=float), BELIEF_FLOOR)
    return np.log(b[:, 1]) - np.log(b[:, 0])


def discretize(
    graph: MatchHypergraph,
    beliefs: BeliefState,
    one_to_one: bool = False,
    report: Optional[BuildReport] = None,
) -> MatchAssignment:
    """
    Per left feature, pick the candidate with the largest belief log-ratio
    (ties: higher appearance weight, then lower right index). With
    `one_to_one`, candidates are instead accepted greedily in descending
    score order while neither side is already used.
    """
    if len(beliefs.node_beliefs) != graph.n_nodes:
        raise ValueError(f"Beliefs cover {len(beliefs.node_beliefs)} nodes, graph has {graph.n_nodes}")
    scores = _node_scores(beliefs)

    def rank(i):
        node = graph.nodes[i]
        return (-scores[i], -node.appearance_weight, node.right_index)

    chosen: Dict[int, int] = {}
    if one_to_one:
        used_right = set()
        for i in sorted(range(graph.n_nodes), key=lambda i: rank(i) + (graph.nodes[i].left_index,)):
            node = graph.nodes[i]
            if node.left_index in chosen or node.right_index in used_right:
                continue
            chosen[node.left_index] = i
            used_right.add(node.right_index)
    else:
        for l, ids in graph.left_groups.items():
            if ids:
                chosen[l] = min(ids, key=rank)

    unassigned = tuple(sorted(l for l in graph.left_groups if l not in chosen))
    if report is not None:
        report.unassigned_left = len(unassigned)
    lefts = sorted(chosen)
    return MatchAssignment(
        pairs=tuple((l, graph.nodes[chosen[l]].right_index) for l in lefts),
        scores=tuple(float(scores[chosen[l]]) for l in lefts),
        unassigned=unassigned,
    )


@dataclass
class PipelineResult:
    assignment: MatchAssignment
    beliefs: BeliefState
    report: BuildReport
    graph: MatchHypergraph = field(repr=False)

    def beliefs_frame(self) -> pd.DataFrame:
        """
        Soft assignment: per-node beliefs and log-ratios.
        """
        b = self.beliefs.node_beliefs
        return pd.DataFrame(
            {
                "left_index": [n.left_index for n in self.graph.nodes],
                "right_index": [n.right_index for n in self.graph.nodes],
                "appearance_weight": [n.appearance_weight for n in self.graph.nodes],
                "b0": b[:, 0],
                "b1": b[:, 1],
                "log_ratio": _node_scores(self.beliefs),
            }
        )


def match_pipeline(
    left: PointSet,
    right: PointSet,
    model: PenaltyModel,
    params: Optional[MatchParams] = None,
    bp_opts: Optional[BPOptions] = None,
    one_to_one: bool = False,
) -> PipelineResult:
    graph, report = build_match_hypergraph(left, right, params)
    beliefs = run_sum_product(build_factor_graph(graph, model), bp_opts)
    if not beliefs.converged:
        logger.warning(
            f"BP did not converge in {beliefs.iterations} iterations (residual={beliefs.max_residual:.3g})"
        )
    assignment = discretize(graph, beliefs, one_to_one=one_to_one, report=report)
    return PipelineResult(assignment, beliefs, report, graph)
