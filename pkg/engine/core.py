"""
Domain types for hypergraph node labeling and the clique cost model.

Costs follow the "cost-positive" convention: clique_cost is the quantity the
labeling minimizes, and the log-linear exponent used by inference and
learning is its negation (the features carry the minus sign).
"""
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from engine.errors import InvalidLabelError, LabelingMismatchError, ModelSizeError

VARIANTS = ("discrete", "polynomial")
POLY_FACTORIALS = (1.0, 1.0, 2.0)  # e! for e = 0, 1, 2

ParameterKey = Tuple[int, int]
ParameterMap = Dict[ParameterKey, float]


@dataclass(frozen=True)
class CandidateMatch:
    left_index: int
    right_index: int
    appearance_weight: float

    def __post_init__(self):
        w = float(self.appearance_weight)
        if not (0.0 <= w <= 1.0):
            raise ValueError(f"appearance_weight must lie in [0, 1], got {w}")
        object.__setattr__(self, "appearance_weight", w)
        object.__setattr__(self, "left_index", int(self.left_index))
        object.__setattr__(self, "right_index", int(self.right_index))


@dataclass(frozen=True)
class Hyperedge:
    node_ids: Tuple[int, ...]
    weight: float

    def __post_init__(self):
        ids = tuple(int(i) for i in self.node_ids)
        if len(ids) < 2:
            raise ValueError(f"Hyperedge needs at least 2 nodes, got {len(ids)}")
        if len(set(ids)) != len(ids):
            raise ValueError(f"Hyperedge node ids must be distinct: {ids}")
        w = float(self.weight)
        if not (0.0 <= w <= 1.0):
            raise ValueError(f"Hyperedge weight must lie in [0, 1], got {w}")
        object.__setattr__(self, "node_ids", ids)
        object.__setattr__(self, "weight", w)

    @property
    def k(self) -> int:
        return len(self.node_ids)


@dataclass(frozen=True, eq=False)
class MatchHypergraph:
    nodes: Tuple[CandidateMatch, ...]
    edges: Tuple[Hyperedge, ...]
    left_groups: Mapping[int, Tuple[int, ...]]
    max_candidates: Optional[int] = None

    def __post_init__(self):
        nodes = tuple(self.nodes)
        edges = tuple(self.edges)
        groups = {int(l): tuple(int(i) for i in ids) for l, ids in self.left_groups.items()}
        n = len(nodes)

        for e in edges:
            for i in e.node_ids:
                if not (0 <= i < n):
                    raise ValueError(f"Hyperedge references unknown node {i} (n={n})")

        seen_pairs = set()
        owner = [None] * n
        for l, ids in groups.items():
            if self.max_candidates is not None and len(ids) > self.max_candidates:
                raise ValueError(f"Left feature {l} has {len(ids)} candidates (> {self.max_candidates})")
            for i in ids:
                if not (0 <= i < n):
                    raise ValueError(f"Left group {l} references unknown node {i}")
                if owner[i] is not None:
                    raise ValueError(f"Node {i} belongs to more than one left group")
                if nodes[i].left_index != l:
                    raise ValueError(f"Node {i} has left_index {nodes[i].left_index}, grouped under {l}")
                owner[i] = l
        if any(o is None for o in owner):
            raise ValueError("Every node must belong to exactly one left group")

        for node in nodes:
            pair = (node.left_index, node.right_index)
            if pair in seen_pairs:
                raise ValueError(f"Duplicate candidate match {pair}")
            seen_pairs.add(pair)

        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "left_groups", groups)

    @classmethod
    def from_matches(
        cls,
        nodes: Sequence[CandidateMatch],
        edges: Iterable[Hyperedge] = (),
        max_candidates: Optional[int] = None,
        left_indices: Iterable[int] = (),
    ) -> "MatchHypergraph":
        """
        Groups nodes by left feature in node order. `left_indices` adds
        (possibly empty) groups for left features without candidates.
        """
        groups: Dict[int, List[int]] = {int(l): [] for l in left_indices}
        for i, node in enumerate(nodes):
            groups.setdefault(node.left_index, []).append(i)
        return cls(
            nodes=tuple(nodes),
            edges=tuple(edges),
            left_groups={l: tuple(ids) for l, ids in sorted(groups.items())},
            max_candidates=max_candidates,
        )

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_left(self) -> int:
        return len({n.left_index for n in self.nodes})

    @property
    def n_right(self) -> int:
        return len({n.right_index for n in self.nodes})

    @property
    def max_clique_size(self) -> int:
        return max((e.k for e in self.edges), default=0)

    @cached_property
    def node_index(self) -> Dict[Tuple[int, int], int]:
        return {(n.left_index, n.right_index): i for i, n in enumerate(self.nodes)}


@dataclass(frozen=True, eq=False)
class Labeling:
    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 1:
            raise InvalidLabelError("Labeling must be one-dimensional")
        if arr.size and not np.isin(arr, (0, 1)).all():
            raise InvalidLabelError(f"Labels must be binary, got values {sorted(set(arr.tolist()))}")
        arr = arr.astype(np.int8, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)

    def __len__(self) -> int:
        return int(self.labels.size)

    def restrict(self, node_ids: Sequence[int]) -> np.ndarray:
        return self.labels[list(node_ids)]

    @property
    def correct_set(self) -> Tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.labels == 1))

    @property
    def incorrect_set(self) -> Tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.labels == 0))


@dataclass(frozen=True, eq=False)
class PenaltyModel:
    """
    Learnable penalty functions.

    parameters[c] holds class c: the table w_c^alpha (alpha = 0..k_max) for
    the discrete variant, or (g_c^(0), g_c^(1), g_c^(2)) for the polynomial one.
    The balancing factors beta_c are folded into these values.
    """

    variant: str
    k_max: int
    parameters: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"Unknown penalty variant '{self.variant}'")
        if int(self.k_max) < 1:
            raise ValueError("k_max must be positive")
        params = np.array(self.parameters, dtype=float, copy=True)
        expected = (2, self.width_for(self.variant, int(self.k_max)))
        if params.shape != expected:
            raise ValueError(f"{self.variant} parameters must have shape {expected}, got {params.shape}")
        if not np.isfinite(params).all():
            raise ValueError("Penalty parameters must be finite")
        params.setflags(write=False)
        object.__setattr__(self, "k_max", int(self.k_max))
        object.__setattr__(self, "parameters", params)

    @staticmethod
    def width_for(variant: str, k_max: int) -> int:
        return k_max + 1 if variant == "discrete" else len(POLY_FACTORIALS)

    @classmethod
    def zeros(cls, variant: str, k_max: int) -> "PenaltyModel":
        return cls(variant, k_max, np.zeros((2, cls.width_for(variant, k_max))))

    @classmethod
    def from_tables(cls, w0: Sequence[float], w1: Sequence[float]) -> "PenaltyModel":
        if len(w0) != len(w1):
            raise ValueError("Both class tables need the same length")
        return cls("discrete", len(w0) - 1, np.array([w0, w1], dtype=float))

    @classmethod
    def from_coefficients(cls, g0: Sequence[float], g1: Sequence[float], k_max: int = 3) -> "PenaltyModel":
        return cls("polynomial", k_max, np.array([g0, g1], dtype=float))

    def with_parameters(self, parameters: np.ndarray) -> "PenaltyModel":
        return PenaltyModel(self.variant, self.k_max, parameters)

    def keys(self) -> List[ParameterKey]:
        return [(c, j) for c in (0, 1) for j in range(self.parameters.shape[1])]

    def as_map(self) -> ParameterMap:
        return {(c, j): float(self.parameters[c, j]) for c, j in self.keys()}

    def penalty_table(self) -> np.ndarray:
        """
        G_c(alpha) for alpha = 0..k_max, shape (2, k_max + 1).
        """
        if self.variant == "discrete":
            return self.parameters.copy()
        alpha = np.arange(self.k_max + 1, dtype=float)
        basis = np.stack([alpha ** e / POLY_FACTORIALS[e] for e in range(len(POLY_FACTORIALS))])
        return self.parameters @ basis

    def normalized_penalties(self) -> np.ndarray:
        table = self.penalty_table()
        return table - table[:, :1]

    def shifted(self, c: int, delta: float) -> "PenaltyModel":
        """
        Gauge shift: adds delta to every G_c(alpha) of class c.
        """
        params = self.parameters.copy()
        if self.variant == "discrete":
            params[c] += delta
        else:
            params[c, 0] += delta
        return self.with_parameters(params)

    def to_dict(self) -> Dict:
        return {
            "variant": self.variant,
            "k_max": self.k_max,
            "parameters": self.parameters.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "PenaltyModel":
        try:
            return cls(data["variant"], int(data["k_max"]), np.array(data["parameters"], dtype=float))
        except KeyError as e:
            raise ValueError(f"Penalty model JSON missing field {e}") from e

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "PenaltyModel":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def count_labels(labels_of_clique: Sequence[int]) -> Tuple[int, int]:
    """
    Returns (eta0, eta1): the number of 0-labels and 1-labels in the clique.
    """
    values = list(labels_of_clique)
    if not values:
        raise InvalidLabelError("A clique needs at least one label")
    eta0 = eta1 = 0
    for x in values:
        if x == 0:
            eta0 += 1
        elif x == 1:
            eta1 += 1
        else:
            raise InvalidLabelError(f"Label must be 0 or 1, got {x!r}")
    return eta0, eta1


def _check_clique(edge: Hyperedge, clique_labels: Sequence[int], k_max: Optional[int]) -> Tuple[int, int]:
    if len(clique_labels) != edge.k:
        raise LabelingMismatchError(f"Clique of size {edge.k} received {len(clique_labels)} labels")
    if k_max is not None and edge.k > k_max:
        raise ModelSizeError(f"Clique size {edge.k} exceeds model k_max={k_max}")
    return count_labels(clique_labels)


def count_cost_table(weight: float, k: int, model: PenaltyModel) -> np.ndarray:
    """
    Clique cost as a function of eta0 = 0..k for a clique of size k.
    """
    if k > model.k_max:
        raise ModelSizeError(f"Clique size {k} exceeds model k_max={model.k_max}")
    g0, g1 = model.penalty_table()
    eta0 = np.arange(k + 1)
    return weight * g1[eta0] + (1.0 - weight) * g0[k - eta0]


def clique_cost(edge: Hyperedge, clique_labels: Sequence[int], model: PenaltyModel) -> float:
    eta0, eta1 = _check_clique(edge, clique_labels, model.k_max)
    g0, g1 = model.penalty_table()
    lam = edge.weight
    return float(lam * g1[eta0] + (1.0 - lam) * g0[eta1])


def count_features(weight: float, eta0: int, eta1: int, variant: str) -> ParameterMap:
    """
    Sparse feature map of a clique given its label counts; zero entries are omitted.
    """
    lam = (1.0 - weight, weight)  # lambda_0, lambda_1
    eta_other = (eta1, eta0)  # eta_{1-c} for c = 0, 1
    features: ParameterMap = {}
    for c in (1, 0):
        if variant == "discrete":
            candidates = [((c, eta_other[c]), -lam[c])]
        elif variant == "polynomial":
            candidates = [
                ((c, e), -lam[c] * float(eta_other[c]) ** e / POLY_FACTORIALS[e])
                for e in range(len(POLY_FACTORIALS))
            ]
        else:
            raise ValueError(f"Unknown penalty variant '{variant}'")
        for key, value in candidates:
            if value != 0.0:
                features[key] = value
    return features


def feature_vector(
    edge: Hyperedge,
    clique_labels: Sequence[int],
    variant: str,
    k_max: Optional[int] = None,
) -> ParameterMap:
    eta0, eta1 = _check_clique(edge, clique_labels, k_max)
    return count_features(edge.weight, eta0, eta1, variant)


def dot(features: Mapping[ParameterKey, float], model: PenaltyModel) -> float:
    params = model.parameters
    return math.fsum(v * params[c, j] for (c, j), v in features.items())


def total_energy(graph: MatchHypergraph, labeling: Labeling, model: PenaltyModel) -> float:
    if len(labeling) != graph.n_nodes:
        raise LabelingMismatchError(
            f"Labeling covers {len(labeling)} nodes, graph has {graph.n_nodes}"
        )
    labels = labeling.labels
    return math.fsum(
        clique_cost(edge, labels[list(edge.node_ids)].tolist(), model) for edge in graph.edges
    )
