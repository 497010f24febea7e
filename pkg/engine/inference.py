"""
Sum-product belief propagation over count-symmetric factors.

Every factor built from a hyperedge depends on its members' labels only
through eta0 (the number of zeros), so a factor is stored as a (k+1)-entry
log table and messages are computed by convolving count-generating
polynomials instead of enumerating 2^(k-1) labelings.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.special import logsumexp, xlogy

from engine.config import BPOptions
from engine.core import MatchHypergraph, PenaltyModel, count_cost_table
from engine.errors import ModelSizeError, NumericalDomainError, SizeLimitError

logger = logging.getLogger(__name__)

EXACT_MAX_VARIABLES = 20
_LOG_HALF = float(np.log(0.5))


@dataclass(frozen=True, eq=False)
class Factor:
    members: Tuple[int, ...]
    log_table: np.ndarray  # log f(eta0), eta0 = 0..k

    def __post_init__(self):
        members = tuple(int(i) for i in self.members)
        if not members:
            raise ValueError("A factor needs at least one member")
        if len(set(members)) != len(members):
            raise ValueError(f"Factor members must be distinct: {members}")
        table = np.array(self.log_table, dtype=float, copy=True)
        if table.shape != (len(members) + 1,):
            raise ValueError(f"Factor of size {len(members)} needs {len(members) + 1} table entries")
        if not np.isfinite(table).all():
            raise NumericalDomainError("Factor table entries must be strictly positive and finite")
        table.setflags(write=False)
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "log_table", table)

    @property
    def k(self) -> int:
        return len(self.members)

    @property
    def table(self) -> np.ndarray:
        return np.exp(self.log_table)


class _FactorGroup(NamedTuple):
    factor_ids: np.ndarray  # (F,)
    members: np.ndarray  # (F, k)
    log_tables: np.ndarray  # (F, k + 1)


@dataclass(frozen=True, eq=False)
class FactorGraph:
    variable_count: int
    factors: Tuple[Factor, ...]
    adjacency: Tuple[Tuple[int, ...], ...] = field(init=False)
    groups: Dict[int, _FactorGroup] = field(init=False, repr=False)

    def __post_init__(self):
        n = int(self.variable_count)
        factors = tuple(self.factors)
        adjacency: List[List[int]] = [[] for _ in range(n)]
        by_size: Dict[int, List[int]] = {}
        for fid, f in enumerate(factors):
            for v in f.members:
                if not (0 <= v < n):
                    raise ValueError(f"Factor {fid} references unknown variable {v} (n={n})")
                adjacency[v].append(fid)
            by_size.setdefault(f.k, []).append(fid)

        groups = {}
        for k, ids in sorted(by_size.items()):
            groups[k] = _FactorGroup(
                factor_ids=np.array(ids, dtype=int),
                members=np.array([factors[i].members for i in ids], dtype=int).reshape(len(ids), k),
                log_tables=np.array([factors[i].log_table for i in ids], dtype=float).reshape(len(ids), k + 1),
            )
        object.__setattr__(self, "variable_count", n)
        object.__setattr__(self, "factors", factors)
        object.__setattr__(self, "adjacency", tuple(tuple(a) for a in adjacency))
        object.__setattr__(self, "groups", groups)

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(a) for a in self.adjacency], dtype=int)

    def is_tree(self) -> bool:
        """
        True when the bipartite variable/factor graph has no cycles (a forest).
        """
        n, F = self.variable_count, len(self.factors)
        rows, cols = [], []
        for fid, f in enumerate(self.factors):
            for v in f.members:
                rows.append(v)
                cols.append(n + fid)
        n_edges = len(rows)
        if n + F == 0:
            return True
        adj = coo_matrix((np.ones(n_edges), (rows, cols)), shape=(n + F, n + F))
        n_components, _ = connected_components(adj, directed=False)
        return n_edges == (n + F) - n_components


@dataclass(frozen=True, eq=False)
class BeliefState:
    node_beliefs: np.ndarray  # (n, 2): b_i(0), b_i(1)
    clique_count_marginals: Tuple[np.ndarray, ...]  # per factor, P(eta1 = a), a = 0..k
    converged: bool
    iterations: int
    max_residual: float
    log_partition: Optional[float] = None  # set by exact enumeration only
    messages: Optional[Dict[int, Tuple[np.ndarray, np.ndarray]]] = field(default=None, repr=False)
    trace: Tuple[Tuple[int, float, float], ...] = ()
    log_node_beliefs: Optional[np.ndarray] = field(default=None, repr=False)  # BP runs only

    @property
    def log_ratios(self) -> np.ndarray:
        if self.log_node_beliefs is not None:
            return self.log_node_beliefs[:, 1] - self.log_node_beliefs[:, 0]
        with np.errstate(divide="ignore"):
            return np.log(self.node_beliefs[:, 1]) - np.log(self.node_beliefs[:, 0])


def build_factor_graph(graph: MatchHypergraph, model: PenaltyModel) -> FactorGraph:
    factors = []
    for edge in graph.edges:
        if edge.k > model.k_max:
            raise ModelSizeError(f"Clique size {edge.k} exceeds model k_max={model.k_max}")
        factors.append(Factor(edge.node_ids, -count_cost_table(edge.weight, edge.k, model)))
    return FactorGraph(graph.n_nodes, tuple(factors))


def _log_normalize(log_msgs: np.ndarray) -> np.ndarray:
    return log_msgs - np.logaddexp(log_msgs[..., 0], log_msgs[..., 1])[..., None]


def _count_coefficients(q: np.ndarray) -> np.ndarray:
    """
    q has shape (..., j, 2). Returns (..., j + 1) where entry z is the total
    weight of the labelings of those j variables with exactly z zeros.
    """
    j = q.shape[-2]
    coef = np.zeros(q.shape[:-2] + (j + 1,))
    coef[..., 0] = 1.0
    for t in range(j):
        q0 = q[..., t, 0:1]
        q1 = q[..., t, 1:2]
        nxt = coef * q1
        nxt[..., 1:] += coef[..., :-1] * q0
        coef = nxt
    return coef


def _log_count_coefficients(log_q: np.ndarray) -> np.ndarray:
    """
    Log-domain `_count_coefficients`: log_q has shape (..., j, 2), entry z
    of the result is the log weight of the labelings with exactly z zeros.
    """
    j = log_q.shape[-2]
    coef = np.full(log_q.shape[:-2] + (j + 1,), -np.inf)
    coef[..., 0] = 0.0
    for t in range(j):
        lq0 = log_q[..., t, 0:1]
        lq1 = log_q[..., t, 1:2]
        nxt = coef + lq1
        nxt[..., 1:] = np.logaddexp(nxt[..., 1:], coef[..., :-1] + lq0)
        coef = nxt
    return coef


def _group_log_messages(log_tables: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """
    Unnormalized log factor-to-variable messages (F, k, 2) for every member
    of every factor in a group.
    """
    F, k = log_q.shape[:2]
    out = np.empty((F, k, 2))
    for t in range(k):
        c = _log_count_coefficients(np.delete(log_q, t, axis=1))
        out[:, t, 0] = logsumexp(log_tables[:, 1:] + c, axis=1)  # x_t = 0 adds one zero
        out[:, t, 1] = logsumexp(log_tables[:, :-1] + c, axis=1)
    return out


def factor_to_variable_message(
    factor: Factor, incoming_messages: Sequence[Sequence[float]]
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Message from a count-symmetric factor to one of its members.

    `incoming_messages` are the variable-to-factor messages of the other k-1
    members (order is irrelevant because the factor is symmetric). Returns the
    unnormalized message sum_{X \\ x_i} f(eta0) prod_j mu_j(x_j) and its
    normalized version.
    """
    incoming = [np.asarray(m, dtype=float) for m in incoming_messages]
    if len(incoming) != factor.k - 1:
        raise ValueError(f"Factor of size {factor.k} needs {factor.k - 1} incoming messages, got {len(incoming)}")
    for m in incoming:
        if m.shape != (2,):
            raise ValueError("Each incoming message must have two entries")
        if not np.isfinite(m).all() or (m <= 0).any():
            raise NumericalDomainError(f"Incoming messages must be positive and finite, got {m}")

    q = np.stack(incoming) if incoming else np.empty((0, 2))
    c = _count_coefficients(q)
    f = factor.table
    raw = np.array([np.sum(f[1:] * c), np.sum(f[:-1] * c)])
    return raw, raw / raw.sum()


def _initial_messages(fg: FactorGraph) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    return {
        k: (np.full((len(g.factor_ids), k, 2), _LOG_HALF), np.full((len(g.factor_ids), k, 2), _LOG_HALF))
        for k, g in fg.groups.items()
    }


def _variable_side(fg: FactorGraph, f2v: Dict[int, np.ndarray]):
    """
    Node log-beliefs and variable-to-factor log messages from the current
    factor-to-variable messages.
    """
    total = np.zeros((fg.variable_count, 2))
    for k, g in fg.groups.items():
        np.add.at(total, g.members.ravel(), f2v[k].reshape(-1, 2))
    v2f = {k: _log_normalize(total[g.members] - f2v[k]) for k, g in fg.groups.items()}
    return _log_normalize(total), v2f


def _count_marginals(fg: FactorGraph, v2f: Dict[int, np.ndarray]) -> Tuple[np.ndarray, ...]:
    result: List[Optional[np.ndarray]] = [None] * len(fg.factors)
    for k, g in fg.groups.items():
        log_w = g.log_tables + _log_count_coefficients(v2f[k])  # indexed by number of zeros
        w = np.exp(log_w - logsumexp(log_w, axis=1, keepdims=True))
        w = w[:, ::-1]  # indexed by eta1
        for row, fid in enumerate(g.factor_ids):
            result[fid] = w[row].copy()
    return tuple(result)


def _node_neg_entropies(log_beliefs: np.ndarray) -> np.ndarray:
    return np.sum(np.exp(log_beliefs) * log_beliefs, axis=1)


def _bethe(fg: FactorGraph, v2f: Dict[int, np.ndarray], node_neg_entropies: np.ndarray) -> float:
    value = float(np.sum((fg.degrees - 1) * node_neg_entropies))
    for k, g in fg.groups.items():
        log_q = v2f[k]
        log_zf = logsumexp(g.log_tables + _log_count_coefficients(log_q), axis=1)
        log_b = _log_normalize(log_q + _group_log_messages(g.log_tables, log_q))
        value += float(np.sum(log_zf) - np.sum(np.exp(log_b) * log_q))
    return value


def run_sum_product(
    fg: FactorGraph,
    opts: Optional[BPOptions] = None,
    init: Optional[BeliefState] = None,
) -> BeliefState:
    """
    Flooding sum-product with damping. Messages live in the log domain,
    normalized to sum to one. Non-convergence is reported, never raised.
    `init` warm-starts from the messages of a previous run on the same graph.
    """
    opts = opts or BPOptions()
    n = fg.variable_count

    if not fg.factors:
        trace = ((1, 0.0, float(n * np.log(2.0))),) if opts.trace else ()
        return BeliefState(
            np.full((n, 2), 0.5),
            (),
            True,
            1,
            0.0,
            messages={},
            trace=trace,
            log_node_beliefs=np.full((n, 2), _LOG_HALF),
        )

    if init is not None and init.messages is not None and set(init.messages) == set(fg.groups):
        messages = {k: (v.copy(), f.copy()) for k, (v, f) in init.messages.items()}
    else:
        messages = _initial_messages(fg)
    v2f = {k: m[0] for k, m in messages.items()}
    f2v = {k: m[1] for k, m in messages.items()}

    d = opts.damping
    log_keep, log_mix = (np.log1p(-d), np.log(d)) if d > 0 else (0.0, None)
    converged = False
    residual = np.inf
    trace = []
    iteration = 0
    log_beliefs = None

    for iteration in range(1, opts.max_iters + 1):
        residual = 0.0
        new_f2v = {}
        for k, g in fg.groups.items():
            new = _log_normalize(_group_log_messages(g.log_tables, v2f[k]))
            if log_mix is not None:
                new = _log_normalize(np.logaddexp(log_keep + new, log_mix + f2v[k]))
            residual = max(residual, float(np.max(np.abs(np.exp(new) - np.exp(f2v[k])))))
            new_f2v[k] = new
        f2v = new_f2v
        log_beliefs, v2f = _variable_side(fg, f2v)

        if opts.trace:
            trace.append((iteration, residual, _bethe(fg, v2f, _node_neg_entropies(log_beliefs))))
        if residual < opts.tolerance:
            converged = True
            break

    if not converged:
        logger.debug(f"BP stopped after {iteration} iterations without converging (residual={residual:.3g})")

    return BeliefState(
        node_beliefs=np.exp(log_beliefs),
        clique_count_marginals=_count_marginals(fg, v2f),
        converged=converged,
        iterations=iteration,
        max_residual=float(residual),
        messages={k: (v2f[k], f2v[k]) for k in fg.groups},
        trace=tuple(trace),
        log_node_beliefs=log_beliefs,
    )


def bethe_log_z(fg: FactorGraph, beliefs: BeliefState) -> float:
    """
    Bethe approximation of log Z from a BP run on `fg`; exact on trees.
    Beliefs that underflow to zero are fine: entropy terms come from the log
    beliefs when the run kept them, otherwise from xlogy (0 log 0 = 0).
    """
    b = np.asarray(beliefs.node_beliefs, dtype=float)
    if b.shape != (fg.variable_count, 2):
        raise ValueError(f"Beliefs cover {b.shape[0]} variables, factor graph has {fg.variable_count}")
    if not np.isfinite(b).all() or (b < 0).any():
        raise NumericalDomainError("Bethe free energy needs finite, non-negative beliefs")
    if beliefs.log_node_beliefs is not None:
        neg_entropies = _node_neg_entropies(beliefs.log_node_beliefs)
    else:
        neg_entropies = np.sum(xlogy(b, b), axis=1)
    if not fg.factors:
        return float(-np.sum(neg_entropies))
    if not beliefs.messages or set(beliefs.messages) != set(fg.groups):
        raise ValueError("Beliefs carry no BP messages for this factor graph")
    v2f = {k: m[0] for k, m in beliefs.messages.items()}
    return _bethe(fg, v2f, neg_entropies)


def exact_marginals(fg: FactorGraph, chunk_size: int = 1 << 15) -> BeliefState:
    """
    Exact node marginals, count marginals and log Z by enumerating all 2^n
    labelings. Bit v of the enumeration index is the label of variable v.
    """
    n = fg.variable_count
    if n > EXACT_MAX_VARIABLES:
        raise SizeLimitError(f"Exact enumeration supports at most {EXACT_MAX_VARIABLES} variables, got {n}")
    total = 1 << n
    bits = np.arange(n)

    def labelings(start):
        idx = np.arange(start, min(total, start + chunk_size))
        return idx, ((idx[:, None] >> bits) & 1).astype(np.int8)

    log_w = np.zeros(total)
    for start in range(0, total, chunk_size):
        idx, X = labelings(start)
        for f in fg.factors:
            zeros = f.k - X[:, list(f.members)].sum(axis=1)
            log_w[idx] += f.log_table[zeros]

    log_z = float(logsumexp(log_w))
    p = np.exp(log_w - log_z)
    b1 = np.zeros(n)
    counts = [np.zeros(f.k + 1) for f in fg.factors]
    for start in range(0, total, chunk_size):
        idx, X = labelings(start)
        b1 += p[idx] @ X
        for fid, f in enumerate(fg.factors):
            ones = X[:, list(f.members)].sum(axis=1)
            counts[fid] += np.bincount(ones, weights=p[idx], minlength=f.k + 1)

    b1 = np.clip(b1, 0.0, 1.0)
    node_beliefs = np.stack([1.0 - b1, b1], axis=1)
    return BeliefState(
        node_beliefs=node_beliefs,
        clique_count_marginals=tuple(c / c.sum() for c in counts),
        converged=True,
        iterations=0,
        max_residual=0.0,
        log_partition=log_z,
    )


def write_trace_csv(beliefs: BeliefState, path: str) -> None:
    df = pd.DataFrame(list(beliefs.trace), columns=["iteration", "max_residual", "bethe_log_z"])
    df.to_csv(path, index=False, float_format="%.10g")
