"""
Approximate maximum-likelihood learning of penalty functions.

The log-likelihood of the labeled hypergraphs is
    l(w) = sum_j [ w . phi_observed(j) - log Z_j ] - (l2 / 2) ||w||^2
and its gradient is observed minus expected features minus l2 * w.
On loopy graphs log Z is the Bethe approximation and the expectations come
from BP count marginals (a surrogate likelihood); on trees both are exact.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from engine.config import BPOptions, TrainConfig
from engine.core import (
    POLY_FACTORIALS,
    Labeling,
    MatchHypergraph,
    ParameterMap,
    PenaltyModel,
    count_features,
)
from engine.errors import ConfigError, LabelingMismatchError, ModelSizeError, NumericalDomainError
from engine.inference import (
    BeliefState,
    FactorGraph,
    bethe_log_z,
    build_factor_graph,
    exact_marginals,
    run_sum_product,
)

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["iteration", "objective", "grad_max_norm", "step_size", "bp_nonconverged_count", "accepted"]


@dataclass(frozen=True, eq=False)
class TrainingInstance:
    graph: MatchHypergraph
    truth: Labeling

    def __post_init__(self):
        if len(self.truth) != self.graph.n_nodes:
            raise LabelingMismatchError(
                f"Truth labels cover {len(self.truth)} nodes, graph has {self.graph.n_nodes}"
            )


def _to_map(arr: np.ndarray, sparse: bool) -> ParameterMap:
    return {
        (c, j): float(arr[c, j])
        for c in range(arr.shape[0])
        for j in range(arr.shape[1])
        if not sparse or arr[c, j] != 0.0
    }


def _k_max_of(instances: Sequence[TrainingInstance]) -> int:
    return max((inst.graph.max_clique_size for inst in instances), default=0)


def _observed_array(instances: Sequence[TrainingInstance], variant: str, k_max: int) -> np.ndarray:
    arr = np.zeros((2, PenaltyModel.width_for(variant, k_max)))
    for inst in instances:
        labels = inst.truth.labels
        for edge in inst.graph.edges:
            if edge.k > k_max:
                raise ModelSizeError(f"Clique size {edge.k} exceeds k_max={k_max}")
            eta1 = int(labels[list(edge.node_ids)].sum())
            for (c, j), value in count_features(edge.weight, edge.k - eta1, eta1, variant).items():
                arr[c, j] += value
    return arr


def observed_features(
    instances: Sequence[TrainingInstance], variant: str, k_max: Optional[int] = None
) -> ParameterMap:
    """
    Sum of the feature maps of every clique under the ground-truth labels.
    """
    k_max = _k_max_of(instances) if k_max is None else k_max
    return _to_map(_observed_array(instances, variant, max(k_max, 1)), sparse=True)


def _expected_array(instance: TrainingInstance, model: PenaltyModel, beliefs: BeliefState) -> np.ndarray:
    arr = np.zeros_like(model.parameters)
    edges = instance.graph.edges
    by_size: Dict[int, List[int]] = {}
    for i, edge in enumerate(edges):
        by_size.setdefault(edge.k, []).append(i)

    for k, ids in by_size.items():
        lam1 = np.array([edges[i].weight for i in ids])
        lam0 = 1.0 - lam1
        p = np.array([beliefs.clique_count_marginals[i] for i in ids])  # (F, k + 1), indexed by eta1
        if model.variant == "discrete":
            arr[1, : k + 1] -= lam1 @ p[:, ::-1]  # phi_1(alpha) fires when eta0 = alpha
            arr[0, : k + 1] -= lam0 @ p
        else:
            eta1 = np.arange(k + 1, dtype=float)
            for e, fact in enumerate(POLY_FACTORIALS):
                arr[1, e] -= lam1 @ (p @ (k - eta1) ** e) / fact
                arr[0, e] -= lam0 @ (p @ eta1 ** e) / fact
    return arr


def _infer(
    instance: TrainingInstance,
    model: PenaltyModel,
    bp_opts: Optional[BPOptions],
    exact: bool = False,
    init: Optional[BeliefState] = None,
) -> Tuple[FactorGraph, BeliefState]:
    fg = build_factor_graph(instance.graph, model)
    beliefs = exact_marginals(fg) if exact else run_sum_product(fg, bp_opts, init=init)
    return fg, beliefs


def expected_features(
    instance: TrainingInstance, model: PenaltyModel, bp_opts: Optional[BPOptions] = None
) -> ParameterMap:
    _, beliefs = _infer(instance, model, bp_opts)
    if not beliefs.converged:
        logger.warning(f"BP did not converge while computing expectations (residual={beliefs.max_residual:.3g})")
    return _to_map(_expected_array(instance, model, beliefs), sparse=True)


@dataclass
class _Evaluation:
    objective: float
    gradient: np.ndarray
    nonconverged: int
    beliefs: List[BeliefState] = field(repr=False)


def _evaluate(
    instances: Sequence[TrainingInstance],
    model: PenaltyModel,
    config: TrainConfig,
    observed: np.ndarray,
    warm: Optional[List[BeliefState]] = None,
) -> _Evaluation:
    w = model.parameters
    expected = np.zeros_like(w)
    log_z_total = 0.0
    nonconverged = 0
    beliefs_out = []
    for j, inst in enumerate(instances):
        init = warm[j] if warm is not None else None
        fg, beliefs = _infer(inst, model, config.bp_opts, config.exact_inference, init)
        if not beliefs.converged:
            nonconverged += 1
        log_z_total += beliefs.log_partition if config.exact_inference else bethe_log_z(fg, beliefs)
        expected += _expected_array(inst, model, beliefs)
        beliefs_out.append(beliefs)

    l2 = config.l2_strength
    value = float(np.sum(w * observed) - log_z_total - 0.5 * l2 * np.sum(w * w))
    grad = observed - expected - l2 * w
    return _Evaluation(value, grad, nonconverged, beliefs_out)


def _check_model(instances: Sequence[TrainingInstance], model: PenaltyModel) -> None:
    if _k_max_of(instances) > model.k_max:
        raise ModelSizeError(f"Training cliques of size {_k_max_of(instances)} exceed model k_max={model.k_max}")


def objective(instances: Sequence[TrainingInstance], model: PenaltyModel, config: Optional[TrainConfig] = None) -> float:
    config = config or TrainConfig()
    _check_model(instances, model)
    observed = _observed_array(instances, model.variant, model.k_max)
    return _evaluate(instances, model, config, observed).objective


def gradient(
    instances: Sequence[TrainingInstance], model: PenaltyModel, config: Optional[TrainConfig] = None
) -> ParameterMap:
    config = config or TrainConfig()
    _check_model(instances, model)
    observed = _observed_array(instances, model.variant, model.k_max)
    return _to_map(_evaluate(instances, model, config, observed).gradient, sparse=False)


def penalty_shape(model: PenaltyModel, tol: float = 1e-9) -> Dict[str, bool]:
    """
    Shape diagnostics of the gauge-normalized penalties: g_1 is expected to
    be non-decreasing and concave, g_0 non-decreasing and convex.
    """
    g0, g1 = model.normalized_penalties()
    d0, d1 = np.diff(g0), np.diff(g1)
    return {
        "g1_nondecreasing": bool((d1 >= -tol).all()),
        "g1_concave": bool((np.diff(d1) <= tol).all()),
        "g0_nondecreasing": bool((d0 >= -tol).all()),
        "g0_convex": bool((np.diff(d0) >= -tol).all()),
    }


@dataclass
class TrainResult:
    model: PenaltyModel
    log: pd.DataFrame
    converged: bool

    def write_log(self, path: str) -> None:
        self.log.to_csv(path, index=False, float_format="%.10g")

    def penalties_frame(self) -> pd.DataFrame:
        """
        Gauge-normalized g_c(alpha) per class, with the shape flags of that
        class (g_1: non-decreasing and concave, g_0: non-decreasing and convex).
        """
        g = self.model.normalized_penalties()
        shape = penalty_shape(self.model)
        alpha = np.arange(g.shape[1])
        n = len(alpha)
        return pd.DataFrame(
            {
                "class": [0] * n + [1] * n,
                "alpha": np.concatenate([alpha, alpha]),
                "penalty": np.concatenate([g[0], g[1]]),
                "nondecreasing": [int(shape["g0_nondecreasing"])] * n + [int(shape["g1_nondecreasing"])] * n,
                "expected_curvature": [int(shape["g0_convex"])] * n + [int(shape["g1_concave"])] * n,
            }
        )


def _clique_count(instances: Sequence[TrainingInstance]) -> int:
    return sum(len(inst.graph.edges) for inst in instances)


def _try_evaluate(
    instances: Sequence[TrainingInstance],
    model: PenaltyModel,
    config: TrainConfig,
    observed: np.ndarray,
    warm: Optional[List[BeliefState]],
) -> Optional[_Evaluation]:
    try:
        result = _evaluate(instances, model, config, observed, warm=warm)
    except (NumericalDomainError, FloatingPointError) as e:
        logger.warning(f"Candidate step could not be evaluated ({e}); treating it as rejected")
        return None
    if not np.isfinite(result.objective) or not np.isfinite(result.gradient).all():
        logger.warning("Candidate step produced a non-finite objective; treating it as rejected")
        return None
    return result


def train(instances: Sequence[TrainingInstance], config: Optional[TrainConfig] = None) -> TrainResult:
    """
    Gradient ascent from the zero (uniform) model.

    The ascent direction is the gradient divided by the number of training
    cliques, so `step_size` is in per-clique units whatever the data size.
    A candidate that lowers the objective, or cannot be evaluated, is
    rejected and the step halved; an accepted step grows the next one by
    `step_growth`. Stops at `grad_tolerance` (max-norm of the summed
    gradient), `max_iters`, or when the step falls below `min_step`.
    """
    config = config or TrainConfig()
    if not instances:
        raise ConfigError("Training needs at least one labeled instance")
    k_max = max(config.k_max, _k_max_of(instances))
    model = PenaltyModel.zeros(config.variant, k_max)
    observed = _observed_array(instances, config.variant, k_max)
    scale = float(max(1, _clique_count(instances)))

    current = _evaluate(instances, model, config, observed)
    step = config.step_size
    rows = [
        dict(
            iteration=0,
            objective=current.objective,
            grad_max_norm=float(np.max(np.abs(current.gradient))),
            step_size=step,
            bp_nonconverged_count=current.nonconverged,
            accepted=1,
        )
    ]
    converged = False

    for it in range(1, config.max_iters + 1):
        if np.max(np.abs(current.gradient)) < config.grad_tolerance:
            converged = True
            break
        if step < config.min_step:
            logger.warning(f"Step size fell below {config.min_step:g}; stopping at iteration {it}")
            break
        candidate_model = model.with_parameters(model.parameters + step * current.gradient / scale)
        candidate = _try_evaluate(instances, candidate_model, config, observed, warm=current.beliefs)
        accepted = candidate is not None and candidate.objective >= current.objective
        used_step = step
        if accepted:
            model, current = candidate_model, candidate
            step *= config.step_growth
        else:
            step /= 2.0
        rows.append(
            dict(
                iteration=it,
                objective=current.objective,
                grad_max_norm=float(np.max(np.abs(current.gradient))),
                step_size=used_step,
                bp_nonconverged_count=candidate.nonconverged if candidate is not None else len(instances),
                accepted=int(accepted),
            )
        )
        logger.debug(
            f"iter {it}: objective={current.objective:.6f} step={used_step:.3g} accepted={accepted}"
        )
    else:
        converged = bool(np.max(np.abs(current.gradient)) < config.grad_tolerance)

    if not converged:
        logger.warning(
            f"Training stopped without reaching grad tolerance {config.grad_tolerance:g} "
            f"(max |grad| = {np.max(np.abs(current.gradient)):.3g})"
        )
    logger.info(f"Training finished: objective={current.objective:.6f}, {len(rows) - 1} iterations")
    return TrainResult(model, pd.DataFrame(rows, columns=LOG_COLUMNS), converged)
