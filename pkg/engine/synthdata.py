"""
Synthetic matching problems with known correspondences.

Left points are sampled uniformly in the unit square; the right image is a
sheared and/or rotated copy with coordinate jitter and a shuffled order.
Distractors are not transformed: they are drawn uniformly from the bounding
box of the transformed unit square and carry no correspondence.

Descriptors are Gaussian vectors; the right copy of a true correspondent
carries the left descriptor plus Gaussian noise, which sets how ambiguous
appearance alone is.

Shear convention: (x, y) -> (x + s*y, y) with s = factor - 1, so factor 2
maps the unit square to a parallelogram twice as wide as it is high.
Rotation is counter-clockwise about the unit-square centre (0.5, 0.5).
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from engine.config import (
    CompositeTransform,
    RotateTransform,
    ShearTransform,
    SynthConfig,
    Transform,
)
from engine.core import Labeling, MatchHypergraph
from engine.errors import ConfigError, MissingGroundTruthError
from engine.matching import PointSet

logger = logging.getLogger(__name__)

CENTRE = np.array([0.5, 0.5])


@dataclass(frozen=True, eq=False)
class SynthPair:
    left: PointSet
    right: PointSet
    ground_truth: Dict[int, int]
    config: SynthConfig


def shear_matrix(factor: float) -> np.ndarray:
    return np.array([[1.0, factor - 1.0], [0.0, 1.0]])


def rotation_matrix(angle_deg: float) -> np.ndarray:
    t = np.deg2rad(angle_deg)
    return np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])


def apply_transform(points: np.ndarray, transform: Transform) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if isinstance(transform, ShearTransform):
        return pts @ shear_matrix(transform.factor).T
    if isinstance(transform, RotateTransform):
        return (pts - CENTRE) @ rotation_matrix(transform.angle).T + CENTRE
    if isinstance(transform, CompositeTransform):
        sheared = pts @ shear_matrix(transform.factor).T
        return (sheared - CENTRE) @ rotation_matrix(transform.angle).T + CENTRE
    raise ConfigError(f"Unsupported transform {transform!r}")


def image_bounds(transform: Transform) -> Tuple[np.ndarray, np.ndarray]:
    """
    Axis-aligned bounding box (lower, upper corner) of the transformed unit square.
    """
    corners = apply_transform(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), transform)
    return corners.min(axis=0), corners.max(axis=0)


def generate_pair(config: SynthConfig) -> SynthPair:
    if config.n_points < 3:
        logger.warning(f"n_points={config.n_points}: no left triangles can be formed for this pair")
    rng = np.random.default_rng(config.seed)
    n, d = config.n_points, config.descriptor_dim

    left_pts = rng.uniform(0.0, 1.0, size=(n, 2))
    left_desc = rng.standard_normal((n, d))

    right_pts = apply_transform(left_pts, config.transform)
    if config.jitter_sigma > 0:
        right_pts = right_pts + rng.normal(0.0, config.jitter_sigma, size=right_pts.shape)
    right_desc = left_desc.copy()
    if config.descriptor_noise_sigma > 0:
        right_desc = right_desc + rng.normal(0.0, config.descriptor_noise_sigma, size=right_desc.shape)

    if config.distractor_count:
        lo, hi = image_bounds(config.transform)
        extra_pts = rng.uniform(lo, hi, size=(config.distractor_count, 2))
        extra_desc = rng.standard_normal((config.distractor_count, d))
        right_pts = np.vstack([right_pts, extra_pts])
        right_desc = np.vstack([right_desc, extra_desc])

    # order[j] is the original row placed at right position j
    order = rng.permutation(len(right_pts))
    position = np.empty_like(order)
    position[order] = np.arange(len(order))

    return SynthPair(
        left=PointSet(left_pts, left_desc),
        right=PointSet(right_pts[order], right_desc[order]),
        ground_truth={i: int(position[i]) for i in range(n)},
        config=config,
    )


def label_candidates(graph: MatchHypergraph, ground_truth: Mapping[int, int]) -> Labeling:
    """
    Label 1 for candidates equal to the true correspondence, else 0.
    """
    missing = sorted({n.left_index for n in graph.nodes} - set(ground_truth))
    if missing:
        raise MissingGroundTruthError(f"Ground truth missing for left features {missing}")
    return Labeling(np.array([int(ground_truth[n.left_index] == n.right_index) for n in graph.nodes], dtype=np.int8))


def truth_available(graph: MatchHypergraph, ground_truth: Mapping[int, int]) -> List[int]:
    """
    Left features whose candidate set contains the true match.
    """
    return sorted(
        {n.left_index for n in graph.nodes if ground_truth.get(n.left_index) == n.right_index}
    )


def transform_sweep(base: SynthConfig, kind: str, n_pairs: int, max_magnitude: Optional[float] = None) -> List[SynthConfig]:
    """
    A sequence of configs with linearly increasing transform magnitude, the
    way an image sequence drifts further from its first frame. Seeds are
    base.seed, base.seed + 1, ...
    """
    if n_pairs < 1:
        raise ConfigError("A sweep needs at least one pair")
    if kind == "shear":
        top = 2.0 if max_magnitude is None else max_magnitude
        magnitudes = np.linspace(1.0, top, n_pairs + 1)[1:]
        make = lambda mag: ShearTransform(factor=float(mag))
    elif kind == "rotate":
        top = 90.0 if max_magnitude is None else max_magnitude
        magnitudes = np.linspace(0.0, top, n_pairs + 1)[1:]
        make = lambda mag: RotateTransform(angle=float(mag))
    else:
        raise ConfigError(f"Sweeps support 'shear' or 'rotate', got '{kind}'")
    try:
        return [
            base.model_copy(update={"transform": make(mag), "seed": base.seed + i})
            for i, mag in enumerate(magnitudes)
        ]
    except ValueError as e:
        raise ConfigError(f"Invalid sweep magnitude: {e}") from e


def make_transform(kind: str, magnitude: Optional[float] = None, angle: Optional[float] = None) -> Transform:
    """
    Builds a transform from CLI-style arguments; `magnitude` is the shear
    factor or rotation angle depending on `kind`.
    """
    try:
        if kind == "shear":
            return ShearTransform(factor=1.0 if magnitude is None else magnitude)
        if kind == "rotate":
            return RotateTransform(angle=0.0 if magnitude is None else magnitude)
        if kind == "composite":
            return CompositeTransform(factor=1.0 if magnitude is None else magnitude, angle=angle or 0.0)
    except ValueError as e:
        raise ConfigError(f"Invalid {kind} transform: {e}") from e
    raise ConfigError(f"Unknown transform '{kind}'")
