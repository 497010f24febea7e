"""
Command-line driver: generate / train / match / eval / compare.

    python -m src.main generate --out data/synth --n-pairs 25 --transform shear --magnitude 1.5
    python -m src.main train --dataset data/synth --out runs/model
    python -m src.main match --dataset data/synth --method learned --model runs/model/model.json --out runs/match
    python -m src.main eval --dataset data/synth --assignments runs/match/assignments --out runs/eval
    python -m src.main compare --dataset data/synth --method learned --method linear --method greedy \
        --model runs/model/model.json --out runs/compare
"""
import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Tuple

# Ensure engine can be imported if running from root
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dotenv import load_dotenv
from tqdm import tqdm

from engine.baselines import greedy_appearance, spectral_match
from engine.config import (
    BPOptions,
    ExperimentSpec,
    MatchParams,
    SpectralParams,
    SynthConfig,
    TrainConfig,
    method_list,
)
from engine.errors import EXIT_OK, ConfigError, exit_code_for
from engine.ingest import BundleStore
from engine.learning import TrainingInstance, penalty_shape, train
from engine.inference import write_trace_csv
from engine.matching import (
    MatchAssignment,
    PipelineResult,
    PointSet,
    build_match_hypergraph,
    candidate_matches,
    match_pipeline,
)
from engine.metrics import MatchMetrics
from engine.models import ModelManager
from engine.synthdata import generate_pair, label_candidates, make_transform, transform_sweep

logger = logging.getLogger(__name__)


def _params(args) -> MatchParams:
    return MatchParams.build(m=args.m, knn=args.knn, delta=args.delta)


def _bp_flags_given(args) -> bool:
    return any(
        getattr(args, name, None) is not None for name in ("bp_max_iters", "bp_tolerance", "bp_damping", "bp_schedule")
    )


def _bp_opts(args) -> BPOptions:
    return BPOptions.build(
        max_iters=args.bp_max_iters,
        tolerance=args.bp_tolerance,
        damping=args.bp_damping,
        schedule=args.bp_schedule,
        trace=bool(getattr(args, "bp_trace", False)),
    )


def _pair_names(store: BundleStore, split: str) -> List[str]:
    names = store.pairs(split)
    if not names:
        raise ConfigError(f"Split '{split}' of {store.bundle_dir} lists no pairs")
    return names


def _available(left: PointSet, right: PointSet, truth: Dict[int, int], m: int) -> List[int]:
    """
    Left features whose m appearance candidates include the true match.
    """
    per_left = candidate_matches(left, right, m) if len(right) else {}
    return sorted(l for l, cands in per_left.items() if any(c.right_index == truth.get(l) for c in cands))


def _run_method(
    method: str,
    left: PointSet,
    right: PointSet,
    model,
    params: MatchParams,
    bp_opts: BPOptions,
    one_to_one: bool,
) -> Tuple[MatchAssignment, Optional[PipelineResult]]:
    if method == "greedy":
        return greedy_appearance(left, right), None
    if method == "spectral":
        assignment, _ = spectral_match(left, right, SpectralParams.build(m=params.m))
        return assignment, None
    result = match_pipeline(left, right, model, params, bp_opts, one_to_one=one_to_one)
    return result.assignment, result


# --- commands ---------------------------------------------------------------


def cmd_generate(args) -> int:
    transform = make_transform(args.transform, args.magnitude, args.angle)
    base = SynthConfig.build(
        n_points=args.n_points,
        transform=transform,
        jitter_sigma=args.jitter,
        descriptor_dim=args.descriptor_dim,
        descriptor_noise_sigma=args.noise,
        distractor_count=args.distractors,
        seed=args.seed,
    )
    if args.n_pairs < 1:
        raise ConfigError("--n-pairs must be at least 1")
    if not 0 <= args.n_train <= args.n_pairs:
        raise ConfigError(f"--n-train must lie in [0, {args.n_pairs}]")

    if args.sweep:
        configs = transform_sweep(base, args.transform, args.n_pairs, args.magnitude)
    else:
        configs = [base.model_copy(update={"seed": base.seed + i}) for i in range(args.n_pairs)]

    store = BundleStore(args.out).create()
    names = [f"pair_{i:03d}" for i in range(len(configs))]
    for name, cfg in tqdm(list(zip(names, configs)), desc="generate", file=sys.stderr):
        pair = generate_pair(cfg)
        store.write_pair(name, pair.left, pair.right, pair.ground_truth)
    store.write_configs(dict(zip(names, configs)))
    store.write_manifest(names[: args.n_train], names[args.n_train :])

    print(f"pairs={len(names)} train={args.n_train} test={len(names) - args.n_train} out={args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    store = BundleStore(args.dataset)
    names = store.pairs("train")
    if not names:
        raise ConfigError(f"Bundle {args.dataset} lists no training pairs")
    params = _params(args)
    config = TrainConfig.build(
        step_size=args.step,
        max_iters=args.max_iters,
        l2_strength=args.l2,
        variant=args.variant,
        exact_inference=args.exact_inference or None,
        # training keeps its tighter BP defaults unless --bp-* flags are given
        bp_opts=_bp_opts(args) if _bp_flags_given(args) else None,
    )

    instances = []
    for name in tqdm(names, desc="build", file=sys.stderr):
        left, right = store.read_points(name)
        truth = store.read_truth(name)
        graph, _ = build_match_hypergraph(left, right, params)
        instances.append(TrainingInstance(graph, label_candidates(graph, truth)))

    result = train(instances, config)
    os.makedirs(args.out, exist_ok=True)
    ModelManager().save(result.model, os.path.join(args.out, "model.json"))
    result.write_log(os.path.join(args.out, "train_log.csv"))
    result.penalties_frame().to_csv(os.path.join(args.out, "penalties.csv"), index=False, float_format="%.10g")

    shape = penalty_shape(result.model)
    logger.info(f"Penalty shape: {shape}")
    if not result.converged:
        logger.warning("Training did not converge; see train_log.csv")
    return EXIT_OK


def cmd_match(args) -> int:
    methods = method_list([args.method])
    method = methods[0]
    spec = ExperimentSpec.build(
        dataset=args.dataset,
        model_path=args.model,
        method=method,
        params=_params(args),
        bp_opts=_bp_opts(args),
        out=args.out,
        one_to_one=args.one_to_one,
    )
    store = BundleStore(spec.dataset)
    model = ModelManager().resolve(spec.method, spec.model_path)

    assign_dir = os.path.join(spec.out, "assignments")
    os.makedirs(assign_dir, exist_ok=True)
    if args.beliefs:
        os.makedirs(os.path.join(spec.out, "beliefs"), exist_ok=True)
    if spec.bp_opts.trace:
        os.makedirs(os.path.join(spec.out, "trace"), exist_ok=True)

    for name in tqdm(_pair_names(store, args.split), desc=f"match[{method}]", file=sys.stderr):
        left, right = store.read_points(name)
        assignment, result = _run_method(
            method, left, right, model, spec.params, spec.bp_opts, spec.one_to_one
        )
        truth = store.read_truth(name) if store.has_truth(name) else None
        assignment.write_csv(os.path.join(assign_dir, f"{name}.csv"), truth)
        if result is not None and args.beliefs:
            result.beliefs_frame().to_csv(
                os.path.join(spec.out, "beliefs", f"{name}.csv"), index=False, float_format="%.10g"
            )
        if result is not None and spec.bp_opts.trace:
            write_trace_csv(result.beliefs, os.path.join(spec.out, "trace", f"{name}.csv"))
    return EXIT_OK


def cmd_eval(args) -> int:
    store = BundleStore(args.dataset)
    params = _params(args)
    metrics = MatchMetrics()
    rows = []
    for name in tqdm(_pair_names(store, args.split), desc="eval", file=sys.stderr):
        path = os.path.join(args.assignments, f"{name}.csv")
        if not os.path.exists(path):
            raise FileNotFoundError(f"No assignment for pair '{name}' in {args.assignments}")
        assignment = MatchAssignment.read_csv(path)
        left, right = store.read_points(name)
        truth = store.read_truth(name)
        row = metrics.evaluate_pair(assignment, truth, _available(left, right, truth, params.m))
        rows.append({"pair": name, "method": args.label, **row})

    pairs = metrics.pairs_frame(rows)
    os.makedirs(args.out, exist_ok=True)
    metrics.write(pairs, os.path.join(args.out, "metrics.csv"))
    metrics.write(metrics.summarize(pairs), os.path.join(args.out, "summary.csv"))
    return EXIT_OK


def cmd_compare(args) -> int:
    methods = method_list(args.method)
    store = BundleStore(args.dataset)
    params = _params(args)
    bp_opts = _bp_opts(args)
    manager = ModelManager()
    models = {m: manager.resolve(m, args.model) for m in methods}
    metrics = MatchMetrics()

    rows = []
    for name in tqdm(_pair_names(store, args.split), desc="compare", file=sys.stderr):
        left, right = store.read_points(name)
        truth = store.read_truth(name)
        available = _available(left, right, truth, params.m)
        for method in methods:
            assignment, _ = _run_method(method, left, right, models[method], params, bp_opts, args.one_to_one)
            rows.append({"pair": name, "method": method, **metrics.evaluate_pair(assignment, truth, available)})

    pairs = metrics.pairs_frame(rows)
    os.makedirs(args.out, exist_ok=True)
    metrics.write(pairs, os.path.join(args.out, "compare.csv"))
    metrics.write(metrics.summarize(pairs), os.path.join(args.out, "compare_summary.csv"))
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def _match_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--m", type=int, default=None, help="candidates per left feature (default 3)")
    p.add_argument("--knn", type=int, default=None, help="nearest neighbours for triangles (default 5)")
    p.add_argument("--delta", type=float, default=None, help="angle tolerance (default 0.5)")
    p.add_argument("--bp-max-iters", type=int, default=None)
    p.add_argument("--bp-tolerance", type=float, default=None)
    p.add_argument("--bp-damping", type=float, default=None)
    p.add_argument("--bp-schedule", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hgm", description="Hypergraph feature matching with learned penalties")
    parser.add_argument("--log-level", default=os.getenv("HGM_LOG_LEVEL", "INFO"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--n-pairs", type=int, default=25)
    p.add_argument("--n-train", type=int, default=5)
    p.add_argument("--n-points", type=int, default=30)
    p.add_argument("--transform", choices=["shear", "rotate", "composite"], default="shear")
    p.add_argument("--magnitude", type=float, default=None, help="shear factor or rotation angle")
    p.add_argument("--angle", type=float, default=None, help="rotation angle of a composite transform")
    p.add_argument("--sweep", action="store_true", help="increase the magnitude linearly across pairs")
    p.add_argument("--jitter", type=float, default=None)
    p.add_argument("--noise", type=float, default=None, help="descriptor noise sigma")
    p.add_argument("--distractors", type=int, default=None)
    p.add_argument("--descriptor-dim", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="learn penalty functions from the training split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=["discrete", "polynomial"], default=None)
    p.add_argument("--l2", type=float, default=None)
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--exact-inference", action="store_true")
    _match_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", help="write hard assignments for one method")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", default="learned")
    p.add_argument("--model", default=None)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--one-to-one", action="store_true")
    p.add_argument("--beliefs", action="store_true", help="also write per-node beliefs")
    p.add_argument("--bp-trace", action="store_true", help="also write per-iteration BP residuals")
    _match_flags(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="score assignments against ground truth")
    p.add_argument("--dataset", required=True)
    p.add_argument("--assignments", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--label", default="assignment", help="value of the method column")
    _match_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="evaluate several methods side by side")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", action="append", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.add_argument("--one-to-one", action="store_true")
    _match_flags(p)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    )
    try:
        return args.func(args)
    except Exception as e:
        code = exit_code_for(e)
        if code == 4:
            logger.exception(f"Internal error in '{args.command}'")
        else:
            logger.error(f"{args.command} failed: {e}")
        return code


if __name__ == "__main__":
    sys.exit(main())
