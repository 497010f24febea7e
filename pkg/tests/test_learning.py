import itertools
import unittest
from math import comb

import numpy as np
from numpy.testing import assert_allclose
from scipy.special import logsumexp

from engine.baselines import linear_penalty_model
from engine.config import BPOptions, MatchParams, ShearTransform, SynthConfig, TrainConfig
from engine.core import (
    CandidateMatch,
    Hyperedge,
    Labeling,
    MatchHypergraph,
    PenaltyModel,
    count_cost_table,
    feature_vector,
    total_energy,
)
from engine.errors import ConfigError, LabelingMismatchError
from engine.learning import (
    TrainingInstance,
    expected_features,
    gradient,
    objective,
    observed_features,
    penalty_shape,
    train,
)
from engine.matching import build_match_hypergraph, match_pipeline
from engine.metrics import MatchMetrics
from engine.synthdata import generate_pair, label_candidates, truth_available

EXACT_BP = BPOptions(max_iters=500, tolerance=1e-13, damping=0.0)


def tree_instance(rng, n_edges=4):
    """
    A chain of triangles sharing one node each, with random weights and labels.
    """
    n = 2 * n_edges + 1
    nodes = [CandidateMatch(i, i, 1.0) for i in range(n)]
    edges = [Hyperedge((2 * j, 2 * j + 1, 2 * j + 2), float(rng.uniform(0.05, 0.95))) for j in range(n_edges)]
    graph = MatchHypergraph.from_matches(nodes, edges)
    return TrainingInstance(graph, Labeling(rng.integers(0, 2, size=n)))


def synthetic_instances(n_pairs=2, noise=0.6):
    instances = []
    for seed in range(n_pairs):
        pair = generate_pair(
            SynthConfig(n_points=15, transform=ShearTransform(factor=1.3), descriptor_noise_sigma=noise, seed=seed)
        )
        graph, _ = build_match_hypergraph(pair.left, pair.right, MatchParams(m=2))
        instances.append(TrainingInstance(graph, label_candidates(graph, pair.ground_truth)))
    return instances


def isolated_triangles(weights, ones):
    """
    Disjoint triangles; triangle j has weight weights[j] and its first ones[j] nodes labeled 1.
    """
    n = 3 * len(weights)
    nodes = [CandidateMatch(i, i, 1.0) for i in range(n)]
    edges = [Hyperedge((3 * j, 3 * j + 1, 3 * j + 2), float(w)) for j, w in enumerate(weights)]
    labels = np.zeros(n, dtype=np.int8)
    for j, a in enumerate(ones):
        labels[3 * j : 3 * j + a] = 1
    return TrainingInstance(MatchHypergraph.from_matches(nodes, edges), Labeling(labels))


def triangle_count_distribution(model, weight):
    """
    P(eta1 = a), a = 0..3, for a triangle sharing no node with another clique.
    """
    cost = count_cost_table(weight, 3, model)[::-1]  # indexed by eta1
    log_p = np.log([comb(3, a) for a in range(4)]) - cost
    return np.exp(log_p - logsumexp(log_p))


def rounded_counts(p, total):
    """
    Largest-remainder rounding of total * p to integers summing to total.
    """
    raw = np.asarray(p) * total
    counts = np.floor(raw).astype(int)
    for i in np.argsort(counts - raw)[: total - counts.sum()]:
        counts[i] += 1
    return counts


def matching_instances(seeds, params):
    instances, pairs = [], []
    for seed in seeds:
        pair = generate_pair(
            SynthConfig(n_points=12, transform=ShearTransform(factor=1.2), descriptor_noise_sigma=1.0, seed=seed)
        )
        graph, _ = build_match_hypergraph(pair.left, pair.right, params)
        instances.append(TrainingInstance(graph, label_candidates(graph, pair.ground_truth)))
        pairs.append(pair)
    return instances, pairs


class TestFeatures(unittest.TestCase):
    def test_observed_sums_clique_features(self):
        rng = np.random.default_rng(0)
        inst = tree_instance(rng, n_edges=2)
        labels = inst.truth.labels
        expected = {}
        for edge in inst.graph.edges:
            for key, value in feature_vector(edge, labels[list(edge.node_ids)], "discrete").items():
                expected[key] = expected.get(key, 0.0) + value
        got = observed_features([inst], "discrete", k_max=3)
        self.assertEqual(set(got), set(expected))
        for key in expected:
            self.assertAlmostEqual(got[key], expected[key])

    def test_expected_features_are_non_positive(self):
        rng = np.random.default_rng(1)
        inst = tree_instance(rng)
        model = PenaltyModel("discrete", 3, rng.uniform(-1, 1, size=(2, 4)))
        for value in expected_features(inst, model, EXACT_BP).values():
            self.assertLessEqual(value, 0.0)

    def test_uniform_model_expectations(self):
        graph = MatchHypergraph.from_matches([CandidateMatch(i, i, 1.0) for i in range(3)], [Hyperedge((0, 1, 2), 1.0)])
        inst = TrainingInstance(graph, Labeling(np.zeros(3, dtype=int)))
        got = expected_features(inst, PenaltyModel.zeros("discrete", 3), EXACT_BP)
        self.assertEqual(set(got), {(1, 0), (1, 1), (1, 2), (1, 3)})
        for (_, alpha), value in got.items():
            self.assertAlmostEqual(value, -comb(3, 3 - alpha) / 8)

    def test_expectations_match_sample_averages(self):
        rng = np.random.default_rng(5)
        inst = tree_instance(rng, n_edges=2)
        model = PenaltyModel("discrete", 3, rng.uniform(-1, 1, size=(2, 4)))
        labelings = [np.array(x) for x in itertools.product((0, 1), repeat=inst.graph.n_nodes)]
        log_w = np.array([-total_energy(inst.graph, Labeling(x), model) for x in labelings])
        p = np.exp(log_w - logsumexp(log_w))
        n_samples = 100_000
        counts = rng.multinomial(n_samples, p / p.sum())

        average = {}
        for x, count in zip(labelings, counts):
            if count == 0:
                continue
            sample = TrainingInstance(inst.graph, Labeling(x))
            for key, value in observed_features([sample], "discrete", k_max=3).items():
                average[key] = average.get(key, 0.0) + count * value / n_samples

        expected = expected_features(inst, model, EXACT_BP)
        keys = sorted(set(average) | set(expected))
        a = np.array([average.get(key, 0.0) for key in keys])
        e = np.array([expected.get(key, 0.0) for key in keys])
        self.assertLessEqual(np.linalg.norm(a - e) / np.linalg.norm(e), 0.05)

    def test_mismatched_truth(self):
        rng = np.random.default_rng(2)
        inst = tree_instance(rng)
        with self.assertRaises(LabelingMismatchError):
            TrainingInstance(inst.graph, Labeling(np.zeros(3, dtype=int)))


class TestGradient(unittest.TestCase):
    def test_matches_finite_differences_on_trees(self):
        rng = np.random.default_rng(3)
        h = 1e-5
        for trial in range(20):
            variant = "discrete" if trial % 2 == 0 else "polynomial"
            instances = [tree_instance(rng, n_edges=int(rng.integers(1, 5)))]
            config = TrainConfig(variant=variant, l2_strength=0.01, bp_opts=EXACT_BP)
            width = PenaltyModel.width_for(variant, 3)
            model = PenaltyModel(variant, 3, rng.uniform(-1, 1, size=(2, width)))
            grad = gradient(instances, model, config)
            for (c, j), value in grad.items():
                plus = model.parameters.copy()
                minus = model.parameters.copy()
                plus[c, j] += h
                minus[c, j] -= h
                numeric = (
                    objective(instances, model.with_parameters(plus), config)
                    - objective(instances, model.with_parameters(minus), config)
                ) / (2 * h)
                self.assertLessEqual(abs(numeric - value), 1e-4 * max(abs(numeric), 1e-2))

    def test_exact_inference_agrees_with_bp_on_trees(self):
        rng = np.random.default_rng(4)
        instances = [tree_instance(rng, n_edges=3)]
        model = PenaltyModel("discrete", 3, rng.uniform(-1, 1, size=(2, 4)))
        bp = TrainConfig(bp_opts=EXACT_BP)
        exact = TrainConfig(bp_opts=EXACT_BP, exact_inference=True)
        self.assertAlmostEqual(objective(instances, model, bp), objective(instances, model, exact), places=8)
        g_bp, g_exact = gradient(instances, model, bp), gradient(instances, model, exact)
        for key in g_bp:
            self.assertAlmostEqual(g_bp[key], g_exact[key], places=7)


    def test_class_shift_moves_only_the_l2_term(self):
        rng = np.random.default_rng(6)
        instances = [tree_instance(rng, n_edges=3), tree_instance(rng, n_edges=2)]
        for variant in ("discrete", "polynomial"):
            config = TrainConfig(variant=variant, l2_strength=0.05, bp_opts=EXACT_BP)
            model = PenaltyModel(variant, 3, rng.uniform(-1, 1, size=(2, PenaltyModel.width_for(variant, 3))))
            base = objective(instances, model, config)
            for c in (0, 1):
                shifted = model.shifted(c, 0.7)
                l2_change = -0.5 * 0.05 * (np.sum(shifted.parameters ** 2) - np.sum(model.parameters ** 2))
                self.assertAlmostEqual(objective(instances, shifted, config) - base, l2_change, places=8)

    def test_objective_without_cliques(self):
        graph = MatchHypergraph.from_matches([CandidateMatch(i, 0, 0.5) for i in range(4)])
        inst = TrainingInstance(graph, Labeling(np.array([1, 0, 0, 1])))
        value = objective([inst], PenaltyModel.zeros("discrete", 3), TrainConfig())
        self.assertAlmostEqual(value, -4 * np.log(2.0))

    def test_gradient_without_instances_is_the_l2_pull(self):
        rng = np.random.default_rng(7)
        model = PenaltyModel("discrete", 3, rng.uniform(-1, 1, size=(2, 4)))
        grad = gradient([], model, TrainConfig(l2_strength=0.05))
        self.assertEqual(len(grad), 8)
        for (c, j), value in grad.items():
            self.assertAlmostEqual(value, -0.05 * model.parameters[c, j])


class TestTrain(unittest.TestCase):
    def test_accepted_objective_is_monotone(self):
        result = train(synthetic_instances(), TrainConfig(max_iters=15))
        values = result.log["objective"].to_numpy()
        self.assertTrue((np.diff(values) >= -1e-9).all())
        self.assertEqual(
            list(result.log.columns),
            ["iteration", "objective", "grad_max_norm", "step_size", "bp_nonconverged_count", "accepted"],
        )
        self.assertEqual(result.model.parameters.shape, (2, 4))

    def test_tree_instances_reach_grad_tolerance(self):
        rng = np.random.default_rng(12)
        instances = [tree_instance(rng, n_edges=3) for _ in range(3)]
        result = train(instances, TrainConfig(max_iters=3000, bp_opts=EXACT_BP))
        self.assertTrue(result.converged)
        self.assertLess(float(result.log["grad_max_norm"].iloc[-1]), 1e-3)
        values = result.log["objective"].to_numpy()
        self.assertTrue((np.diff(values) >= 0).all())

    def test_oversized_steps_are_rejected_not_raised(self):
        instances, _ = matching_instances([21, 22], MatchParams(m=3, knn=4))
        result = train(instances, TrainConfig(step_size=500.0, max_iters=4))
        values = result.log["objective"].to_numpy()
        self.assertTrue(np.isfinite(values).all())
        self.assertTrue((np.diff(values) >= 0).all())
        self.assertEqual(len(result.log), 5)

    def test_polynomial_variant_has_six_parameters(self):
        result = train(synthetic_instances(n_pairs=1), TrainConfig(variant="polynomial", max_iters=5))
        self.assertEqual(result.model.variant, "polynomial")
        self.assertEqual(result.model.parameters.size, 6)

    def test_empty_training_set(self):
        with self.assertRaises(ConfigError):
            train([], TrainConfig())

    def test_penalties_frame(self):
        result = train(synthetic_instances(n_pairs=1), TrainConfig(max_iters=3))
        df = result.penalties_frame()
        self.assertEqual(len(df), 8)
        assert_allclose(df.loc[df["alpha"] == 0, "penalty"], 0.0)


class TestPolynomialRecovery(unittest.TestCase):
    def test_quadratic_generator_is_recovered(self):
        # g_0 = 0.4a + 0.15a^2, g_1 = 0.9a - 0.2a^2
        generator = PenaltyModel.from_tables([0.0, 0.55, 1.4, 2.55], [0.0, 0.7, 1.0, 0.9])
        weights, ones = [], []
        for lam in (0.0, 0.25, 0.5, 0.75, 1.0):
            for a, count in enumerate(rounded_counts(triangle_count_distribution(generator, lam), 300)):
                weights += [lam] * int(count)
                ones += [a] * int(count)
        config = TrainConfig(
            variant="polynomial", step_size=0.5, max_iters=1500, grad_tolerance=1e-2, bp_opts=EXACT_BP
        )
        result = train([isolated_triangles(weights, ones)], config)
        for lam in (0.1, 0.35, 0.6, 0.85):
            learned = triangle_count_distribution(result.model, lam)
            truth = triangle_count_distribution(generator, lam)
            self.assertLessEqual(0.5 * float(np.abs(learned - truth).sum()), 0.02)


class TestTrainingOnMatchingPairs(unittest.TestCase):
    """
    A small learned-versus-linear comparison on sheared synthetic pairs.
    """

    def test_learned_model_leaves_uniform_and_matches(self):
        params = MatchParams(m=3, knn=4)
        train_set, _ = matching_instances([100, 101], params)
        _, held_out = matching_instances([102, 103, 104], params)
        result = train(train_set, TrainConfig(max_iters=30))

        log = result.log
        self.assertGreater(float(log["objective"].iloc[-1]), float(log["objective"].iloc[0]))
        self.assertGreater(int(log["accepted"].iloc[1:].sum()), 0)
        self.assertGreater(float(np.max(np.abs(result.model.parameters))), 0.25)
        self.assertTrue(all(isinstance(flag, bool) for flag in penalty_shape(result.model).values()))

        metrics = MatchMetrics()
        correct = {"learned": 0, "linear": 0}
        for pair in held_out:
            for name, model in (("learned", result.model), ("linear", linear_penalty_model())):
                out = match_pipeline(pair.left, pair.right, model, params)
                available = truth_available(out.graph, pair.ground_truth)
                row = metrics.evaluate_pair(out.assignment, pair.ground_truth, available)
                self.assertTrue(np.isfinite(row["pct_incorrect"]))
                correct[name] += row["n_correct"]
        self.assertGreater(correct["learned"], 0)
        self.assertGreaterEqual(correct["learned"], 0.5 * correct["linear"])


class TestPenaltyShape(unittest.TestCase):
    def test_flags(self):
        model = PenaltyModel.from_tables([0, 1, 3, 6], [0, 2, 3, 3.5])
        self.assertEqual(
            penalty_shape(model),
            {"g1_nondecreasing": True, "g1_concave": True, "g0_nondecreasing": True, "g0_convex": True},
        )
        flipped = PenaltyModel.from_tables([0, 2, 3, 3.5], [0, 1, 3, 6])
        shape = penalty_shape(flipped)
        self.assertFalse(shape["g1_concave"])
        self.assertFalse(shape["g0_convex"])


if __name__ == "__main__":
    unittest.main()
