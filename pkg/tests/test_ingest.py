import os
import tempfile
import unittest

from numpy.testing import assert_allclose

from engine.baselines import linear_penalty_model
from engine.config import RotateTransform, SynthConfig
from engine.core import PenaltyModel
from engine.errors import BundleError, ConfigError, MissingGroundTruthError
from engine.ingest import BundleStore
from engine.models import ModelManager
from engine.synthdata import generate_pair


class TestBundleStore(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.store = BundleStore(os.path.join(self.tmp.name, "bundle")).create()

    def tearDown(self):
        self.tmp.cleanup()

    def test_pair_files(self):
        pair = generate_pair(SynthConfig(n_points=6, seed=2))
        self.store.write_pair("pair_000", pair.left, pair.right, pair.ground_truth)
        left, right = self.store.read_points("pair_000")
        assert_allclose(left.points, pair.left.points)
        assert_allclose(right.descriptors, pair.right.descriptors)
        self.assertEqual(self.store.read_truth("pair_000"), pair.ground_truth)

    def test_missing_truth(self):
        pair = generate_pair(SynthConfig(n_points=4, seed=0))
        self.store.write_pair("unlabeled", pair.left, pair.right)
        self.assertFalse(self.store.has_truth("unlabeled"))
        with self.assertRaises(MissingGroundTruthError):
            self.store.read_truth("unlabeled")

    def test_missing_pair(self):
        with self.assertRaises(BundleError):
            self.store.read_points("nope")

    def test_manifest_splits(self):
        self.store.write_manifest(["a", "b"], ["c"])
        self.assertEqual(self.store.pairs("train"), ["a", "b"])
        self.assertEqual(self.store.pairs("test"), ["c"])
        self.assertEqual(self.store.pairs(), ["a", "b", "c"])
        with self.assertRaises(BundleError):
            self.store.pairs("validation")

    def test_missing_manifest(self):
        with self.assertRaises(BundleError):
            BundleStore(self.tmp.name).pairs()

    def test_configs(self):
        configs = {"p": SynthConfig(n_points=7, transform=RotateTransform(angle=30.0), seed=5)}
        self.store.write_configs(configs)
        loaded = self.store.read_configs()
        self.assertEqual(loaded["p"], configs["p"])
        self.assertIsInstance(loaded["p"].transform, RotateTransform)


class TestModelManager(unittest.TestCase):
    def setUp(self):
        ModelManager().clear()

    def test_singleton(self):
        self.assertIs(ModelManager(), ModelManager())

    def test_resolve(self):
        manager = ModelManager()
        assert_allclose(manager.resolve("linear").parameters, linear_penalty_model().parameters)
        self.assertIsNone(manager.resolve("greedy"))
        self.assertIsNone(manager.resolve("spectral"))
        with self.assertRaises(ConfigError):
            manager.resolve("learned")
        with self.assertRaises(ConfigError):
            manager.resolve("oracle")

    def test_checkpoint_cache(self):
        manager = ModelManager()
        model = PenaltyModel.from_tables([0, 1, 2, 4], [0, 1, 1.5, 1.75])
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "model.json")
            manager.save(model, path)
            self.assertIs(manager.resolve("learned", path), model)
            manager.clear()
            loaded = manager.load(path)
            self.assertIs(manager.load(path), loaded)
            assert_allclose(loaded.parameters, model.parameters)

    def test_missing_checkpoint(self):
        with self.assertRaises(BundleError):
            ModelManager().load(os.path.join(tempfile.gettempdir(), "does-not-exist", "model.json"))


if __name__ == "__main__":
    unittest.main()
