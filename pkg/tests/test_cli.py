import json
import os
import tempfile
import unittest

import pandas as pd

from engine.models import ModelManager
from src.main import main


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


class TestCommands(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.data = os.path.join(self.tmp.name, "data")
        ModelManager().clear()

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, *parts):
        return os.path.join(self.tmp.name, *parts)

    def generate(self, *extra):
        args = ["generate", "--out", self.data, "--n-pairs", "3", "--n-train", "1", "--n-points", "12",
                "--noise", "0.6", "--transform", "shear", "--magnitude", "1.3", "--seed", "4"]
        return main(args + list(extra))

    def test_generate_writes_bundle(self):
        self.assertEqual(self.generate(), 0)
        with open(os.path.join(self.data, "manifest.json")) as f:
            manifest = json.load(f)
        self.assertEqual(manifest, {"train": ["pair_000"], "test": ["pair_001", "pair_002"]})
        for name in manifest["train"] + manifest["test"]:
            for suffix in ("left.json", "right.json", "truth.csv"):
                self.assertTrue(os.path.exists(os.path.join(self.data, "pairs", f"{name}.{suffix}")))

    def test_generate_is_byte_identical(self):
        self.generate()
        first = read_bytes(os.path.join(self.data, "pairs", "pair_001.right.json"))
        config = read_bytes(os.path.join(self.data, "config.json"))
        self.generate()
        self.assertEqual(read_bytes(os.path.join(self.data, "pairs", "pair_001.right.json")), first)
        self.assertEqual(read_bytes(os.path.join(self.data, "config.json")), config)

    def test_two_points_generate(self):
        code = main(["generate", "--out", self.data, "--n-pairs", "2", "--n-train", "1", "--n-points", "2"])
        self.assertEqual(code, 0)

    def test_sweep(self):
        self.assertEqual(self.generate("--sweep"), 0)
        with open(os.path.join(self.data, "config.json")) as f:
            configs = json.load(f)
        factors = [configs[name]["transform"]["factor"] for name in sorted(configs)]
        self.assertEqual(factors, sorted(factors))

    def test_invalid_config_is_usage_error(self):
        code = main(["generate", "--out", self.data, "--transform", "shear", "--magnitude", "3.0"])
        self.assertEqual(code, 2)

    def test_train_match_eval(self):
        self.generate()
        model_dir = self.path("model")
        self.assertEqual(main(["train", "--dataset", self.data, "--out", model_dir, "--max-iters", "5"]), 0)
        log = pd.read_csv(os.path.join(model_dir, "train_log.csv"))
        self.assertTrue((log["objective"].diff().dropna() >= -1e-9).all())
        self.assertTrue(os.path.exists(os.path.join(model_dir, "penalties.csv")))

        match_dir = self.path("match")
        code = main([
            "match", "--dataset", self.data, "--out", match_dir, "--method", "learned",
            "--model", os.path.join(model_dir, "model.json"), "--beliefs",
        ])
        self.assertEqual(code, 0)
        self.assertTrue(os.path.exists(os.path.join(match_dir, "assignments", "pair_001.csv")))
        self.assertTrue(os.path.exists(os.path.join(match_dir, "beliefs", "pair_002.csv")))

        eval_dir = self.path("eval")
        code = main([
            "eval", "--dataset", self.data, "--assignments", os.path.join(match_dir, "assignments"),
            "--out", eval_dir,
        ])
        self.assertEqual(code, 0)
        metrics = pd.read_csv(os.path.join(eval_dir, "metrics.csv"))
        self.assertEqual(metrics["pair"].tolist(), ["pair_001", "pair_002"])
        summary = pd.read_csv(os.path.join(eval_dir, "summary.csv"))
        self.assertEqual(summary.loc[0, "n_pairs"], 2)

    def test_polynomial_model_has_six_parameters(self):
        self.generate()
        model_dir = self.path("poly")
        code = main(["train", "--dataset", self.data, "--out", model_dir, "--variant", "polynomial", "--max-iters", "3"])
        self.assertEqual(code, 0)
        with open(os.path.join(model_dir, "model.json")) as f:
            model = json.load(f)
        self.assertEqual(model["variant"], "polynomial")
        self.assertEqual(sum(len(row) for row in model["parameters"]), 6)

    def test_empty_training_list(self):
        main(["generate", "--out", self.data, "--n-pairs", "2", "--n-train", "0", "--n-points", "8"])
        self.assertEqual(main(["train", "--dataset", self.data, "--out", self.path("m")]), 2)

    def test_missing_ground_truth(self):
        self.generate()
        os.remove(os.path.join(self.data, "pairs", "pair_000.truth.csv"))
        self.assertEqual(main(["train", "--dataset", self.data, "--out", self.path("m")]), 2)

    def test_learned_without_model(self):
        self.generate()
        self.assertEqual(main(["match", "--dataset", self.data, "--out", self.path("x"), "--method", "learned"]), 2)

    def test_seed_is_a_generate_flag_only(self):
        self.generate()
        for command in ("train", "match", "compare"):
            with self.assertRaises(SystemExit) as ctx:
                main([command, "--dataset", self.data, "--out", self.path("x"), "--seed", "1"])
            self.assertEqual(ctx.exception.code, 2)

    def test_missing_dataset_is_data_error(self):
        self.assertEqual(main(["train", "--dataset", self.path("absent"), "--out", self.path("m")]), 3)

    def test_compare(self):
        self.generate()
        out = self.path("cmp")
        code = main(["compare", "--dataset", self.data, "--out", out, "--method", "linear", "--method", "greedy"])
        self.assertEqual(code, 0)
        df = pd.read_csv(os.path.join(out, "compare.csv"))
        self.assertEqual(
            list(zip(df["pair"], df["method"])),
            [("pair_001", "greedy"), ("pair_001", "linear"), ("pair_002", "greedy"), ("pair_002", "linear")],
        )
        first = read_bytes(os.path.join(out, "compare.csv"))
        main(["compare", "--dataset", self.data, "--out", out, "--method", "greedy", "--method", "linear"])
        self.assertEqual(read_bytes(os.path.join(out, "compare.csv")), first)

    def test_compare_single_method(self):
        self.generate()
        out = self.path("cmp1")
        self.assertEqual(main(["compare", "--dataset", self.data, "--out", out, "--method", "spectral"]), 0)
        summary = pd.read_csv(os.path.join(out, "compare_summary.csv"))
        self.assertEqual(summary["method"].tolist(), ["spectral"])


if __name__ == "__main__":
    unittest.main()
