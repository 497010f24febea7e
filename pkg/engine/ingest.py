import json
import logging
import os
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from engine.config import SynthConfig
from engine.errors import BundleError, MissingGroundTruthError
from engine.matching import PointSet

logger = logging.getLogger(__name__)

SPLITS = ("train", "test", "all")


class BundleStore:
    """
    On-disk dataset bundle:

        <dir>/config.json          generator configs, one per pair
        <dir>/manifest.json        {"train": [...], "test": [...]}
        <dir>/pairs/<name>.left.json, <name>.right.json, <name>.truth.csv
    """

    def __init__(self, bundle_dir: str):
        self.bundle_dir = bundle_dir
        self.pairs_dir = os.path.join(bundle_dir, "pairs")
        self.manifest_path = os.path.join(bundle_dir, "manifest.json")
        self.config_path = os.path.join(bundle_dir, "config.json")

    def create(self) -> "BundleStore":
        os.makedirs(self.pairs_dir, exist_ok=True)
        return self

    def _path(self, name: str, suffix: str) -> str:
        return os.path.join(self.pairs_dir, f"{name}.{suffix}")

    def write_pair(
        self,
        name: str,
        left: PointSet,
        right: PointSet,
        ground_truth: Optional[Dict[int, int]] = None,
    ) -> None:
        left.save(self._path(name, "left.json"))
        right.save(self._path(name, "right.json"))
        if ground_truth is not None:
            df = pd.DataFrame(sorted(ground_truth.items()), columns=["left_index", "right_index"])
            df.to_csv(self._path(name, "truth.csv"), index=False)

    def read_points(self, name: str) -> Tuple[PointSet, PointSet]:
        left_path, right_path = self._path(name, "left.json"), self._path(name, "right.json")
        for path in (left_path, right_path):
            if not os.path.exists(path):
                raise BundleError(f"Pair file not found: {path}")
        try:
            return PointSet.load(left_path), PointSet.load(right_path)
        except (json.JSONDecodeError, ValueError) as e:
            raise BundleError(f"Could not read pair '{name}': {e}") from e

    def has_truth(self, name: str) -> bool:
        return os.path.exists(self._path(name, "truth.csv"))

    def read_truth(self, name: str) -> Dict[int, int]:
        path = self._path(name, "truth.csv")
        if not os.path.exists(path):
            raise MissingGroundTruthError(f"No ground truth for pair '{name}' ({path})")
        df = pd.read_csv(path)
        if list(df.columns[:2]) != ["left_index", "right_index"]:
            raise BundleError(f"Ground-truth CSV {path} needs columns left_index,right_index")
        return dict(zip(df["left_index"].astype(int).tolist(), df["right_index"].astype(int).tolist()))

    def write_manifest(self, train: Sequence[str], test: Sequence[str]) -> None:
        with open(self.manifest_path, "w", encoding="utf-8") as f:
            json.dump({"train": list(train), "test": list(test)}, f, indent=2)
            f.write("\n")

    def read_manifest(self) -> Dict[str, List[str]]:
        if not os.path.exists(self.manifest_path):
            raise BundleError(f"Bundle manifest not found: {self.manifest_path}")
        with open(self.manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
        return {"train": list(manifest.get("train", [])), "test": list(manifest.get("test", []))}

    def pairs(self, split: str = "all") -> List[str]:
        if split not in SPLITS:
            raise BundleError(f"Unknown split '{split}'; expected one of {SPLITS}")
        manifest = self.read_manifest()
        if split == "all":
            return manifest["train"] + manifest["test"]
        return manifest[split]

    def write_configs(self, configs: Dict[str, SynthConfig]) -> None:
        with open(self.config_path, "w", encoding="utf-8") as f:
            json.dump({name: cfg.model_dump() for name, cfg in configs.items()}, f, indent=2)
            f.write("\n")

    def read_configs(self) -> Dict[str, SynthConfig]:
        if not os.path.exists(self.config_path):
            return {}
        with open(self.config_path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        return {name: SynthConfig.model_validate(cfg) for name, cfg in raw.items()}
