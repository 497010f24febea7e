import pandas as pd
from typing import Any, Dict, Iterable, List, Mapping

from engine.matching import MatchAssignment

PAIR_COLUMNS = ["pair", "method", "n_truth_available", "n_correct", "n_incorrect", "pct_incorrect"]
SUMMARY_COLUMNS = ["method", "n_pairs", "mean_correct", "mean_incorrect", "mean_pct_incorrect", "std_pct_incorrect"]


class MatchMetrics:
    """
    Accuracy of hard assignments against ground truth.

    A match counts as correct iff it equals the ground truth. pct_incorrect
    is measured over left features whose candidate set contains the true
    match, so unassigned features among them count as incorrect (an empty
    assignment scores 100%).
    """

    def evaluate_pair(
        self,
        assignment: MatchAssignment,
        ground_truth: Mapping[int, int],
        available: Iterable[int],
    ) -> Dict[str, Any]:
        available = set(available)
        matched = assignment.as_dict()
        n_correct = sum(1 for l, r in matched.items() if ground_truth.get(l) == r)
        n_incorrect = len(matched) - n_correct
        correct_available = sum(1 for l in available if l in matched and ground_truth.get(l) == matched[l])

        if available:
            pct = 100.0 * (len(available) - correct_available) / len(available)
        else:
            pct = float("nan")

        return {
            "n_truth_available": len(available),
            "n_correct": n_correct,
            "n_incorrect": n_incorrect,
            "pct_incorrect": pct,
        }

    def pairs_frame(self, rows: List[Dict[str, Any]]) -> pd.DataFrame:
        df = pd.DataFrame(rows, columns=PAIR_COLUMNS)
        return df.sort_values(["pair", "method"], kind="stable").reset_index(drop=True)

    def summarize(self, pairs: pd.DataFrame) -> pd.DataFrame:
        """
        Mean and sample standard deviation (n - 1 denominator) per method.
        """
        rows = []
        for method, group in pairs.groupby("method", sort=True):
            pct = group["pct_incorrect"].astype(float)
            rows.append(
                {
                    "method": method,
                    "n_pairs": len(group),
                    "mean_correct": float(group["n_correct"].mean()),
                    "mean_incorrect": float(group["n_incorrect"].mean()),
                    "mean_pct_incorrect": float(pct.mean()),
                    "std_pct_incorrect": float(pct.std(ddof=1)) if pct.count() > 1 else float("nan"),
                }
            )
        return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)

    def write(self, df: pd.DataFrame, path: str) -> None:
        df.to_csv(path, index=False, float_format="%.10g")
