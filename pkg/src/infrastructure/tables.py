"""
CSV tables
Every result table goes through pandas with 4-decimal floats
"""

from pathlib import Path
from typing import Iterable, List, Mapping, Optional

import numpy as np
import pandas as pd

from ..core.models import EvalReport, PCAResult, TransferReport

FLOAT_FORMAT = "%.4f"

TRANSFER_COLUMNS = ["source_id", "target_id", "role", "clean_acc", "attacked_acc", "drop", "mean_cls_cosine"]
PER_CLASS_COLUMNS = ["model_id", "class", "clean_acc", "attacked_acc"]
PCA_COLUMNS = ["x", "y", "label", "condition"]
HISTOGRAM_COLUMNS = ["bin_low", "bin_high", "count"]


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def read_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path)


def transfer_table(report: TransferReport, random_drops: Optional[Mapping[str, float]] = None) -> pd.DataFrame:
    """One row per (source, target); `random_drops` adds the target's uniform-noise drop."""
    rows = []
    for source_id in report.source_ids:
        for target_id in report.target_ids:
            entry = report.entry(source_id, target_id)
            rows.append({
                "source_id": source_id,
                "target_id": target_id,
                "role": report.roles[(source_id, target_id)].value,
                "clean_acc": entry.clean_acc,
                "attacked_acc": entry.attacked_acc,
                "drop": entry.drop,
                "mean_cls_cosine": entry.mean_cls_cosine,
            })
            if random_drops is not None:
                rows[-1]["random_drop"] = random_drops[target_id]
    columns = TRANSFER_COLUMNS + (["random_drop"] if random_drops is not None else [])
    return pd.DataFrame(rows, columns=columns)


def per_class_table(reports: Iterable[EvalReport], class_names: List[str]) -> pd.DataFrame:
    rows = []
    for report in reports:
        for k, name in enumerate(class_names):
            rows.append({"model_id": report.model_id, "class": name,
                         "clean_acc": report.per_class_clean[k], "attacked_acc": report.per_class_attacked[k]})
    return pd.DataFrame(rows, columns=PER_CLASS_COLUMNS)


def pca_table(result: PCAResult, labels: np.ndarray, conditions: List[str]) -> pd.DataFrame:
    """Rows in input order; a missing second component is written as 0."""
    points = result.points
    xs = points[:, 0] if points.shape[1] > 0 else np.zeros(len(points))
    ys = points[:, 1] if points.shape[1] > 1 else np.zeros(len(points))
    return pd.DataFrame({"x": xs, "y": ys, "label": np.asarray(labels), "condition": conditions},
                        columns=PCA_COLUMNS)


def histogram_frame(counts: np.ndarray, edges: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame({"bin_low": edges[:-1], "bin_high": edges[1:], "count": counts}, columns=HISTOGRAM_COLUMNS)


def report_row(report: EvalReport, **extra) -> dict:
    """Flat summary row for sweeps and ablations."""
    row = dict(extra)
    row.update({"model_id": report.model_id, "clean_acc": report.clean_acc,
                "attacked_acc": report.attacked_acc, "drop": report.drop,
                "mean_cls_cosine": report.mean_cls_cosine})
    return row
