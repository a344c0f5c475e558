"""
Dataset Store
Class-named directories of PPM images plus a `path,label,split` manifest
"""

import logging
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd

from ..core.exceptions import DatasetError, FormatError
from ..core.interfaces import IDatasetStore
from ..core.models import Dataset
from .image_io import read_ppm, write_ppm

logger = logging.getLogger(__name__)

MANIFEST_NAME = "dataset_manifest.csv"
MANIFEST_COLUMNS = ["path", "label", "split"]


class FileDatasetStore(IDatasetStore):
    """PPM-per-image storage"""

    def save_dataset(self, datasets: List[Dataset], root: Path) -> Path:
        root = Path(root)
        rows = []
        for ds in datasets:
            for i, (image, label) in enumerate(zip(ds.images, ds.labels)):
                relative = f"{ds.class_names[label]}/{ds.split}_{i:05d}.ppm"
                write_ppm(image, root / relative)
                rows.append({"path": relative, "label": int(label), "split": ds.split})
        manifest = root / MANIFEST_NAME
        pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(manifest, index=False, lineterminator="\n")
        logger.info(f"Wrote {len(rows)} images under {root}")
        return manifest

    def load_dataset(self, root: Path, split: str) -> Dataset:
        root = Path(root)
        manifest = root / MANIFEST_NAME
        if not manifest.exists():
            raise FormatError(f"{manifest}: dataset manifest not found")
        frame = pd.read_csv(manifest, dtype={"path": str, "label": np.int64, "split": str})
        if list(frame.columns) != MANIFEST_COLUMNS:
            raise FormatError(f"{manifest}: header {list(frame.columns)}, expected {MANIFEST_COLUMNS}")

        names: Dict[int, str] = {}
        for row in frame.itertuples(index=False):
            names.setdefault(int(row.label), Path(row.path).parent.name)
        if sorted(names) != list(range(len(names))):
            raise DatasetError(f"{manifest}: labels {sorted(names)} are not contiguous from 0")

        rows = frame[frame["split"] == split]
        if rows.empty:
            raise DatasetError(f"{manifest}: no images in split '{split}'")
        images = np.stack([read_ppm(root / p) for p in rows["path"]])
        class_names = tuple(names[k] for k in range(len(names)))
        return Dataset(images, rows["label"].to_numpy(), class_names, split)
