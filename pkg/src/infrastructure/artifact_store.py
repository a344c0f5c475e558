"""
Artifact Store
Per-experiment output directories with a resolved-config echo and a run manifest
"""

import hashlib
import logging
from pathlib import Path
from typing import List, Tuple

import pandas as pd

from ..core.exceptions import PrerequisiteError

logger = logging.getLogger(__name__)

CONFIG_ECHO = "config.resolved.txt"
RUN_MANIFEST = "run_manifest.csv"
MANIFEST_COLUMNS = ["kind", "name", "value"]


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class ExperimentWorkspace:
    """Output directory of one experiment run"""

    def __init__(self, root: Path, name: str):
        self.root = Path(root)
        self.name = name
        self.directory = self.root / name
        self.directory.mkdir(parents=True, exist_ok=True)
        self._inputs: List[Path] = []
        self._seeds: List[Tuple[str, int]] = []
        self._outputs: List[Path] = []

    def path(self, relative: str) -> Path:
        target = self.directory / relative
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def echo_config(self, text: str) -> Path:
        target = self.directory / CONFIG_ECHO
        target.write_text(text, encoding="utf-8")
        return target

    def record_input(self, path: Path) -> None:
        self._inputs.append(Path(path))

    def record_seed(self, name: str, value: int) -> None:
        self._seeds.append((name, int(value)))

    def record_output(self, path: Path) -> Path:
        self._outputs.append(Path(path))
        return Path(path)

    @property
    def outputs(self) -> List[Path]:
        return list(self._outputs)

    def _relative(self, path: Path) -> str:
        try:
            return path.resolve().relative_to(self.root.resolve()).as_posix()
        except ValueError:
            return str(path)

    def finalize(self) -> Path:
        """Write run_manifest.csv: inputs and outputs with SHA-256 hashes, plus seeds."""
        rows = [{"kind": "input", "name": self._relative(p), "value": sha256_file(p)} for p in self._inputs]
        rows += [{"kind": "seed", "name": name, "value": str(value)} for name, value in self._seeds]
        rows += [{"kind": "output", "name": self._relative(p), "value": sha256_file(p)} for p in self._outputs]
        target = self.directory / RUN_MANIFEST
        pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(target, index=False, lineterminator="\n")
        logger.info(f"{self.name}: {len(self._outputs)} outputs recorded in {target}")
        return target


class ArtifactStore:
    """Locates artifacts produced by earlier experiments under one output root"""

    def __init__(self, root: Path):
        self.root = Path(root)

    def workspace(self, experiment: str) -> ExperimentWorkspace:
        return ExperimentWorkspace(self.root, experiment)

    def locate(self, producer: str, relative: str) -> Path:
        return self.root / producer / relative

    def require(self, producer: str, relative: str) -> Path:
        path = self.locate(producer, relative)
        if not path.exists():
            raise PrerequisiteError(f"{producer}/{relative}", producer)
        return path
