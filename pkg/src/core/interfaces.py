"""
Core interfaces
Services depend on these contracts, infrastructure implements them
"""

from abc import ABC, abstractmethod
from pathlib import Path
from typing import List, Tuple

from .models import Dataset, ModelHandle, ModelPool, Perturbation, ProbeWeights


class IArtifactRepository(ABC):
    """Persistence of models, probes and perturbations"""

    @abstractmethod
    def save_model(self, handle: ModelHandle, path: Path) -> Path:
        """Write a model checkpoint"""
        pass

    @abstractmethod
    def load_model(self, path: Path) -> ModelHandle:
        """Read a model checkpoint"""
        pass

    @abstractmethod
    def save_probe(self, probe: ProbeWeights, path: Path) -> Path:
        """Write probe weights with their owning model id"""
        pass

    @abstractmethod
    def load_probe(self, path: Path) -> ProbeWeights:
        """Read probe weights"""
        pass

    @abstractmethod
    def save_perturbation(self, perturbation: Perturbation, path: Path) -> Path:
        """Write a perturbation (bound checked before writing)"""
        pass

    @abstractmethod
    def load_perturbation(self, path: Path) -> Perturbation:
        """Read a perturbation"""
        pass

    @abstractmethod
    def save_pool_manifest(self, pool: ModelPool, paths: List[Path], path: Path) -> Path:
        """Write the `id,path,role` pool manifest"""
        pass

    @abstractmethod
    def load_pool_manifest(self, path: Path) -> Tuple[ModelPool, List[Path]]:
        """Read the pool manifest and every referenced checkpoint"""
        pass


class IDatasetStore(ABC):
    """On-disk dataset layout"""

    @abstractmethod
    def save_dataset(self, datasets: List[Dataset], root: Path) -> Path:
        """Write images and the `path,label,split` manifest; returns the manifest path"""
        pass

    @abstractmethod
    def load_dataset(self, root: Path, split: str) -> Dataset:
        """Read one split back"""
        pass
