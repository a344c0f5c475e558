"""
Experiment Registry
Experiment names, their use cases and the experiments whose artifacts they read.
`all` runs every entry in registry order.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Tuple, Type

import psutil

from ..core.exceptions import ConfigError, PrerequisiteError
from ..infrastructure.artifact_store import RUN_MANIFEST, ArtifactStore
from .use_cases import (AblateAttackSetSizeUseCase, AblateRegularizersUseCase, BaselineNoiseUseCase,
                        CraftCsapUseCase, CraftPsapUseCase, CraftUtapUseCase, EvaluateUseCase,
                        ExperimentUseCase, FitProbesUseCase, GenerateDataUseCase, HeatmapsUseCase,
                        MultiSourceUseCase, OutOfDistributionUseCase, PcaUseCase, SweepEpsilonUseCase,
                        SweepThetaUseCase, TrainPoolUseCase, TransferMatrixUseCase, UniversalityUseCase)

logger = logging.getLogger(__name__)

ALL = "all"


@dataclass(frozen=True)
class Experiment:
    name: str
    use_case: Type[ExperimentUseCase]
    prerequisites: Tuple[str, ...]
    description: str


_PROBED = ("gen-data", "train-pool", "fit-probes")
_ATTACKED = _PROBED + ("craft-utap",)

EXPERIMENTS: Tuple[Experiment, ...] = (
    Experiment("gen-data", GenerateDataUseCase, (), "synthetic texture dataset"),
    Experiment("train-pool", TrainPoolUseCase, ("gen-data",), "train the model pool"),
    Experiment("fit-probes", FitProbesUseCase, ("gen-data", "train-pool"), "linear probes and admission gate"),
    Experiment("craft-utap", CraftUtapUseCase, _PROBED, "universal perturbation per member"),
    Experiment("craft-psap", CraftPsapUseCase, _PROBED, "per-image perturbations"),
    Experiment("craft-csap", CraftCsapUseCase, _PROBED, "per-class perturbation"),
    Experiment("eval", EvaluateUseCase, _ATTACKED, "source UTAP on every member"),
    Experiment("transfer-matrix", TransferMatrixUseCase, _ATTACKED, "source x target accuracy matrix"),
    Experiment("sweep-theta", SweepThetaUseCase, _PROBED, "step-size multiplier sweep"),
    Experiment("sweep-epsilon", SweepEpsilonUseCase, _PROBED, "perturbation budget sweep"),
    Experiment("ablate-regularizers", AblateRegularizersUseCase, _PROBED, "patch masking / attention dropping"),
    Experiment("ablate-n", AblateAttackSetSizeUseCase, _PROBED, "attack-set size sweep"),
    Experiment("multi-source", MultiSourceUseCase, _PROBED, "UTAPs from growing source pools"),
    Experiment("baseline-noise", BaselineNoiseUseCase, _PROBED, "uniform noise control"),
    Experiment("heatmaps", HeatmapsUseCase, _ATTACKED, "[CLS]-to-patch maps and UTAP histogram"),
    Experiment("pca", PcaUseCase, _ATTACKED, "feature collapse projection"),
    Experiment("universality", UniversalityUseCase, _ATTACKED + ("craft-psap", "craft-csap"),
               "UTAP vs CSAP vs PSAP on seen and unseen images"),
    Experiment("ood", OutOfDistributionUseCase, _ATTACKED, "UTAP on a palette-shifted dataset"),
)

REGISTRY: Dict[str, Experiment] = {e.name: e for e in EXPERIMENTS}


def names() -> List[str]:
    return [e.name for e in EXPERIMENTS] + [ALL]


def lookup(name: str) -> Experiment:
    if name not in REGISTRY:
        raise ConfigError(f"unknown experiment '{name}'; choose one of {', '.join(names())}")
    return REGISTRY[name]


def log_resource_usage(label: str) -> None:
    process = psutil.Process()
    cpu = process.cpu_times()
    logger.info(f"{label}: rss {process.memory_info().rss / 2**20:.1f} MiB, "
                f"cpu {cpu.user + cpu.system:.1f} s")


class ExperimentRunner:
    """Runs one experiment, or all of them in registry order"""

    def __init__(self, store: ArtifactStore, factory: Callable[[Experiment], ExperimentUseCase]):
        self._store = store
        self._factory = factory

    def check_prerequisites(self, experiment: Experiment) -> None:
        for producer in experiment.prerequisites:
            if not self._store.locate(producer, RUN_MANIFEST).exists():
                raise PrerequisiteError(f"{producer}/{RUN_MANIFEST}", producer)

    async def run(self, name: str) -> List[Path]:
        plan = list(EXPERIMENTS) if name == ALL else [lookup(name)]
        outputs: List[Path] = []
        for experiment in plan:
            self.check_prerequisites(experiment)
            outputs += await self._factory(experiment).execute()
            log_resource_usage(experiment.name)
        return outputs
