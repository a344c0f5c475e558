"""
Dependency Injection Container
Builds the stores, the model zoo and the shared pipeline context once per run,
and hands the runner a factory that turns registry entries into use cases
"""

import logging
from pathlib import Path
from typing import Any, Dict

from ..infrastructure.artifact_store import ArtifactStore
from ..infrastructure.checkpoint_repository import CheckpointRepository
from ..infrastructure.dataset_store import FileDatasetStore
from ..services.zoo_service import ModelZooService
from .registry import Experiment, ExperimentRunner
from .run_config import RunConfig
from .use_cases import ExperimentUseCase, PipelineContext

logger = logging.getLogger(__name__)


class DependencyContainer:
    """Services of one run, built lazily on first access"""

    def __init__(self, config, run_config: RunConfig):
        self._config = config
        self._run_config = run_config
        self._services: Dict[str, Any] = {}
        self._initialized = False

    def initialize(self):
        """Build every service for the run config; later calls are no-ops"""
        if self._initialized:
            return

        logger.info("Initializing dependency container")
        try:
            run = self._run_config
            self._services['repository'] = CheckpointRepository()
            self._services['dataset_store'] = FileDatasetStore()
            self._services['artifact_store'] = ArtifactStore(Path(run.output_dir))
            self._services['zoo_service'] = ModelZooService(
                self._services['repository'], run.model_epochs, run.model_lr, run.model_batch)
            self._services['pipeline_context'] = PipelineContext(
                run_config=run,
                store=self._services['artifact_store'],
                repository=self._services['repository'],
                dataset_store=self._services['dataset_store'],
                zoo=self._services['zoo_service'],
                workers=self._config.UTAP_WORKERS,
            )
            self._services['runner'] = ExperimentRunner(self._services['artifact_store'], self.build_use_case)
            self._initialized = True
            logger.info(f"Dependency container initialized (output root {run.output_dir})")
        except Exception as e:
            logger.error(f"Error initializing dependency container: {e}")
            raise

    def get(self, service_name: str) -> Any:
        """Get a service by name"""
        if not self._initialized:
            self.initialize()
        if service_name not in self._services:
            raise ValueError(f"Service '{service_name}' not found")
        return self._services[service_name]

    def build_use_case(self, experiment: Experiment) -> ExperimentUseCase:
        return experiment.use_case(self.get('pipeline_context'))
