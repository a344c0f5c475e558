"""
Application Use Cases
One use case per experiment: read prerequisites from earlier experiment
directories, run the services, write CSVs / images / containers into its own
directory and finish with the run manifest
Following Use Case pattern and Single Responsibility Principle
"""

import asyncio
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
import pandas as pd

from ..core.exceptions import PoolError
from ..core.interfaces import IArtifactRepository, IDatasetStore
from ..core.models import (Dataset, EvalReport, ModelHandle, ModelPool, Perturbation, PoolSchedule,
                           ProbeWeights, Role, StepRecord)
from ..infrastructure.artifact_store import ArtifactStore, ExperimentWorkspace
from ..infrastructure.dataset_store import MANIFEST_NAME
from ..infrastructure.tables import (histogram_frame, pca_table, per_class_table, read_csv, report_row,
                                     transfer_table, write_csv)
from ..services import attack_service, evaluation_service
from ..services.dataset_service import balanced_subset, train_test
from ..services.probe_service import FeatureCache, accuracy, fit_probe, probability_table
from ..services.zoo_service import ModelZooService, check_unique, designate_prefix, head_accuracy, pool_paths
from .run_config import RunConfig

logger = logging.getLogger(__name__)

Item = TypeVar("Item")
Result = TypeVar("Result")

POOL_MANIFEST = "pool.csv"
PROBE_TABLE = "probe_accuracy.csv"
PSAP_INDEX = "psap_index.csv"
DATA_MANIFEST = f"data/{MANIFEST_NAME}"


def utap_file(model_id: str) -> str:
    return f"utap_{model_id}.utlb"


def csap_file(label: int) -> str:
    return f"csap_class{label}.utlb"


@dataclass
class PipelineContext:
    """Everything a use case needs: run config, stores, services and the worker budget"""
    run_config: RunConfig
    store: ArtifactStore
    repository: IArtifactRepository
    dataset_store: IDatasetStore
    zoo: ModelZooService
    workers: int = 4
    cache: FeatureCache = field(default_factory=FeatureCache)

    async def map_threads(self, fn: Callable[[Item], Result], items: Sequence[Item]) -> List[Result]:
        """Run fn over items in worker threads; results come back in item order."""
        semaphore = asyncio.Semaphore(max(1, self.workers))

        async def one(item):
            async with semaphore:
                return await asyncio.to_thread(fn, item)

        return list(await asyncio.gather(*(one(item) for item in items)))

    # prerequisite loading

    def datasets(self, ws: ExperimentWorkspace) -> Tuple[Dataset, Dataset]:
        manifest = self.store.require("gen-data", DATA_MANIFEST)
        ws.record_input(manifest)
        return (self.dataset_store.load_dataset(manifest.parent, "train"),
                self.dataset_store.load_dataset(manifest.parent, "test"))

    def pool(self, ws: ExperimentWorkspace) -> ModelPool:
        manifest = self.store.require("train-pool", POOL_MANIFEST)
        pool, paths = self.repository.load_pool_manifest(manifest)
        ws.record_input(manifest)
        for path in paths:
            ws.record_input(path)
        return pool

    def admitted(self, ws: ExperimentWorkspace) -> Tuple[ModelPool, Dict[str, ProbeWeights]]:
        """Pool members whose probe passed the clean-accuracy gate, with their probes."""
        pool = self.pool(ws)
        table_path = self.store.require("fit-probes", PROBE_TABLE)
        ws.record_input(table_path)
        table = read_csv(table_path)
        admitted_ids = [str(i) for i in table.loc[table["admitted"].astype(bool), "model_id"]]
        members = [m for m in pool.members if m.model_id in admitted_ids]
        if not members:
            raise PoolError("no pool member passed the probe admission gate")
        probes = {}
        for member in members:
            path = self.store.require("fit-probes", f"probes/{member.model_id}.utlb")
            ws.record_input(path)
            probes[member.model_id] = self.repository.load_probe(path)
        return ModelPool(members), probes

    def source_id(self) -> str:
        return self.run_config.pool_specs()[self.run_config.source_index].model_id

    def source(self, pool: ModelPool) -> ModelHandle:
        source_id = self.source_id()
        if source_id not in pool.ids:
            raise PoolError(f"source member '{source_id}' was not admitted; admitted: {pool.ids}")
        return pool.get(source_id)

    def attack_set(self, train: Dataset, n_images: Optional[int] = None) -> Dataset:
        """Class-balanced crafting images drawn from the training split."""
        n = self.run_config.n_images if n_images is None else n_images
        return balanced_subset(train, n, self.run_config.data_seed)

    def perturbation(self, ws: ExperimentWorkspace, producer: str, relative: str) -> Perturbation:
        path = self.store.require(producer, relative)
        ws.record_input(path)
        return self.repository.load_perturbation(path)

    def utap(self, ws: ExperimentWorkspace, model_id: str) -> Perturbation:
        return self.perturbation(ws, "craft-utap", utap_file(model_id))


def role_of(model_id: str, perturbation: Perturbation) -> str:
    return (Role.INTERNAL if model_id in perturbation.source_ids else Role.EXTERNAL).value


class ExperimentUseCase:
    """Template for one experiment: echo config, run, finalize the manifest"""

    name = ""

    def __init__(self, context: PipelineContext):
        self._context = context
        self._cfg = context.run_config

    async def execute(self) -> List[Path]:
        logger.info(f"Executing {type(self).__name__}")
        ws = self._context.store.workspace(self.name)
        ws.echo_config(self._cfg.to_text())
        try:
            await self._run(ws)
        except Exception as e:
            logger.error(f"Error in {type(self).__name__}: {e}")
            raise
        ws.finalize()
        logger.info(f"{type(self).__name__} completed with {len(ws.outputs)} outputs")
        return ws.outputs

    async def _run(self, ws: ExperimentWorkspace) -> None:
        raise NotImplementedError

    def _write(self, ws: ExperimentWorkspace, frame: pd.DataFrame, relative: str) -> Path:
        return ws.record_output(write_csv(frame, ws.path(relative)))

    async def _evaluate_all(self, pool: ModelPool, probes: Dict[str, ProbeWeights], test: Dataset,
                            perturbation: Perturbation) -> List[EvalReport]:
        cache = self._context.cache
        return await self._context.map_threads(
            lambda m: evaluation_service.evaluate(m, probes[m.model_id], test, perturbation, cache), pool.members)

    async def _evaluation_rows(self, pool: ModelPool, probes: Dict[str, ProbeWeights], test: Dataset,
                               perturbation: Perturbation, **extra) -> List[dict]:
        reports = await self._evaluate_all(pool, probes, test, perturbation)
        return [report_row(r, **extra, role=role_of(r.model_id, perturbation)) for r in reports]


class GenerateDataUseCase(ExperimentUseCase):
    """Synthetic texture dataset, written as class directories of PPMs"""

    name = "gen-data"

    async def _run(self, ws: ExperimentWorkspace) -> None:
        cfg = self._cfg
        ws.record_seed("data_seed", cfg.data_seed)
        train, test = await asyncio.to_thread(
            train_test, cfg.num_classes, cfg.per_class_train, cfg.per_class_test, cfg.image_size, cfg.data_seed)
        root = ws.path("data")
        manifest = self._context.dataset_store.save_dataset([train, test], root)
        for relative in read_csv(manifest)["path"]:
            ws.record_output(root / relative)
        ws.record_output(manifest)
        logger.info(f"Generated {len(train)} train / {len(test)} test images over {cfg.num_classes} classes")


class TrainPoolUseCase(ExperimentUseCase):
    """Train every pool member and write checkpoints plus the pool manifest"""

    name = "train-pool"

    async def _run(self, ws: ExperimentWorkspace) -> None:
        train, test = self._context.datasets(ws)
        specs = self._cfg.pool_specs()
        check_unique(specs)
        for spec in specs:
            ws.record_seed(f"model_seed.{spec.model_id}", spec.seed)
        directory = ws.path("models")
        handles = await self._context.map_threads(
            lambda s: self._context.zoo.train_member(s, train, directory), specs)
        pool = ModelPool(handles)

        paths = pool_paths(directory, pool)
        for path in paths:
            ws.record_output(path)
        ws.record_output(self._context.repository.save_pool_manifest(pool, paths, ws.path(POOL_MANIFEST)))

        rows = [{"model_id": spec.model_id, "variant": spec.variant, "seed": spec.seed,
                 "head_test_acc": head_accuracy(handle, test)} for spec, handle in zip(specs, handles)]
        self._write(ws, pd.DataFrame(rows), "head_accuracy.csv")


class FitProbesUseCase(ExperimentUseCase):
    """Linear probes on clean features; members below the threshold are not admitted"""

    name = "fit-probes"

    def _fit(self, model: ModelHandle, train: Dataset, test: Dataset) -> Tuple[ProbeWeights, float]:
        cfg = self._cfg
        probe = fit_probe(model, train, cfg.probe_epochs, cfg.probe_lr, cfg.data_seed, self._context.cache)
        return probe, accuracy(model, probe, test, cache=self._context.cache)

    async def _run(self, ws: ExperimentWorkspace) -> None:
        cfg = self._cfg
        train, test = self._context.datasets(ws)
        pool = self._context.pool(ws)
        ws.record_seed("probe_seed", cfg.data_seed)
        fitted = await self._context.map_threads(lambda m: self._fit(m, train, test), pool.members)

        rows = []
        for member, (probe, clean_acc) in zip(pool.members, fitted):
            path = ws.path(f"probes/{member.model_id}.utlb")
            ws.record_output(self._context.repository.save_probe(probe, path))
            admitted = clean_acc >= cfg.admission_threshold
            if not admitted:
                logger.warning(f"{member.model_id}: clean probe accuracy {clean_acc:.4f} below "
                               f"{cfg.admission_threshold}; excluded from attack experiments")
            rows.append({"model_id": member.model_id, "clean_acc": clean_acc, "admitted": admitted})
        self._write(ws, pd.DataFrame(rows, columns=["model_id", "clean_acc", "admitted"]), PROBE_TABLE)


def trace_frame(trace: Sequence[StepRecord]) -> pd.DataFrame:
    return pd.DataFrame([vars(r) for r in trace], columns=["step", "model_id", "loss", "max_abs_delta"])


class CraftUtapUseCase(ExperimentUseCase):
    """One universal perturbation per admitted member, with per-step traces"""

    name = "craft-utap"

    def _craft(self, model: ModelHandle, attack_set: Dataset) -> Tuple[Perturbation, List[StepRecord]]:
        trace: List[StepRecord] = []
        perturbation = attack_service.craft_utap(model, attack_set, self._cfg.attack_config(), trace=trace)
        return perturbation, trace

    async def _run(self, ws: ExperimentWorkspace) -> None:
        cfg = self._cfg
        train, _ = self._context.datasets(ws)
        pool, _ = self._context.admitted(ws)
        attack_set = self._context.attack_set(train)
        ws.record_seed("attack_seed", cfg.attack_seed)
        crafted = await self._context.map_threads(lambda m: self._craft(m, attack_set), pool.members)

        summary = []
        for member, (perturbation, trace) in zip(pool.members, crafted):
            path = ws.path(utap_file(member.model_id))
            ws.record_output(self._context.repository.save_perturbation(perturbation, path))
            self._write(ws, trace_frame(trace), f"trace_{member.model_id}.csv")
            violations = sum(1 for r in trace if r.max_abs_delta > perturbation.epsilon)
            summary.append({"model_id": member.model_id, "iterations": perturbation.iterations,
                            "max_abs_delta": perturbation.max_abs, "bound_violations": violations,
                            "config_hash": perturbation.config_hash})
        self._write(ws, pd.DataFrame(summary), "utap_summary.csv")


class CraftPsapUseCase(ExperimentUseCase):
    """Per-image perturbations on the first attack-set images, against the source member"""

    name = "craft-psap"

    async def _run(self, ws: ExperimentWorkspace) -> None:
        cfg = self._cfg
        train, _ = self._context.datasets(ws)
        pool, probes = self._context.admitted(ws)
        model = self._context.source(pool)
        probe = probes[model.model_id]
        attack_set = self._context.attack_set(train)
        count = min(cfg.psap_samples, len(attack_set))
        attack_cfg = cfg.attack_config()
        ws.record_seed("attack_seed", cfg.attack_seed)

        psaps = await self._context.map_threads(
            lambda i: attack_service.craft_psap(model, probe, attack_set.images[i], int(attack_set.labels[i]),
                                                attack_cfg),
            list(range(count)))
        rows = []
        for i, perturbation in enumerate(psaps):
            relative = f"psap/{i:04d}.utlb"
            ws.record_output(self._context.repository.save_perturbation(perturbation, ws.path(relative)))
            rows.append({"image_index": i, "label": int(attack_set.labels[i]),
                         "iterations": perturbation.iterations, "path": relative})
        self._write(ws, pd.DataFrame(rows), PSAP_INDEX)
        logger.info(f"Crafted {count} PSAPs on {model.model_id}")


class CraftCsapUseCase(ExperimentUseCase):
    """One perturbation for every attack-set image of the configured class"""

    name = "craft-csap"

    async def _run(self, ws: ExperimentWorkspace) -> None:
        cfg = self._cfg
        train, _ = self._context.datasets(ws)
        pool, probes = self._context.admitted(ws)
        model = self._context.source(pool)
        class_set = self._context.attack_set(train).restrict_to_class(cfg.csap_class)
        ws.record_seed("attack_seed", cfg.attack_seed)
        perturbation = await asyncio.to_thread(
            attack_service.craft_csap, model, probes[model.model_id], class_set, cfg.csap_class, cfg.attack_config())
        path = ws.path(csap_file(cfg.csap_class))
        ws.record_output(self._context.repository.save_perturbation(perturbation, path))
        report = evaluation_service.evaluate(model, probes[model.model_id], class_set, perturbation,
                                             self._context.cache)
        self._write(ws, pd.DataFrame([report_row(report, label=cfg.csap_class, images=len(class_set),
                                                 iterations=perturbation.iterations)]),
                    "csap_summary.csv")


class EvaluateUseCase(ExperimentUseCase):
    """The source member's UTAP on every admitted member: summary, per-class and per-image tables"""

    name = "eval"

    async def _run(self, ws: ExperimentWorkspace) -> None:
        _, test = self._context.datasets(ws)
        pool, probes = self._context.admitted(ws)
        source = self._context.source(pool)
        utap = self._context.utap(ws, source.model_id)
        reports = await self._evaluate_all(pool, probes, test, utap)

        self._write(ws, pd.DataFrame([report_row(r, source_id=source.model_id, role=role_of(r.model_id, utap))
                                      for r in reports]), "eval.csv")
        self._write(ws, per_class_table(reports, list(test.class_names)), "per_class.csv")
        cache = self._context.cache
        for member in pool.members:
            probe = probes[member.model_id]
            frame = pd.concat([probability_table(member, probe, test, None, "clean", cache),
                               probability_table(member, probe, test, utap, "attacked", cache)],
                              ignore_index=True)
            self._write(ws, frame, f"probabilities_{member.model_id}.csv")
        for r in reports:
            logger.info(f"{r.model_id}: clean {r.clean_acc:.2%} -> attacked {r.attacked_acc:.2%}")


class TransferMatrixUseCase(ExperimentUseCase):
    """Every admitted member's UTAP evaluated on every admitted member, next to uniform noise"""

    name = "transfer-matrix"

    async def _run(self, ws: ExperimentWorkspace) -> None:
        cfg = self._cfg
        _, test = self._context.datasets(ws)
        pool, probes = self._context.admitted(ws)
        perturbations = {m.model_id: self._context.utap(ws, m.model_id) for m in pool.members}
        evaluation_service.check_transfer_inputs(pool, probes, perturbations)
        cache = self._context.cache
        rows = await self._context.map_threads(
            lambda sid: evaluation_service.transfer_row(sid, pool, probes, test, perturbations[sid], cache),
            pool.ids)
        report = evaluation_service.assemble_transfer(pool, perturbations, dict(zip(pool.ids, rows)))

        ws.record_seed("noise_seed", cfg.attack_seed)
        noise = attack_service.random_baseline(test.image_shape, cfg.epsilon, cfg.attack_seed)
        noise_reports = await self._evaluate_all(pool, probes, test, noise)
        random_drops = {r.model_id: r.drop for r in noise_reports}
        self._write(ws, transfer_table(report, random_drops), "transfer.csv")

        for source_id, target_id, drop, random_drop in evaluation_service.transfer_margin_failures(
                report, random_drops):
            logger.warning(f"UTAP from {source_id} drops {target_id} by {drop:.4f}, less than "
                           f"{evaluation_service.TRANSFER_MARGIN:.2f} above uniform noise ({random_drop:.4f})")


class ParameterSweepUseCase(ExperimentUseCase):
    """Re-craft the source UTAP for each value of one attack parameter"""

    parameter = ""

    def _values(self) -> Sequence[float]:
        raise NotImplementedError

    async def _run(self, ws: ExperimentWorkspace) -> None:
        train, test = self._context.datasets(ws)
        pool, probes = self._context.admitted(ws)
        source = self._context.source(pool)
        attack_set = self._context.attack_set(train)
        ws.record_seed("attack_seed", self._cfg.attack_seed)
        values = list(self._values())
        crafted = await self._context.map_threads(
            lambda v: attack_service.craft_utap(source, attack_set, self._cfg.attack_config(**{self.parameter: v})),
            values)
        rows = []
        for value, perturbation in zip(values, crafted):
            rows += await self._evaluation_rows(pool, probes, test, perturbation, **{self.parameter: value})
        frame = pd.DataFrame(rows)
        self._write(ws, frame, f"sweep_{self.parameter}.csv")
        self._artifacts(ws, values, crafted)
        self._check(frame)

    def _artifacts(self, ws: ExperimentWorkspace, values: Sequence[float], crafted: Sequence[Perturbation]) -> None:
        pass

    def _check(self, frame: pd.DataFrame) -> None:
        pass


class SweepThetaUseCase(ParameterSweepUseCase):
    """θ sweep plus, per θ, the δ value histogram, its outer-bin mass and a gray render"""

    name = "sweep-theta"
    parameter = "theta"

    def _values(self):
        return self._cfg.sweep_thetas

    def _artifacts(self, ws: ExperimentWorkspace, values: Sequence[float], crafted: Sequence[Perturbation]) -> None:
        masses = []
        for theta, perturbation in zip(values, crafted):
            counts, edges = evaluation_service.perturbation_histogram(perturbation, self._cfg.histogram_bins)
            self._write(ws, histogram_frame(counts, edges), f"histograms/theta_{theta:g}.csv")
            ws.record_output(evaluation_service.render_gray(perturbation, ws.path(f"renders/utap_theta_{theta:g}.ppm")))
            masses.append({"theta": theta, "outer_bin_mass": evaluation_service.outer_bin_mass(counts)})
        frame = pd.DataFrame(masses, columns=["theta", "outer_bin_mass"])
        self._write(ws, frame, "theta_histograms.csv")

        ordered = frame.sort_values("theta")
        low, high = ordered.iloc[0], ordered.iloc[-1]
        if len(ordered) > 1 and high["outer_bin_mass"] <= low["outer_bin_mass"]:
            logger.warning(f"outer-bin mass does not grow with theta: {low['outer_bin_mass']:.4f} at "
                           f"theta={low['theta']:g}, {high['outer_bin_mass']:.4f} at theta={high['theta']:g}")


class SweepEpsilonUseCase(ParameterSweepUseCase):
    name = "sweep-epsilon"
    parameter = "epsilon"
    MONOTONE_TOLERANCE = 0.02

    def _values(self):
        return self._cfg.sweep_epsilons

    def _check(self, frame: pd.DataFrame) -> None:
        internal = frame[frame["role"] == Role.INTERNAL.value].sort_values("epsilon")["attacked_acc"].to_numpy()
        rises = np.diff(internal)
        inversions = rises[rises > 0]
        if len(inversions) > 1 or (len(inversions) == 1 and inversions[0] > self.MONOTONE_TOLERANCE):
            logger.warning(f"internal attacked accuracy is not non-increasing over epsilon: {internal.tolist()}")


class AblateRegularizersUseCase(ExperimentUseCase):
    """Source UTAP with and without patch masking and attention dropping"""

    name = "ablate-regularizers"
    VARIANTS = {
        "regularized": {},
        "no_patch_mask": {"patch_mask_prob": 0.0},
        "no_attn_drop": {"attn_drop_prob": 0.0},
        "unregularized": {"patch_mask_prob": 0.0, "attn_drop_prob": 0.0},
    }

    async def _run(self, ws: ExperimentWorkspace) -> None:
        train, test = self._context.datasets(ws)
        pool, probes = self._context.admitted(ws)
        source = self._context.source(pool)
        attack_set = self._context.attack_set(train)
        ws.record_seed("attack_seed", self._cfg.attack_seed)
        names = list(self.VARIANTS)
        crafted = await self._context.map_threads(
            lambda n: attack_service.craft_utap(source, attack_set, self._cfg.attack_config(**self.VARIANTS[n])),
            names)
        rows = []
        for name, perturbation in zip(names, crafted):
            rows += await self._evaluation_rows(pool, probes, test, perturbation, variant=name)
        frame = pd.DataFrame(rows)
        self._write(ws, frame, "ablation.csv")

        external = frame[frame["role"] == Role.EXTERNAL.value]
        summary = external.groupby("variant", sort=False)["drop"].mean().reindex(names)
        self._write(ws, summary.rename("mean_external_drop").reset_index(), "ablation_summary.csv")
        if not external.empty and summary["regularized"] < summary["unregularized"]:
            logger.warning(f"regularized UTAP transfers worse than unregularized: "
                           f"{summary['regularized']:.4f} < {summary['unregularized']:.4f}")


class AblateAttackSetSizeUseCase(ExperimentUseCase):
    """Source UTAP crafted from attack sets of increasing size"""

    name = "ablate-n"

    async def _run(self, ws: ExperimentWorkspace) -> None:
        train, test = self._context.datasets(ws)
        pool, probes = self._context.admitted(ws)
        source = self._context.source(pool)
        ws.record_seed("attack_seed", self._cfg.attack_seed)
        sizes = list(self._cfg.ablate_sizes)
        crafted = await self._context.map_threads(
            lambda n: attack_service.craft_utap(source, self._context.attack_set(train, n),
                                                self._cfg.attack_config(n_images=n)),
            sizes)
        rows = []
        for n, perturbation in zip(sizes, crafted):
            rows += await self._evaluation_rows(pool, probes, test, perturbation, n_images=n)
        self._write(ws, pd.DataFrame(rows), "ablate_n.csv")


class MultiSourceUseCase(ExperimentUseCase):
    """UTAPs crafted against the first k admitted members, switching source every few steps"""

    name = "multi-source"

    def _craft(self, pool: ModelPool, k: int, attack_set: Dataset) -> Perturbation:
        designated, internal = designate_prefix(pool, k)
        schedule = PoolSchedule(tuple(internal), self._cfg.switch_period, self._cfg.attack_seed)
        return attack_service.craft_utap(designated, attack_set, self._cfg.attack_config(), schedule)

    async def _run(self, ws: ExperimentWorkspace) -> None:
        train, test = self._context.datasets(ws)
        pool, probes = self._context.admitted(ws)
        attack_set = self._context.attack_set(train)
        ws.record_seed("attack_seed", self._cfg.attack_seed)
        sizes = list(self._cfg.pool_sizes)
        crafted = await self._context.map_threads(lambda k: self._craft(pool, k, attack_set), sizes)
        rows = []
        for k, perturbation in zip(sizes, crafted):
            path = ws.path(f"multi_k{k}.utlb")
            ws.record_output(self._context.repository.save_perturbation(perturbation, path))
            rows += await self._evaluation_rows(pool, probes, test, perturbation, pool_size=k)
        self._write(ws, pd.DataFrame(rows), "multi_source.csv")


class BaselineNoiseUseCase(ExperimentUseCase):
    """Uniform ±ε noise evaluated on every admitted member"""

    name = "baseline-noise"

    async def _run(self, ws: ExperimentWorkspace) -> None:
        cfg = self._cfg
        _, test = self._context.datasets(ws)
        pool, probes = self._context.admitted(ws)
        ws.record_seed("noise_seed", cfg.attack_seed)
        noise = attack_service.random_baseline(test.image_shape, cfg.epsilon, cfg.attack_seed)
        ws.record_output(self._context.repository.save_perturbation(noise, ws.path("noise.utlb")))
        rows = await self._evaluation_rows(pool, probes, test, noise, epsilon=cfg.epsilon)
        self._write(ws, pd.DataFrame(rows), "baseline_noise.csv")


class HeatmapsUseCase(ExperimentUseCase):
    """[CLS]-to-patch similarity maps under clean, UTAP and uniform-noise inputs, plus the UTAP histogram"""

    name = "heatmaps"
    CONDITIONS = ("clean", "attacked", "random")

    async def _run(self, ws: ExperimentWorkspace) -> None:
        cfg = self._cfg
        _, test = self._context.datasets(ws)
        pool, _ = self._context.admitted(ws)
        source = self._context.source(pool)
        utap = self._context.utap(ws, source.model_id)
        ws.record_seed("noise_seed", cfg.attack_seed)
        noise = attack_service.random_baseline(test.image_shape, cfg.epsilon, cfg.attack_seed)
        sample = balanced_subset(test, min(cfg.heatmap_images, len(test)), cfg.data_seed)

        rows = []
        changes: Dict[str, List[float]] = {"attacked": [], "random": []}
        for i, (image, label) in enumerate(zip(sample.images, sample.labels)):
            maps = {}
            for condition, delta in zip(self.CONDITIONS, (None, utap, noise)):
                heatmap = maps[condition] = evaluation_service.cls_patch_heatmap(source, image, delta)
                ws.record_output(evaluation_service.render_gray(heatmap, ws.path(f"heatmap_{i:02d}_{condition}.pgm")))
                for (r, c), value in np.ndenumerate(heatmap.values):
                    rows.append({"image_index": i, "label": int(label), "condition": condition,
                                 "row": r, "col": c, "value": value})
            for condition in changes:
                changes[condition].append(evaluation_service.heatmap_change(maps["clean"], maps[condition]))
        self._write(ws, pd.DataFrame(rows), "heatmaps.csv")

        summary = {condition: float(np.mean(values)) for condition, values in changes.items()}
        self._write(ws, pd.DataFrame({"condition": list(summary), "mean_abs_change": list(summary.values())}),
                    "heatmap_summary.csv")
        if summary["attacked"] <= summary["random"]:
            logger.warning(f"UTAP changes the heatmaps no more than uniform noise: "
                           f"{summary['attacked']:.4f} <= {summary['random']:.4f}")

        ws.record_output(evaluation_service.render_gray(utap, ws.path("utap.ppm")))
        counts, edges = evaluation_service.perturbation_histogram(utap, cfg.histogram_bins)
        self._write(ws, histogram_frame(counts, edges), "histogram.csv")
        logger.info(f"UTAP mass in the two outer bins: {evaluation_service.outer_bin_mass(counts):.2%}")


class PcaUseCase(ExperimentUseCase):
    """2-D projection of clean and attacked [CLS] features of the source member"""

    name = "pca"

    async def _run(self, ws: ExperimentWorkspace) -> None:
        cfg = self._cfg
        _, test = self._context.datasets(ws)
        pool, _ = self._context.admitted(ws)
        source = self._context.source(pool)
        utap = self._context.utap(ws, source.model_id)
        sample = balanced_subset(test, min(cfg.pca_images, len(test)), cfg.data_seed)
        clean = self._context.cache.cls_features(source, sample.images)
        attacked = self._context.cache.cls_features(source, attack_service.apply(utap, sample.images))
        ws.record_seed("pca_seed", cfg.data_seed)
        result = evaluation_service.pca_project(np.concatenate([clean, attacked]), k=2, seed=cfg.data_seed)
        labels = np.concatenate([sample.labels, sample.labels])
        conditions = ["clean"] * len(sample) + ["attacked"] * len(sample)
        self._write(ws, pca_table(result, labels, conditions), "pca.csv")
        logger.info(f"PCA explained variance: {np.round(result.explained, 4).tolist()}")


class UniversalityUseCase(ExperimentUseCase):
    """UTAP vs CSAP vs PSAP on the crafting images and on unseen images"""

    name = "universality"

    async def _run(self, ws: ExperimentWorkspace) -> None:
        cfg = self._cfg
        train, test = self._context.datasets(ws)
        pool, probes = self._context.admitted(ws)
        source = self._context.source(pool)
        probe = probes[source.model_id]
        utap = self._context.utap(ws, source.model_id)
        csap = self._context.perturbation(ws, "craft-csap", csap_file(cfg.csap_class))
        index_path = self._context.store.require("craft-psap", PSAP_INDEX)
        ws.record_input(index_path)
        index = read_csv(index_path)
        psaps = [self._context.perturbation(ws, "craft-psap", p) for p in index["path"]]

        seen = self._context.attack_set(train)
        picks = index["image_index"].to_numpy()
        summary = await asyncio.to_thread(evaluation_service.psap_summary, source, probe, seen.images[picks],
                                          seen.labels[picks], psaps, test)
        rows = evaluation_service.universality_rows(source, probe, seen, test, utap, csap, summary,
                                                    self._context.cache)
        frame = pd.DataFrame(rows)
        self._write(ws, frame, "universality.csv")

        drops = {(r["kind"], r["scope"]): r["drop"] for r in rows}
        ordered = drops[("UTAP", "unseen")] > drops[("CSAP", "unseen_target_class")] > drops[("PSAP", "unseen")]
        if not ordered:
            logger.warning(f"unseen-image drops are not ordered UTAP > CSAP > PSAP: {drops}")


class OutOfDistributionUseCase(ExperimentUseCase):
    """The unchanged source UTAP on a palette-shifted dataset with freshly fitted probes"""

    name = "ood"

    def _fit_and_evaluate(self, model: ModelHandle, train: Dataset, test: Dataset, utap: Perturbation) -> EvalReport:
        cfg = self._cfg
        probe = fit_probe(model, train, cfg.probe_epochs, cfg.probe_lr, cfg.data_seed, self._context.cache)
        return evaluation_service.evaluate(model, probe, test, utap, self._context.cache)

    async def _run(self, ws: ExperimentWorkspace) -> None:
        cfg = self._cfg
        pool, _ = self._context.admitted(ws)
        source = self._context.source(pool)
        utap = self._context.utap(ws, source.model_id)
        ws.record_seed("data_seed", cfg.data_seed)
        train, test = await asyncio.to_thread(train_test, cfg.num_classes, cfg.per_class_train, cfg.per_class_test,
                                              cfg.image_size, cfg.data_seed, cfg.ood_palette_shift)
        reports = await self._context.map_threads(
            lambda m: self._fit_and_evaluate(m, train, test, utap), pool.members)
        rows = [report_row(r, palette_shift=cfg.ood_palette_shift, role=role_of(r.model_id, utap)) for r in reports]
        self._write(ws, pd.DataFrame(rows), "ood.csv")
