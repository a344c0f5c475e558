"""
Evaluation Service
Accuracy drops, transfer matrices, feature-collapse diagnostics and renders
Following Single Responsibility Principle
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..core.exceptions import ConfigError, PoolError, ShapeError
from ..core.models import (Dataset, EvalReport, Heatmap, ModelHandle, ModelPool, PCAResult,
                           Perturbation, ProbeWeights, Role, TransferReport)
from ..core.rng import PCA, make_rng
from ..core.tensor import COSINE_EPS
from ..infrastructure.image_io import write_pgm, write_ppm
from . import vit
from .pixel_ops import apply
from .probe_service import FeatureCache, check_owner, predict_batch

logger = logging.getLogger(__name__)

PCA_TOLERANCE = 1e-7
PCA_MAX_ITERATIONS = 1000
PCA_RANK_TOLERANCE = 1e-12
GRAY_LEVEL = 128.0
TRANSFER_MARGIN = 0.10


def row_cosines(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine along the last axis with the shared 1e-8 stabilizer, in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1) + COSINE_EPS
    return (a * b).sum(axis=-1) / denom


def per_class_accuracy(preds: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros(num_classes)
    for c in range(num_classes):
        members = labels == c
        out[c] = float(np.mean(preds[members] == c)) if members.any() else 0.0
    return out


def evaluate(model: ModelHandle, probe: ProbeWeights, test: Dataset,
             delta: Optional[Perturbation] = None, cache: Optional[FeatureCache] = None) -> EvalReport:
    """Clean vs attacked accuracy on the same images plus the mean clean/attacked [CLS] cosine."""
    check_owner(model, probe)
    cache = cache or FeatureCache()
    clean = cache.cls_features(model, test.images)
    attacked = clean if delta is None else cache.cls_features(model, apply(delta, test.images))
    clean_pred, _ = predict_batch(probe, clean)
    attacked_pred, _ = predict_batch(probe, attacked)
    clean_acc = float(np.mean(clean_pred == test.labels))
    attacked_acc = float(np.mean(attacked_pred == test.labels))
    return EvalReport(
        model_id=model.model_id,
        probe_id=probe.owner_id,
        clean_acc=clean_acc,
        attacked_acc=attacked_acc,
        per_class_clean=per_class_accuracy(clean_pred, test.labels, test.num_classes),
        per_class_attacked=per_class_accuracy(attacked_pred, test.labels, test.num_classes),
        mean_cls_cosine=float(np.mean(row_cosines(clean, attacked))),
        source_ids=tuple(delta.source_ids) if delta is not None else (),
    )


def transfer_row(source_id: str, pool: ModelPool, probes: Mapping[str, ProbeWeights], test: Dataset,
                 perturbation: Perturbation, cache: Optional[FeatureCache] = None) -> Dict[str, EvalReport]:
    """One matrix row: the source's perturbation evaluated on every pool member."""
    row = {}
    for target in pool.members:
        if target.model_id not in probes:
            raise PoolError(f"no probe for pool member '{target.model_id}'")
        row[target.model_id] = evaluate(target, probes[target.model_id], test, perturbation, cache)
    logger.info(f"Transfer row {source_id}: " + ", ".join(
        f"{t}={r.attacked_acc:.3f}" for t, r in row.items()))
    return row


def assemble_transfer(pool: ModelPool, perturbations: Mapping[str, Perturbation],
                      rows: Mapping[str, Dict[str, EvalReport]]) -> TransferReport:
    entries, roles = {}, {}
    for source_id, row in rows.items():
        internal = set(perturbations[source_id].source_ids)
        for target_id, report in row.items():
            entries[(source_id, target_id)] = report
            roles[(source_id, target_id)] = Role.INTERNAL if target_id in internal else Role.EXTERNAL
    return TransferReport(list(rows), pool.ids, entries, roles)


def transfer_margin_failures(report: TransferReport, random_drops: Mapping[str, float],
                             margin: float = TRANSFER_MARGIN) -> List[Tuple[str, str, float, float]]:
    """External entries whose drop does not beat the target's random-noise drop by `margin`."""
    failures = []
    for (source_id, target_id), role in report.roles.items():
        if role is not Role.EXTERNAL:
            continue
        if target_id not in random_drops:
            raise PoolError(f"no random-baseline drop for pool member '{target_id}'")
        drop = report.entry(source_id, target_id).drop
        if drop < random_drops[target_id] + margin:
            failures.append((source_id, target_id, drop, random_drops[target_id]))
    return failures


def check_transfer_inputs(pool: ModelPool, probes: Mapping[str, ProbeWeights],
                          perturbations: Mapping[str, Perturbation]) -> None:
    for member_id in pool.ids:
        if member_id not in probes:
            raise PoolError(f"no probe for pool member '{member_id}'")
        if member_id not in perturbations:
            raise PoolError(f"no perturbation crafted on pool member '{member_id}'")


def transfer_matrix(pool: ModelPool, probes: Mapping[str, ProbeWeights], test: Dataset,
                    perturbations: Mapping[str, Perturbation],
                    cache: Optional[FeatureCache] = None) -> TransferReport:
    """|pool|² evaluations: rows are perturbation sources, columns are targets."""
    check_transfer_inputs(pool, probes, perturbations)
    cache = cache or FeatureCache()
    rows = {sid: transfer_row(sid, pool, probes, test, perturbations[sid], cache) for sid in pool.ids}
    return assemble_transfer(pool, perturbations, rows)


def cls_patch_heatmap(model: ModelHandle, image: np.ndarray, delta: Optional[Perturbation] = None) -> Heatmap:
    """cos([CLS], patch t) for every token t, on the patch grid."""
    bundle = vit.forward(apply(delta, image), model.params, model.config)
    values = row_cosines(bundle.cls.data[None, :], bundle.patches.data)
    grid = model.config.grid
    return Heatmap(np.clip(values, -1.0, 1.0).reshape(grid, grid))


def heatmap_change(reference: Heatmap, other: Heatmap) -> float:
    """Mean absolute cell difference between two heatmaps of the same grid."""
    if reference.values.shape != other.values.shape:
        raise ShapeError(f"heatmap grids differ: {reference.values.shape} vs {other.values.shape}")
    return float(np.mean(np.abs(reference.values - other.values)))


def _power_iteration(cov: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    v = rng.standard_normal(cov.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(PCA_MAX_ITERATIONS):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v, 0.0
        w /= norm
        converged = np.linalg.norm(w - v) < PCA_TOLERANCE
        v = w
        if converged:
            break
    return v, float(v @ cov @ v)


def pca_project(features: Union[np.ndarray, Sequence[np.ndarray]], k: int = 2, seed: int = 0) -> PCAResult:
    """
    Top-k principal components by seeded power iteration with deflation.

    Components point so their largest-magnitude coordinate is positive. When
    the centered data has rank below k, fewer components are returned and
    `rank_deficient` is set.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < k + 1:
        raise ShapeError(f"pca_project needs at least {k + 1} vectors as rows, got shape {x.shape}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (len(x) - 1)
    total = float(np.trace(cov))
    rng = make_rng(seed, PCA)

    components, eigenvalues = [], []
    for _ in range(k):
        v, lam = _power_iteration(cov, rng)
        if total <= 0.0 or lam <= PCA_RANK_TOLERANCE * total:
            break
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        components.append(v)
        eigenvalues.append(lam)
        cov = cov - lam * np.outer(v, v)

    rank_deficient = len(components) < k
    if rank_deficient:
        logger.warning(f"PCA: data rank below {k}; returning {len(components)} component(s)")
    comps = np.array(components).reshape(len(components), x.shape[1])
    explained = np.array(eigenvalues) / total if total > 0 else np.zeros(0)
    return PCAResult(points=centered @ comps.T, explained=explained, components=comps,
                     mean=mean, rank_deficient=rank_deficient)


def perturbation_histogram(delta: Perturbation, bins: int) -> Tuple[np.ndarray, np.ndarray]:
    """Counts of the channel-averaged δ over [−ε, ε] in equal-width bins, plus bin edges."""
    if bins < 2:
        raise ConfigError(f"histogram needs at least 2 bins, got {bins}")
    averaged = np.asarray(delta.delta, dtype=np.float64).mean(axis=-1)
    counts, edges = np.histogram(averaged, bins=bins, range=(-delta.epsilon, delta.epsilon))
    return counts, edges


def outer_bin_mass(counts: np.ndarray) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    return float((counts[0] + counts[-1]) / total) if total else 0.0


def render_gray(values: Union[Heatmap, Perturbation, np.ndarray], path: Path) -> Path:
    """Perturbations → PPM of 128+δ; heatmaps / 2-D maps → PGM with [−1,1] ↦ [0,255]."""
    if isinstance(values, Heatmap):
        values = values.values
    elif isinstance(values, Perturbation):
        values = values.delta
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("render_gray needs finite values")
    if values.ndim == 3:
        return write_ppm(GRAY_LEVEL + values, path)
    if values.ndim == 2:
        return write_pgm((np.clip(values, -1.0, 1.0) + 1.0) * 127.5, path)
    raise ShapeError(f"render_gray takes (H,W,3) perturbations or 2-D maps, got {values.shape}")


@dataclass
class PsapSummary:
    own_clean_acc: float
    own_attacked_acc: float
    unseen_clean_acc: float
    unseen_attacked_acc: float
    unchanged_fraction: float


def psap_summary(model: ModelHandle, probe: ProbeWeights, images: np.ndarray, labels: np.ndarray,
                 psaps: Sequence[Perturbation], unseen: Dataset) -> PsapSummary:
    """PSAP i on its own image i, and on unseen image i (cycled) for the locality check."""
    own_clean = np.array([predict_batch(probe, vit.extract_features(model, images[i])[0])[0][0]
                          for i in range(len(psaps))])
    own_attacked = np.array([predict_batch(probe, vit.extract_features(model, apply(p, images[i]))[0])[0][0]
                             for i, p in enumerate(psaps)])
    pick = np.arange(len(psaps)) % len(unseen)
    other_images, other_labels = unseen.images[pick], unseen.labels[pick]
    other_clean = predict_batch(probe, vit.extract_features(model, other_images)[0])[0]
    other_attacked = np.array([predict_batch(probe, vit.extract_features(model, apply(p, other_images[i]))[0])[0][0]
                               for i, p in enumerate(psaps)])
    own_labels = labels[:len(psaps)]
    return PsapSummary(
        own_clean_acc=float(np.mean(own_clean == own_labels)),
        own_attacked_acc=float(np.mean(own_attacked == own_labels)),
        unseen_clean_acc=float(np.mean(other_clean == other_labels)),
        unseen_attacked_acc=float(np.mean(other_attacked == other_labels)),
        unchanged_fraction=float(np.mean(other_attacked == other_clean)),
    )


def universality_rows(model: ModelHandle, probe: ProbeWeights, seen: Dataset, unseen: Dataset,
                      utap: Perturbation, csap: Perturbation, psap: PsapSummary,
                      cache: Optional[FeatureCache] = None) -> List[Dict[str, object]]:
    """UTAP, CSAP and PSAP accuracies on crafting images and on unseen images."""
    cache = cache or FeatureCache()
    label = csap.target_label
    rows: List[Dict[str, object]] = []

    def add(kind: str, scope: str, report_or_pair):
        if isinstance(report_or_pair, EvalReport):
            clean, attacked = report_or_pair.clean_acc, report_or_pair.attacked_acc
        else:
            clean, attacked = report_or_pair
        rows.append({"kind": kind, "scope": scope, "clean_acc": clean,
                     "attacked_acc": attacked, "drop": clean - attacked})

    add("UTAP", "seen", evaluate(model, probe, seen, utap, cache))
    add("UTAP", "unseen", evaluate(model, probe, unseen, utap, cache))
    add("CSAP", "seen_target_class", evaluate(model, probe, seen.restrict_to_class(label), csap, cache))
    add("CSAP", "unseen_target_class", evaluate(model, probe, unseen.restrict_to_class(label), csap, cache))
    add("CSAP", "unseen_other_classes", evaluate(model, probe, unseen.without_class(label), csap, cache))
    add("PSAP", "own_image", (psap.own_clean_acc, psap.own_attacked_acc))
    add("PSAP", "unseen", (psap.unseen_clean_acc, psap.unseen_attacked_acc))
    return rows
