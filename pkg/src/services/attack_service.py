"""
Attack Service
Crafts universal (UTAP), per-image (PSAP) and per-class (CSAP) perturbations
with L∞ sign-gradient PGD, plus the uniform random-noise baseline

Units: AttackConfig.alpha is on the unit-intensity scale, δ lives in pixel
units, so one PGD step moves each pixel of δ by 255·α.
"""

import logging
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from ..core import tensor as T
from ..core.exceptions import DatasetError, DivergenceError, ShapeError
from ..core.models import (AttackConfig, AttackInit, Dataset, ModelHandle, ModelPool, Perturbation,
                           PerturbationKind, PoolSchedule, RegularizerHooks, StepRecord, ProbeWeights,
                           step_size)
from ..core.rng import ATTACK, NOISE, make_rng
from ..core.tensor import Tape, Tensor, backward
from . import vit
from .pixel_ops import PIXEL_MAX, PIXEL_MIN, apply, float32_bound, project
from .probe_service import predict, probe_logits

logger = logging.getLogger(__name__)

PROGRESS_EVERY = 100
PSAP_MARGIN = 0.5

__all__ = ["apply", "utap_loss", "craft_utap", "craft_psap", "craft_csap", "random_baseline",
           "psap_step_pixels"]


def _features(model: ModelHandle, images, hooks: Optional[RegularizerHooks] = None):
    return vit.forward(images, model.params, model.config, hooks)


def utap_loss(model: ModelHandle, clean, attacked, lambda_patch: float,
              hooks: Optional[RegularizerHooks] = None,
              clean_features: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tensor:
    """
    cos(cls_clean, cls_attacked) + lambda_patch · mean_t cos(patch_clean[t], patch_attacked[t]).

    Batched inputs return the mean over the batch. Clean features never carry
    gradient; pass `clean_features` (cls, patches) to skip recomputing them.
    """
    if clean_features is None:
        bundle = _features(model, np.asarray(T.as_tensor(clean).data))
        clean_features = (bundle.cls.data, bundle.patches.data)
    clean_cls, clean_patches = (Tensor(v) for v in clean_features)
    attacked_features = _features(model, attacked, hooks)
    cls_term = T.cosine_similarity(clean_cls, attacked_features.cls)
    loss = cls_term
    if lambda_patch:
        patch_term = T.cosine_similarity(clean_patches, attacked_features.patches).mean(axis=-1)
        loss = cls_term + patch_term * lambda_patch
    return loss.mean() if loss.ndim else loss


def _initial_delta(shape: Tuple[int, ...], cfg: AttackConfig) -> np.ndarray:
    if cfg.init is AttackInit.UNIFORM:
        return project(make_rng(cfg.seed, ATTACK, 0).uniform(-cfg.epsilon, cfg.epsilon, shape), cfg.epsilon)
    return np.zeros(shape, dtype=np.float32)


def _check_finite(value: float, what: str, step: int) -> None:
    if not np.isfinite(value):
        logger.error(f"{what} diverged at step {step}")
        raise DivergenceError(what, step, value)


def craft_utap(source: Union[ModelHandle, ModelPool], attack_set: Dataset, cfg: AttackConfig,
               schedule: Optional[PoolSchedule] = None,
               trace: Optional[List[StepRecord]] = None) -> Perturbation:
    """
    Universal perturbation minimizing clean/attacked feature similarity.

    Per step: patch mask, attacked = clamp(image + δ⊙mask), batch-mean loss with
    attention-drop hooks, δ ← δ − 255α·sign(∂loss/∂δ), then clamp δ to ±ε.
    With a PoolSchedule the source model is re-drawn every switch_period steps.
    """
    cfg.validate()
    if len(attack_set) != cfg.n_images:
        raise DatasetError(f"attack set has {len(attack_set)} images, config expects n_images={cfg.n_images}")
    if schedule is not None:
        if not isinstance(source, ModelPool):
            raise TypeError("a PoolSchedule needs a ModelPool source")
        source_ids = tuple(schedule.member_ids)
    else:
        if not isinstance(source, ModelHandle):
            raise TypeError("craft_utap needs a ModelHandle, or a ModelPool with a PoolSchedule")
        source_ids = (source.model_id,)

    shape = attack_set.image_shape
    delta = _initial_delta(shape, cfg)
    bound = float32_bound(cfg.epsilon)
    pixel_step = np.float32(255.0 * cfg.alpha)
    clean_cache: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    step = 0
    logger.info(f"Crafting UTAP from {','.join(source_ids)}: {cfg.total_steps} steps, "
                f"alpha={cfg.alpha:.3e}, epsilon={cfg.epsilon}")

    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, ATTACK, 1, epoch).permutation(len(attack_set))
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            model = source.get(schedule.member_at(step)) if schedule is not None else source
            if model.config.image_shape != shape:
                raise ShapeError(f"model {model.model_id} expects {model.config.image_shape}, images are {shape}")
            if model.model_id not in clean_cache:
                clean_cache[model.model_id] = vit.extract_features(model, attack_set.images)
            cls_all, patches_all = clean_cache[model.model_id]

            hooks = cfg.regularizer_hooks(step)
            mask = vit.sample_patch_mask(model.config, hooks)
            delta_t = Tensor(delta, requires_grad=True)
            with Tape() as tape:
                attacked = T.clip(attack_set.images[idx] + delta_t * mask, PIXEL_MIN, PIXEL_MAX)
                loss = utap_loss(model, None, attacked, cfg.lambda_patch, hooks,
                                 clean_features=(cls_all[idx], patches_all[idx]))
            value = loss.item()
            _check_finite(value, "UTAP crafting", step)
            grad = backward(tape, loss)[delta_t]
            delta = np.clip(delta - pixel_step * np.sign(grad).astype(np.float32), -bound, bound)

            if trace is not None:
                trace.append(StepRecord(step, model.model_id, value, float(np.max(np.abs(delta)))))
            if step % PROGRESS_EVERY == 0:
                logger.info(f"UTAP step {step}/{cfg.total_steps} model={model.model_id} loss={value:.4f}")
            logger.debug(f"UTAP step {step} loss={value:.6f} max|delta|={np.max(np.abs(delta)):.3f}")
            step += 1

    perturbation = Perturbation(delta, cfg.epsilon, PerturbationKind.UTAP, source_ids,
                                cfg.config_hash(), step, cfg.seed)
    perturbation.check_bound()
    return perturbation


def psap_step_pixels(cfg: AttackConfig, steps: int) -> float:
    """Per-step pixel move ε·θ/steps (the unit-intensity step ε·θ/(255·steps) times 255)."""
    return float(cfg.epsilon) * cfg.theta / steps if steps else 0.0


def _margin_reached(probs: np.ndarray, label: int) -> bool:
    others = np.delete(probs, label)
    return int(np.argmax(probs)) != label and float(others.max() - probs[label]) >= PSAP_MARGIN


def craft_psap(model: ModelHandle, probe: ProbeWeights, image: np.ndarray, label: int,
               cfg: AttackConfig, steps: Optional[int] = None) -> Perturbation:
    """Per-image gradient ascent on probe cross-entropy; stops once flipped with margin 0.5."""
    steps = cfg.psap_steps if steps is None else steps
    image = np.asarray(image, dtype=np.float32)
    if image.shape != model.config.image_shape:
        raise ShapeError(f"image shape {image.shape} does not match model input {model.config.image_shape}")
    bound = float32_bound(cfg.epsilon)
    pixel_step = np.float32(psap_step_pixels(cfg, steps))
    delta = np.zeros(image.shape, dtype=np.float32)

    used = 0
    for used in range(1, steps + 1):
        delta_t = Tensor(delta, requires_grad=True)
        with Tape() as tape:
            attacked = T.clip(image + delta_t, PIXEL_MIN, PIXEL_MAX)
            loss = T.cross_entropy_logits(probe_logits(probe, _features(model, attacked).cls), label)
        _check_finite(loss.item(), "PSAP crafting", used)
        grad = backward(tape, loss)[delta_t]
        delta = np.clip(delta + pixel_step * np.sign(grad).astype(np.float32), -bound, bound)
        _, probs = predict(probe, _features(model, apply(delta, image)))
        if _margin_reached(probs, label):
            break
    return Perturbation(delta, cfg.epsilon, PerturbationKind.PSAP, (model.model_id,),
                        cfg.config_hash(), used, cfg.seed, target_label=label)


def craft_csap(model: ModelHandle, probe: ProbeWeights, class_set: Dataset, label: int,
               cfg: AttackConfig) -> Perturbation:
    """
    One perturbation for a whole class: batched sign-gradient ascent on mean
    cross-entropy with the UTAP schedule (L epochs of batches of B), N = class size.
    """
    if len(class_set) == 0:
        raise DatasetError("CSAP needs a nonempty class set")
    if np.any(class_set.labels != label):
        raise DatasetError(f"CSAP class set mixes labels {np.unique(class_set.labels).tolist()}, expected only {label}")
    class_cfg = cfg.with_overrides(n_images=len(class_set), batch=min(cfg.batch, len(class_set)))
    class_cfg.validate()
    bound = float32_bound(cfg.epsilon)
    pixel_step = np.float32(255.0 * step_size(class_cfg))
    delta = _initial_delta(class_set.image_shape, class_cfg)
    labels = class_set.labels

    step = 0
    for epoch in range(class_cfg.epochs):
        order = make_rng(cfg.seed, ATTACK, 2, epoch).permutation(len(class_set))
        for start in range(0, len(order), class_cfg.batch):
            idx = order[start:start + class_cfg.batch]
            delta_t = Tensor(delta, requires_grad=True)
            with Tape() as tape:
                attacked = T.clip(class_set.images[idx] + delta_t, PIXEL_MIN, PIXEL_MAX)
                loss = T.cross_entropy_logits(probe_logits(probe, _features(model, attacked).cls), labels[idx])
            _check_finite(loss.item(), "CSAP crafting", step)
            grad = backward(tape, loss)[delta_t]
            delta = np.clip(delta + pixel_step * np.sign(grad).astype(np.float32), -bound, bound)
            step += 1
    logger.info(f"CSAP for class {label} on {model.model_id}: {step} steps")
    return Perturbation(delta, cfg.epsilon, PerturbationKind.CSAP, (model.model_id,),
                        class_cfg.config_hash(), step, cfg.seed, target_label=label)


def random_baseline(shape: Tuple[int, ...], epsilon: float, seed: int) -> Perturbation:
    """I.i.d. uniform noise on [−ε, ε]."""
    delta = project(make_rng(seed, NOISE).uniform(-epsilon, epsilon, tuple(shape)), epsilon)
    return Perturbation(delta, epsilon, PerturbationKind.RANDOM, (), "", 0, seed)
