"""
Model Zoo Service
Trains, persists and pools independently initialized toy foundation models
Following Single Responsibility Principle
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..core.exceptions import ConfigError, DatasetError, DivergenceError, PoolError, ShapeError
from ..core.interfaces import IArtifactRepository
from ..core.models import Dataset, ModelHandle, ModelPool, ViTConfig
from ..core.rng import TRAIN, make_rng
from ..core.tensor import AdamState, Tape, Tensor, adam_step, backward, cross_entropy_logits
from . import vit

logger = logging.getLogger(__name__)

# Architectural variants emulating diversity among pool members.
VARIANTS: Dict[str, Dict[str, int]] = {
    "default": {},
    "deep": {"depth": 6},
    "wide": {"embed_dim": 96},
    "patch16": {"patch_size": 16},
}


@dataclass(frozen=True)
class MemberSpec:
    variant: str
    seed: int
    config: ViTConfig

    @property
    def model_id(self) -> str:
        return f"{self.variant}-s{self.seed}"


def variant_config(variant: str, image_size: int = 64, num_classes: int = 6) -> ViTConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown model variant '{variant}' (known: {', '.join(VARIANTS)})")
    return replace(ViTConfig(image_size=image_size, num_classes=num_classes), **VARIANTS[variant])


def parse_pool_spec(text: str, image_size: int = 64, num_classes: int = 6) -> List[MemberSpec]:
    """`variant@seed,variant@seed,...` → member specs (duplicates rejected)."""
    specs: List[MemberSpec] = []
    for entry in (part.strip() for part in text.split(",")):
        if not entry:
            continue
        variant, sep, seed = entry.partition("@")
        if not sep or not seed.strip().isdigit():
            raise ConfigError(f"pool entry '{entry}' must look like variant@seed")
        specs.append(MemberSpec(variant.strip(), int(seed), variant_config(variant.strip(), image_size, num_classes)))
    if not specs:
        raise ConfigError("pool specification is empty")
    check_unique(specs)
    return specs


def check_unique(specs: Sequence[MemberSpec]) -> None:
    ids = [s.model_id for s in specs]
    duplicates = sorted({i for i in ids if ids.count(i) > 1})
    if duplicates:
        raise PoolError(f"duplicate model identifiers in pool: {duplicates}")


def train_model(ds: Dataset, cfg: ViTConfig, epochs: int, lr: float, seed: int,
                batch_size: int = 32, model_id: Optional[str] = None,
                variant: str = "default") -> ModelHandle:
    """Supervised Adam + cross-entropy training of a ViT with its classification head."""
    if len(ds) == 0:
        raise DatasetError("cannot train on an empty dataset")
    if ds.image_shape != cfg.image_shape:
        raise ShapeError(f"dataset images {ds.image_shape} do not match model input {cfg.image_shape}")
    if int(ds.labels.max()) >= cfg.num_classes:
        raise DatasetError(f"label {int(ds.labels.max())} exceeds num_classes {cfg.num_classes}")
    model_id = model_id or f"{variant}-s{seed}"

    params = vit.init_params(cfg, seed)
    state = AdamState(lr=lr)
    rng = make_rng(seed, TRAIN)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(ds))
        losses = []
        for start in range(0, len(ds), batch_size):
            idx = order[start:start + batch_size]
            trainable = {name: Tensor(p.data, requires_grad=True) for name, p in params.items()}
            with Tape() as tape:
                loss = cross_entropy_logits(vit.classify(ds.images[idx], trainable, cfg), ds.labels[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"training of {model_id}", step, value)
            grads = backward(tape, loss)
            params = {name: Tensor(p.data) for name, p in adam_step(trainable, grads, state).items()}
            losses.append(value)
            step += 1
        logger.info(f"{model_id}: epoch {epoch + 1}/{epochs} mean loss {np.mean(losses):.4f}")

    return ModelHandle(model_id=model_id, config=cfg, params=params, seed=seed, variant=variant)


def head_accuracy(handle: ModelHandle, ds: Dataset, batch_size: int = 64) -> float:
    """Clean accuracy of the model's own classification head."""
    correct = 0
    for start in range(0, len(ds), batch_size):
        logits = vit.classify(ds.images[start:start + batch_size], handle.params, handle.config)
        correct += int(np.sum(np.argmax(logits.data, axis=-1) == ds.labels[start:start + batch_size]))
    return correct / max(len(ds), 1)


class ModelZooService:
    """Trains pool members and persists their checkpoints"""

    def __init__(self, repository: IArtifactRepository, epochs: int = 20, lr: float = 1e-3,
                 batch_size: int = 32):
        self._repository = repository
        self._epochs = epochs
        self._lr = lr
        self._batch_size = batch_size

    def checkpoint_path(self, directory: Path, spec: MemberSpec) -> Path:
        return Path(directory) / f"{spec.model_id}.utlb"

    def train_member(self, spec: MemberSpec, ds: Dataset, directory: Optional[Path] = None) -> ModelHandle:
        """Train one member and, given a directory, write its checkpoint there."""
        logger.info(f"Training {spec.model_id} ({self._epochs} epochs)")
        handle = train_model(ds, spec.config, self._epochs, self._lr, spec.seed,
                             self._batch_size, spec.model_id, spec.variant)
        if directory is not None:
            self._repository.save_model(handle, self.checkpoint_path(directory, spec))
        return handle

    def build_pool(self, specs: Sequence[MemberSpec], ds: Dataset, directory: Optional[Path] = None) -> ModelPool:
        """Train every member in spec order."""
        check_unique(specs)
        return ModelPool([self.train_member(s, ds, directory) for s in specs])


def pool_paths(directory: Path, pool: ModelPool) -> List[Path]:
    return [Path(directory) / f"{m.model_id}.utlb" for m in pool.members]


def designate_prefix(pool: ModelPool, k: int) -> Tuple[ModelPool, List[str]]:
    """First k members internal, the rest external."""
    if not 1 <= k <= len(pool):
        raise PoolError(f"pool prefix size {k} outside 1..{len(pool)}")
    internal = pool.ids[:k]
    return pool.designate(internal), internal
