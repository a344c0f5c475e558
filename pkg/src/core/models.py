"""
Core domain models for utap-lab
Value objects shared by every layer
"""

import hashlib
import struct
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigError, DatasetError, PoolError, ShapeError
from .rng import ATTN_DROP, POOL_SWITCH, make_rng
from .tensor import Tensor


class TextureKind(Enum):
    """Procedural generator families standing in for tissue classes"""
    BLOBS = "blobs"
    STRIPES = "stripes"
    CHECKER = "checker"
    LOW_FREQ_NOISE = "low_freq_noise"
    HIGH_FREQ_NOISE = "high_freq_noise"
    RINGS = "rings"


class PerturbationKind(Enum):
    UTAP = "UTAP"
    PSAP = "PSAP"
    CSAP = "CSAP"
    RANDOM = "RANDOM"


class AttackInit(Enum):
    ZEROS = "zeros"
    UNIFORM = "uniform"


class Role(Enum):
    INTERNAL = "internal"
    EXTERNAL = "external"


@dataclass(frozen=True)
class ViTConfig:
    """Toy Vision Transformer hyper-parameters"""
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    num_heads: int = 4
    depth: int = 4
    mlp_ratio: int = 4
    num_classes: int = 6
    channel_mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    channel_std: Tuple[float, float, float] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if any(s <= 0 for s in self.channel_std):
            raise ConfigError(f"channel_std entries must be positive, got {self.channel_std}")
        if min(self.image_size, self.patch_size, self.embed_dim, self.num_heads,
               self.depth, self.mlp_ratio, self.num_classes) < 1:
            raise ConfigError(f"ViTConfig extents must be positive: {self}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.image_size, self.image_size, 3)


@dataclass
class RegularizerHooks:
    """Transfer regularizers active during one crafting step"""
    attn_drop_prob: float = 0.0
    patch_mask_prob: float = 0.0
    rng_seed: int = 0
    iteration: int = 0

    def __post_init__(self):
        for name in ("attn_drop_prob", "patch_mask_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")

    def attention_drop_flags(self, depth: int) -> np.ndarray:
        """Per-block coin flips for this iteration (True = treat attention as constant)."""
        if self.attn_drop_prob <= 0.0:
            return np.zeros(depth, dtype=bool)
        draws = make_rng(self.rng_seed, ATTN_DROP, self.iteration).random(depth)
        return draws < self.attn_drop_prob


@dataclass
class FeatureBundle:
    """[CLS] and patch-token features from one forward pass (batched or single)"""
    cls: Tensor
    patches: Tensor
    attention_maps: Optional[List[np.ndarray]] = None


@dataclass(frozen=True)
class ClassSpec:
    index: int
    name: str
    kind: TextureKind
    color: Tuple[float, float, float]
    scale: float


@dataclass
class Dataset:
    """Images (N,H,W,3) in [0,255] with integer labels"""
    images: np.ndarray
    labels: np.ndarray
    class_names: Tuple[str, ...]
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ShapeError(f"dataset images must be (N,H,W,3), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def take(self, indices: Sequence[int], split: Optional[str] = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_names, split or self.split)

    def restrict_to_class(self, label: int) -> "Dataset":
        return self.take(np.flatnonzero(self.labels == label))

    def without_class(self, label: int) -> "Dataset":
        return self.take(np.flatnonzero(self.labels != label))


@dataclass
class ModelHandle:
    """A frozen toy foundation model"""
    model_id: str
    config: ViTConfig
    params: Dict[str, Tensor]
    seed: int
    variant: str = "default"


@dataclass
class ModelPool:
    """Ordered pool members plus the internal/external designation of one experiment"""
    members: List[ModelHandle]
    internal_ids: FrozenSet[str] = frozenset()

    def __post_init__(self):
        ids = [m.model_id for m in self.members]
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise PoolError(f"duplicate model identifiers in pool: {duplicates}")
        unknown = set(self.internal_ids) - set(ids)
        if unknown:
            raise PoolError(f"internal ids not in pool: {sorted(unknown)}")
        self.internal_ids = frozenset(self.internal_ids)

    def __len__(self) -> int:
        return len(self.members)

    @property
    def ids(self) -> List[str]:
        return [m.model_id for m in self.members]

    def get(self, model_id: str) -> ModelHandle:
        for member in self.members:
            if member.model_id == model_id:
                return member
        raise PoolError(f"model '{model_id}' is not in the pool")

    def designate(self, internal_ids) -> "ModelPool":
        return ModelPool(list(self.members), frozenset(internal_ids))

    def role_of(self, model_id: str) -> Role:
        return Role.INTERNAL if model_id in self.internal_ids else Role.EXTERNAL

    @property
    def internal(self) -> List[ModelHandle]:
        return [m for m in self.members if m.model_id in self.internal_ids]

    @property
    def external(self) -> List[ModelHandle]:
        return [m for m in self.members if m.model_id not in self.internal_ids]


@dataclass
class ProbeWeights:
    """Linear classifier over clean [CLS] features"""
    weight: np.ndarray
    bias: np.ndarray
    owner_id: str

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float32)
        self.bias = np.asarray(self.bias, dtype=np.float32)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"probe weight {self.weight.shape} and bias {self.bias.shape} disagree")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class AttackConfig:
    """Crafting hyper-parameters; alpha is derived, never set"""
    epsilon: float = 20.0
    theta: float = 10.0
    batch: int = 5
    epochs: int = 10
    n_images: int = 600
    lambda_patch: float = 0.5
    patch_mask_prob: float = 0.3
    attn_drop_prob: float = 0.5
    seed: int = 0
    init: AttackInit = AttackInit.ZEROS
    psap_steps: int = 100
    alpha: float = field(init=False)

    def __post_init__(self):
        self.init = AttackInit(self.init)
        self.alpha = step_size(self)

    def validate(self) -> "AttackConfig":
        if self.epsilon <= 0 or self.theta <= 0:
            raise ConfigError(f"epsilon and theta must be positive (epsilon={self.epsilon}, theta={self.theta})")
        if self.batch < 1 or self.epochs < 1:
            raise ConfigError(f"batch and epochs must be >= 1 (batch={self.batch}, epochs={self.epochs})")
        if self.n_images < self.batch:
            raise ConfigError(f"n_images ({self.n_images}) must be >= batch ({self.batch})")
        if self.lambda_patch < 0:
            raise ConfigError(f"lambda_patch must be >= 0, got {self.lambda_patch}")
        for name in ("patch_mask_prob", "attn_drop_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.psap_steps < 0:
            raise ConfigError(f"psap_steps must be >= 0, got {self.psap_steps}")
        return self

    def with_overrides(self, **changes) -> "AttackConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self) if f.init}
        values.update(changes)
        return AttackConfig(**values)

    @property
    def total_steps(self) -> int:
        return self.epochs * -(-self.n_images // self.batch)

    def regularizer_hooks(self, iteration: int = 0) -> RegularizerHooks:
        return RegularizerHooks(self.attn_drop_prob, self.patch_mask_prob, self.seed, iteration)

    def config_hash(self) -> str:
        packed = struct.pack("<ddIIIdddI", self.epsilon, self.theta, self.batch, self.epochs,
                             self.n_images, self.lambda_patch, self.patch_mask_prob,
                             self.attn_drop_prob, self.seed) + self.init.value.encode()
        return hashlib.sha256(packed).hexdigest()[:16]


def step_size(cfg: AttackConfig) -> float:
    """α = ε·θ·B / (255·L·N), in unit-intensity scale, computed in 64-bit."""
    return float(np.float64(cfg.epsilon) * cfg.theta * cfg.batch / (255.0 * cfg.epochs * cfg.n_images))


@dataclass
class Perturbation:
    """Signed pixel offsets bounded by ±epsilon"""
    delta: np.ndarray
    epsilon: float
    kind: PerturbationKind
    source_ids: Tuple[str, ...] = ()
    config_hash: str = ""
    iterations: int = 0
    seed: int = 0
    target_label: int = -1

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float32)
        self.kind = PerturbationKind(self.kind)
        self.source_ids = tuple(self.source_ids)

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.delta))) if self.delta.size else 0.0

    def check_bound(self) -> None:
        if self.max_abs > self.epsilon:
            raise ShapeError(f"perturbation exceeds its bound: max|delta|={self.max_abs} > epsilon={self.epsilon}")


@dataclass(frozen=True)
class PoolSchedule:
    """Source model re-drawn uniformly every switch_period steps"""
    member_ids: Tuple[str, ...]
    switch_period: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.member_ids:
            raise PoolError("pool schedule needs at least one member")
        if self.switch_period < 1:
            raise ConfigError(f"switch_period must be >= 1, got {self.switch_period}")

    def member_at(self, step: int) -> str:
        block = step // self.switch_period
        choice = make_rng(self.seed, POOL_SWITCH, block).integers(len(self.member_ids))
        return self.member_ids[int(choice)]


@dataclass
class StepRecord:
    step: int
    model_id: str
    loss: float
    max_abs_delta: float


@dataclass
class EvalReport:
    """Clean vs attacked accuracy of one model + probe"""
    model_id: str
    probe_id: str
    clean_acc: float
    attacked_acc: float
    per_class_clean: np.ndarray
    per_class_attacked: np.ndarray
    mean_cls_cosine: float
    source_ids: Tuple[str, ...] = ()

    @property
    def drop(self) -> float:
        return self.clean_acc - self.attacked_acc


@dataclass
class TransferReport:
    """(source, target) matrix of evaluations"""
    source_ids: List[str]
    target_ids: List[str]
    entries: Dict[Tuple[str, str], EvalReport]
    roles: Dict[Tuple[str, str], Role]

    def entry(self, source_id: str, target_id: str) -> EvalReport:
        return self.entries[(source_id, target_id)]

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.source_ids), len(self.target_ids)


@dataclass
class Heatmap:
    """[CLS]-to-patch cosine similarities on the patch grid (row-major)"""
    values: np.ndarray

    @property
    def grid(self) -> int:
        return self.values.shape[0]


@dataclass
class PCAResult:
    points: np.ndarray
    explained: np.ndarray
    components: np.ndarray
    mean: np.ndarray
    rank_deficient: bool = False
