"""
Toy Vision Transformer feature extractor

Pre-norm encoder blocks (norm → attention → residual, norm → MLP → residual),
GELU MLPs, learned [CLS] token and positional embeddings. Pixel normalization
((x/255 − mean)/std per channel) happens inside `forward`, so callers always
work in raw [0,255] pixel space.

Patch layout: patches are numbered row-major over the patch grid; each row of
`patchify` flattens its patch pixel by pixel (row-major) with the three
channels of a pixel adjacent, i.e. index = (py·p + px)·3 + c.

Parameter naming scheme::

    patch_embed.weight  (3p², D)      patch_embed.bias  (D,)
    cls_token           (D,)          pos_embed         (T+1, D)
    block{i}.norm1.gain / .bias       block{i}.norm2.gain / .bias
    block{i}.attn.{q,k,v,out}.weight (D, D) / .bias (D,)
    block{i}.mlp.fc1.weight (D, rD) / .bias   block{i}.mlp.fc2.weight (rD, D) / .bias
    norm.gain / norm.bias             head.weight (D, K) / head.bias (K,)
"""

import logging
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from ..core import tensor as T
from ..core.exceptions import ShapeError
from ..core.models import FeatureBundle, ModelHandle, RegularizerHooks, ViTConfig
from ..core.rng import INIT, PATCH_MASK, make_rng
from ..core.tensor import Tensor

logger = logging.getLogger(__name__)

INIT_STD = 0.02

ImageInput = Union[np.ndarray, Tensor]


def param_shapes(cfg: ViTConfig) -> Dict[str, Tuple[int, ...]]:
    """Canonical parameter names and shapes, in checkpoint order."""
    d, hidden = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    shapes: Dict[str, Tuple[int, ...]] = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (cfg.num_patches + 1, d),
    }
    for i in range(cfg.depth):
        prefix = f"block{i}"
        shapes[f"{prefix}.norm1.gain"] = (d,)
        shapes[f"{prefix}.norm1.bias"] = (d,)
        for proj in ("q", "k", "v", "out"):
            shapes[f"{prefix}.attn.{proj}.weight"] = (d, d)
            shapes[f"{prefix}.attn.{proj}.bias"] = (d,)
        shapes[f"{prefix}.norm2.gain"] = (d,)
        shapes[f"{prefix}.norm2.bias"] = (d,)
        shapes[f"{prefix}.mlp.fc1.weight"] = (d, hidden)
        shapes[f"{prefix}.mlp.fc1.bias"] = (hidden,)
        shapes[f"{prefix}.mlp.fc2.weight"] = (hidden, d)
        shapes[f"{prefix}.mlp.fc2.bias"] = (d,)
    shapes["norm.gain"] = (d,)
    shapes["norm.bias"] = (d,)
    shapes["head.weight"] = (d, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def init_params(cfg: ViTConfig, seed: int) -> Dict[str, Tensor]:
    """Seeded initialization: N(0, 0.02) weights and embeddings, unit gains, zero biases."""
    rng = make_rng(seed, INIT)
    params: Dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gain"):
            value = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias"):
            value = np.zeros(shape, dtype=np.float32)
        else:
            value = (rng.standard_normal(shape) * INIT_STD).astype(np.float32)
        params[name] = Tensor(value)
    return params


def check_params(params: Dict[str, Tensor], cfg: ViTConfig) -> None:
    """Reject missing, mis-shaped or non-finite parameters before any compute."""
    for name, shape in param_shapes(cfg).items():
        if name not in params:
            raise ShapeError(f"missing parameter '{name}'")
        value = params[name].data
        if value.shape != shape:
            raise ShapeError(f"parameter '{name}' has shape {value.shape}, expected {shape}")
        if not np.all(np.isfinite(value)):
            raise ValueError(f"parameter '{name}' contains NaN or Inf")


def _check_image_shape(shape: Tuple[int, ...], cfg: ViTConfig) -> None:
    if tuple(shape[-3:]) != cfg.image_shape or len(shape) not in (3, 4):
        raise ShapeError(f"image shape {tuple(shape)} does not match configured {cfg.image_shape}")


def patchify(image: ImageInput, cfg: ViTConfig) -> Tensor:
    """(H,W,3) → (T, 3p²) or (B,H,W,3) → (B, T, 3p²), patches in row-major grid order."""
    image = T.as_tensor(image)
    _check_image_shape(image.shape, cfg)
    g, p = cfg.grid, cfg.patch_size
    single = image.ndim == 3
    batched = image.reshape((1,) + image.shape) if single else image
    b = batched.shape[0]
    blocks = batched.reshape((b, g, p, g, p, 3)).transpose((0, 1, 3, 2, 4, 5))
    rows = blocks.reshape((b, g * g, cfg.patch_dim))
    return rows.reshape((g * g, cfg.patch_dim)) if single else rows


def unpatchify(rows: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """Inverse of `patchify` on plain arrays."""
    rows = np.asarray(rows)
    g, p = cfg.grid, cfg.patch_size
    single = rows.ndim == 2
    batched = rows[None] if single else rows
    b = batched.shape[0]
    images = batched.reshape(b, g, g, p, p, 3).transpose(0, 1, 3, 2, 4, 5).reshape(b, g * p, g * p, 3)
    return images[0] if single else images


def _linear(x: Tensor, params: Dict[str, Tensor], name: str) -> Tensor:
    return x @ params[f"{name}.weight"] + params[f"{name}.bias"]


def _attention(x: Tensor, params: Dict[str, Tensor], prefix: str, cfg: ViTConfig,
               drop: bool, maps: Optional[List[np.ndarray]]) -> Tensor:
    b, n, d = x.shape
    h, dh = cfg.num_heads, cfg.head_dim

    def heads(t: Tensor) -> Tensor:
        return t.reshape((b, n, h, dh)).transpose((0, 2, 1, 3))

    q = heads(_linear(x, params, f"{prefix}.attn.q"))
    k = heads(_linear(x, params, f"{prefix}.attn.k"))
    v = heads(_linear(x, params, f"{prefix}.attn.v"))
    scores = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    weights = T.softmax_rows(scores)
    if maps is not None:
        maps.append(np.array(weights.data))
    if drop:
        # forward value unchanged, no gradient through Q/K
        weights = T.stop_gradient(weights)
    mixed = (weights @ v).transpose((0, 2, 1, 3)).reshape((b, n, d))
    return _linear(mixed, params, f"{prefix}.attn.out")


def _mlp(x: Tensor, params: Dict[str, Tensor], prefix: str) -> Tensor:
    return _linear(T.gelu(_linear(x, params, f"{prefix}.mlp.fc1")), params, f"{prefix}.mlp.fc2")


def normalize_pixels(images: Tensor, cfg: ViTConfig) -> Tensor:
    mean = np.asarray(cfg.channel_mean, dtype=np.float32)
    std = np.asarray(cfg.channel_std, dtype=np.float32)
    return (images * (1.0 / 255.0) - mean) / std


def encode(images: ImageInput, params: Dict[str, Tensor], cfg: ViTConfig,
           hooks: Optional[RegularizerHooks] = None,
           keep_attention: bool = False) -> Tuple[Tensor, Optional[List[np.ndarray]]]:
    """Token sequence after the final norm, always batched (B, T+1, D)."""
    images = T.as_tensor(images)
    _check_image_shape(images.shape, cfg)
    check_params(params, cfg)
    if images.ndim == 3:
        images = images.reshape((1,) + images.shape)
    b = images.shape[0]

    tokens = _linear(patchify(normalize_pixels(images, cfg), cfg), params, "patch_embed")
    cls_rows = params["cls_token"].reshape((1, 1, cfg.embed_dim)) + np.zeros((b, 1, cfg.embed_dim), dtype=np.float32)
    x = T.concat([cls_rows, tokens], axis=1) + params["pos_embed"]

    drop_flags = hooks.attention_drop_flags(cfg.depth) if hooks is not None else np.zeros(cfg.depth, dtype=bool)
    maps: Optional[List[np.ndarray]] = [] if keep_attention else None
    for i in range(cfg.depth):
        prefix = f"block{i}"
        normed = T.layer_norm(x, params[f"{prefix}.norm1.gain"], params[f"{prefix}.norm1.bias"])
        x = x + _attention(normed, params, prefix, cfg, bool(drop_flags[i]), maps)
        normed = T.layer_norm(x, params[f"{prefix}.norm2.gain"], params[f"{prefix}.norm2.bias"])
        x = x + _mlp(normed, params, prefix)
    return T.layer_norm(x, params["norm.gain"], params["norm.bias"]), maps


def forward(images: ImageInput, params: Dict[str, Tensor], cfg: ViTConfig,
            hooks: Optional[RegularizerHooks] = None, keep_attention: bool = False) -> FeatureBundle:
    """FeatureBundle for one image (cls (D,), patches (T,D)) or a batch ((B,D), (B,T,D))."""
    single = T.as_tensor(images).ndim == 3
    tokens, maps = encode(images, params, cfg, hooks, keep_attention)
    cls, patches = tokens[:, 0, :], tokens[:, 1:, :]
    if single:
        cls, patches = cls[0], patches[0]
    return FeatureBundle(cls=cls, patches=patches, attention_maps=maps)


def classify(images: ImageInput, params: Dict[str, Tensor], cfg: ViTConfig,
             hooks: Optional[RegularizerHooks] = None) -> Tensor:
    """Classification-head logits on the [CLS] feature."""
    features = forward(images, params, cfg, hooks)
    return _linear(features.cls, params, "head")


def sample_patch_mask(cfg: ViTConfig, hooks: RegularizerHooks) -> np.ndarray:
    """Image-shaped 0/1 mask, constant per patch; each patch kept with probability 1 − patch_mask_prob."""
    g, p = cfg.grid, cfg.patch_size
    draws = make_rng(hooks.rng_seed, PATCH_MASK, hooks.iteration).random((g, g))
    keep = (draws >= hooks.patch_mask_prob).astype(np.float32)
    return np.repeat(np.repeat(keep, p, axis=0), p, axis=1)[:, :, None].repeat(3, axis=2)


def extract_features(handle: ModelHandle, images: np.ndarray,
                     batch_size: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient-free batched features: cls (N,D) and patches (N,T,D)."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    cls_parts, patch_parts = [], []
    for start in range(0, len(images), batch_size):
        bundle = forward(images[start:start + batch_size], handle.params, handle.config)
        cls_parts.append(bundle.cls.data)
        patch_parts.append(bundle.patches.data)
    d, t = handle.config.embed_dim, handle.config.num_patches
    if not cls_parts:
        return np.zeros((0, d), np.float32), np.zeros((0, t, d), np.float32)
    return np.concatenate(cls_parts), np.concatenate(patch_parts)
