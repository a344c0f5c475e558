"""
Linear Probe Service
Multinomial logistic regression on frozen clean [CLS] features
"""

import hashlib
import logging
import threading
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from ..core.exceptions import DatasetError, PoolError, ShapeError
from ..core.models import Dataset, FeatureBundle, ModelHandle, Perturbation, ProbeWeights
from ..core.rng import PROBE, make_rng
from ..core.tensor import AdamState, Tape, Tensor, adam_step, backward, cross_entropy_logits
from . import vit
from .pixel_ops import apply

logger = logging.getLogger(__name__)

PROBE_INIT_STD = 0.01


class FeatureCache:
    """Clean [CLS] features keyed by (model id, image bytes digest)"""

    def __init__(self):
        self._entries: Dict[Tuple[str, str], np.ndarray] = {}
        self._lock = threading.Lock()

    @staticmethod
    def _digest(images: np.ndarray) -> str:
        return hashlib.sha256(np.ascontiguousarray(images, dtype=np.float32).tobytes()).hexdigest()

    def cls_features(self, model: ModelHandle, images: np.ndarray) -> np.ndarray:
        key = (model.model_id, self._digest(images))
        with self._lock:
            cached = self._entries.get(key)
        if cached is None:
            cached, _ = vit.extract_features(model, images)
            with self._lock:
                self._entries[key] = cached
        return cached

    def __len__(self) -> int:
        return len(self._entries)


def fit_linear(features: np.ndarray, labels: np.ndarray, num_classes: int, epochs: int, lr: float,
               seed: int, owner_id: str = "") -> ProbeWeights:
    """Full-batch Adam on mean cross-entropy over fixed feature vectors."""
    features = np.asarray(features, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise DatasetError(f"probe needs at least 2 classes in its training set, got {np.unique(labels).tolist()}")
    if features.ndim != 2 or len(features) != len(labels):
        raise ShapeError(f"features {features.shape} do not pair with {len(labels)} labels")

    rng = make_rng(seed, PROBE)
    params = {
        "weight": Tensor(rng.standard_normal((num_classes, features.shape[1])) * PROBE_INIT_STD),
        "bias": Tensor(np.zeros(num_classes)),
    }
    state = AdamState(lr=lr)
    for epoch in range(epochs):
        trainable = {name: Tensor(p.data, requires_grad=True) for name, p in params.items()}
        with Tape() as tape:
            logits = features @ trainable["weight"].transpose() + trainable["bias"]
            loss = cross_entropy_logits(logits, labels)
        grads = backward(tape, loss)
        params = adam_step(trainable, grads, state)
        if epoch % 50 == 0:
            logger.debug(f"probe {owner_id}: epoch {epoch} loss {loss.item():.4f}")
    return ProbeWeights(params["weight"].data, params["bias"].data, owner_id)


def fit_probe(model: ModelHandle, train: Dataset, epochs: int = 200, lr: float = 1e-2, seed: int = 0,
              cache: Optional[FeatureCache] = None) -> ProbeWeights:
    """Probe on clean training features; the features are computed once."""
    features = (cache or FeatureCache()).cls_features(model, train.images)
    probe = fit_linear(features, train.labels, train.num_classes, epochs, lr, seed, model.model_id)
    logger.info(f"Fitted probe for {model.model_id}: train accuracy {accuracy_on_features(probe, features, train.labels):.4f}")
    return probe


def probe_logits(probe: ProbeWeights, cls: Union[Tensor, np.ndarray]) -> Tensor:
    """W·cls + b for one (D,) or a batch (B,D) of features; differentiable in cls."""
    cls = cls if isinstance(cls, Tensor) else Tensor(cls)
    if cls.shape[-1] != probe.embed_dim:
        raise ShapeError(f"feature width {cls.shape[-1]} does not match probe width {probe.embed_dim}")
    weight_t, bias = Tensor(probe.weight.T), Tensor(probe.bias)
    if cls.ndim == 1:
        return (cls.reshape((1, probe.embed_dim)) @ weight_t).reshape((probe.num_classes,)) + bias
    return cls @ weight_t + bias


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predict_batch(probe: ProbeWeights, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Predictions and probabilities for (N,D) features; ties go to the lowest class index."""
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 2 or features.shape[1] != probe.embed_dim:
        raise ShapeError(f"features {features.shape} do not match probe width {probe.embed_dim}")
    logits = features @ probe.weight.T + probe.bias
    return np.argmax(logits, axis=-1), softmax(logits)


def predict(probe: ProbeWeights, features: Union[FeatureBundle, np.ndarray]) -> Tuple[int, np.ndarray]:
    cls = features.cls.data if isinstance(features, FeatureBundle) else np.asarray(features)
    if cls.ndim != 1:
        raise ShapeError(f"predict takes one feature vector, got shape {cls.shape}")
    preds, probs = predict_batch(probe, cls[None])
    return int(preds[0]), probs[0]


def accuracy_on_features(probe: ProbeWeights, features: np.ndarray, labels: np.ndarray) -> float:
    preds, _ = predict_batch(probe, features)
    return float(np.mean(preds == labels)) if len(labels) else 0.0


def check_owner(model: ModelHandle, probe: ProbeWeights) -> None:
    if probe.owner_id and probe.owner_id != model.model_id:
        raise PoolError(f"probe belongs to '{probe.owner_id}', not '{model.model_id}'")
    if probe.embed_dim != model.config.embed_dim:
        raise ShapeError(f"probe width {probe.embed_dim} does not match model width {model.config.embed_dim}")


def accuracy(model: ModelHandle, probe: ProbeWeights, ds: Dataset,
             perturbation: Optional[Perturbation] = None, cache: Optional[FeatureCache] = None) -> float:
    """Mean correctness over ds, applying (and clamping) the perturbation when provided."""
    check_owner(model, probe)
    images = apply(perturbation, ds.images)
    features = (cache or FeatureCache()).cls_features(model, images)
    return accuracy_on_features(probe, features, ds.labels)


def probability_table(model: ModelHandle, probe: ProbeWeights, ds: Dataset,
                      perturbation: Optional[Perturbation] = None, condition: str = "clean",
                      cache: Optional[FeatureCache] = None) -> pd.DataFrame:
    """Per-image class probabilities: model_id,image_index,label,condition,prediction,p0..p{K-1}."""
    check_owner(model, probe)
    features = (cache or FeatureCache()).cls_features(model, apply(perturbation, ds.images))
    preds, probs = predict_batch(probe, features)
    frame = pd.DataFrame({
        "model_id": model.model_id,
        "image_index": np.arange(len(ds)),
        "label": ds.labels,
        "condition": condition,
        "prediction": preds,
    })
    for k in range(probe.num_classes):
        frame[f"p{k}"] = probs[:, k]
    return frame
