"""
Checkpoint Repository
File-backed IArtifactRepository over the tensor container
"""

import logging
from pathlib import Path
from typing import List, Tuple

import pandas as pd

from ..core.exceptions import FormatError, PoolError
from ..core.interfaces import IArtifactRepository
from ..core.models import ModelHandle, ModelPool, Perturbation, ProbeWeights, Role, ViTConfig
from ..core.tensor import Tensor
from .tensor_container import RecordReader, RecordWriter, read_container, write_container

logger = logging.getLogger(__name__)

MODEL_TAG = "model"
PROBE_TAG = "probe"
PERTURBATION_TAG = "perturbation"
POOL_COLUMNS = ["id", "path", "role"]


def _relative(target: Path, base: Path) -> str:
    try:
        return target.resolve().relative_to(base.resolve()).as_posix()
    except ValueError:
        return str(target)


def _expect_tag(reader: RecordReader, tag: str, path: Path) -> None:
    found = reader.text("artifact tag")
    if found != tag:
        raise FormatError(f"{path}: holds a '{found}' artifact, expected '{tag}'")


def encode_vit_config(writer: RecordWriter, cfg: ViTConfig) -> None:
    for value in (cfg.image_size, cfg.patch_size, cfg.embed_dim, cfg.num_heads,
                  cfg.depth, cfg.mlp_ratio, cfg.num_classes):
        writer.u32(value)
    for value in (*cfg.channel_mean, *cfg.channel_std):
        writer.f64(value)


def decode_vit_config(reader: RecordReader) -> ViTConfig:
    ints = [reader.u32(name) for name in ("image_size", "patch_size", "embed_dim", "num_heads",
                                           "depth", "mlp_ratio", "num_classes")]
    floats = [reader.f64(f"normalization[{i}]") for i in range(6)]
    return ViTConfig(*ints, channel_mean=tuple(floats[:3]), channel_std=tuple(floats[3:]))


class CheckpointRepository(IArtifactRepository):
    """Models, probes and perturbations as UTLB containers"""

    def save_model(self, handle: ModelHandle, path: Path) -> Path:
        writer = RecordWriter().text(MODEL_TAG).text(handle.model_id).text(handle.variant).i64(handle.seed)
        encode_vit_config(writer, handle.config)
        tensors = {name: p.data for name, p in handle.params.items()}
        logger.debug(f"Saving model {handle.model_id} to {path}")
        return write_container(path, tensors, writer.bytes())

    def load_model(self, path: Path) -> ModelHandle:
        container = read_container(path)
        reader = RecordReader(container.record, str(path))
        _expect_tag(reader, MODEL_TAG, path)
        model_id = reader.text("model id")
        variant = reader.text("variant")
        seed = reader.i64("seed")
        config = decode_vit_config(reader)
        reader.finish()
        params = {name: Tensor(value) for name, value in container.tensors.items()}
        return ModelHandle(model_id=model_id, config=config, params=params, seed=seed, variant=variant)

    def save_probe(self, probe: ProbeWeights, path: Path) -> Path:
        record = RecordWriter().text(PROBE_TAG).text(probe.owner_id).bytes()
        return write_container(path, {"weight": probe.weight, "bias": probe.bias}, record)

    def load_probe(self, path: Path) -> ProbeWeights:
        container = read_container(path)
        reader = RecordReader(container.record, str(path))
        _expect_tag(reader, PROBE_TAG, path)
        owner = reader.text("owner id")
        reader.finish()
        try:
            return ProbeWeights(container.tensors["weight"], container.tensors["bias"], owner)
        except KeyError as e:
            raise FormatError(f"{path}: probe container lacks tensor {e}") from None

    def save_perturbation(self, perturbation: Perturbation, path: Path) -> Path:
        perturbation.check_bound()
        record = (RecordWriter().text(PERTURBATION_TAG).text(perturbation.kind.value)
                  .f64(perturbation.epsilon).texts(perturbation.source_ids).text(perturbation.config_hash)
                  .i64(perturbation.iterations).i64(perturbation.seed).i64(perturbation.target_label).bytes())
        return write_container(path, {"delta": perturbation.delta}, record)

    def load_perturbation(self, path: Path) -> Perturbation:
        container = read_container(path)
        reader = RecordReader(container.record, str(path))
        _expect_tag(reader, PERTURBATION_TAG, path)
        kind = reader.text("kind")
        epsilon = reader.f64("epsilon")
        source_ids = reader.texts("source ids")
        config_hash = reader.text("config hash")
        iterations = reader.i64("iterations")
        seed = reader.i64("seed")
        target_label = reader.i64("target label")
        reader.finish()
        if "delta" not in container.tensors:
            raise FormatError(f"{path}: perturbation container lacks tensor 'delta'")
        return Perturbation(container.tensors["delta"], epsilon, kind, tuple(source_ids),
                            config_hash, iterations, seed, target_label)

    def save_pool_manifest(self, pool: ModelPool, paths: List[Path], path: Path) -> Path:
        path = Path(path)
        if len(paths) != len(pool):
            raise PoolError(f"{len(paths)} checkpoint paths for {len(pool)} pool members")
        rows = [{"id": m.model_id, "path": _relative(Path(p), path.parent), "role": pool.role_of(m.model_id).value}
                for m, p in zip(pool.members, paths)]
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(rows, columns=POOL_COLUMNS).to_csv(path, index=False, lineterminator="\n")
        return path

    def load_pool_manifest(self, path: Path) -> Tuple[ModelPool, List[Path]]:
        path = Path(path)
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        if list(frame.columns) != POOL_COLUMNS:
            raise FormatError(f"{path}: header {list(frame.columns)}, expected {POOL_COLUMNS}")
        members, paths, internal = [], [], []
        for row in frame.itertuples(index=False):
            if row.role not in ("internal", "external"):
                raise FormatError(f"{path}: role '{row.role}' for '{row.id}' must be internal or external")
            role = Role(row.role)
            member_path = Path(row.path) if Path(row.path).is_absolute() else path.parent / row.path
            handle = self.load_model(member_path)
            if handle.model_id != row.id:
                raise PoolError(f"{member_path} holds model '{handle.model_id}', manifest says '{row.id}'")
            members.append(handle)
            paths.append(member_path)
            if role is Role.INTERNAL:
                internal.append(row.id)
        return ModelPool(members, frozenset(internal)), paths
