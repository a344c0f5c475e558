#!/usr/bin/env python3
"""
Tests for model training, checkpoints and pool handling
"""

import numpy as np
import pytest

from src.core.exceptions import ConfigError, FormatError, PoolError, ShapeError
from src.core.models import ModelPool, Role
from src.infrastructure.checkpoint_repository import CheckpointRepository
from src.services import vit, zoo_service
from src.services.zoo_service import MemberSpec, ModelZooService


def test_zero_epochs_returns_initialization(tiny_config, tiny_data):
    train, _ = tiny_data
    handle = zoo_service.train_model(train, tiny_config, epochs=0, lr=1e-3, seed=3)
    init = vit.init_params(tiny_config, seed=3)
    assert handle.model_id == "default-s3"
    assert all(np.array_equal(handle.params[k].numpy(), init[k].numpy()) for k in init)


def test_seeds_give_different_models(tiny_model, second_model):
    assert not np.array_equal(tiny_model.params["pos_embed"].numpy(), second_model.params["pos_embed"].numpy())


def test_training_rejects_mismatched_images(tiny_data):
    train, _ = tiny_data
    with pytest.raises(ShapeError):
        zoo_service.train_model(train, zoo_service.variant_config("default", 32, 3), epochs=1, lr=1e-3, seed=0)


def test_checkpoint_bytes_are_stable(tmp_path, tiny_model):
    repo = CheckpointRepository()
    first = repo.save_model(tiny_model, tmp_path / "a.utlb")
    reloaded = repo.load_model(first)
    second = repo.save_model(reloaded, tmp_path / "b.utlb")
    assert first.read_bytes() == second.read_bytes()
    assert reloaded.model_id == tiny_model.model_id
    assert reloaded.config == tiny_model.config


def test_reloaded_model_gives_identical_features(tmp_path, tiny_model, tiny_data):
    repo = CheckpointRepository()
    reloaded = repo.load_model(repo.save_model(tiny_model, tmp_path / "m.utlb"))
    images = tiny_data[1].images[:4]
    before, _ = vit.extract_features(tiny_model, images)
    after, _ = vit.extract_features(reloaded, images)
    np.testing.assert_array_equal(before, after)


def test_truncated_checkpoint_is_rejected(tmp_path, tiny_model):
    path = CheckpointRepository().save_model(tiny_model, tmp_path / "m.utlb")
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(FormatError):
        CheckpointRepository().load_model(path)


def test_probe_file_is_not_a_model(tmp_path, tiny_probe):
    repo = CheckpointRepository()
    path = repo.save_probe(tiny_probe, tmp_path / "p.utlb")
    with pytest.raises(FormatError, match="expected 'model'"):
        repo.load_model(path)


def test_parse_pool_spec():
    specs = zoo_service.parse_pool_spec("default@11, deep@13,wide@14", image_size=32, num_classes=4)
    assert [s.model_id for s in specs] == ["default-s11", "deep-s13", "wide-s14"]
    assert specs[1].config.depth == 6
    assert specs[2].config.embed_dim == 96
    assert all(s.config.image_size == 32 and s.config.num_classes == 4 for s in specs)


@pytest.mark.parametrize("text", ["", "default", "default@x", "huge@1"])
def test_parse_pool_spec_rejects_bad_entries(text):
    with pytest.raises(ConfigError):
        zoo_service.parse_pool_spec(text)


def test_duplicate_members_are_rejected(tiny_model):
    with pytest.raises(PoolError):
        zoo_service.parse_pool_spec("default@1,default@1")
    with pytest.raises(PoolError):
        ModelPool([tiny_model, tiny_model])


def test_designate_prefix(tiny_model, second_model):
    pool, internal = zoo_service.designate_prefix(ModelPool([tiny_model, second_model]), 1)
    assert internal == ["tiny-s0"]
    assert pool.role_of("tiny-s0") is Role.INTERNAL
    assert pool.role_of("tiny-s1") is Role.EXTERNAL
    with pytest.raises(PoolError):
        zoo_service.designate_prefix(pool, 3)


def test_pool_manifest_round_trip(tmp_path, tiny_model, second_model):
    repo = CheckpointRepository()
    pool = ModelPool([tiny_model, second_model], frozenset({"tiny-s1"}))
    paths = zoo_service.pool_paths(tmp_path / "models", pool)
    for member, path in zip(pool.members, paths):
        repo.save_model(member, path)
    manifest = repo.save_pool_manifest(pool, paths, tmp_path / "pool.csv")
    assert manifest.read_text().splitlines() == [
        "id,path,role",
        "tiny-s0,models/tiny-s0.utlb,external",
        "tiny-s1,models/tiny-s1.utlb,internal",
    ]
    loaded, loaded_paths = repo.load_pool_manifest(manifest)
    assert loaded.ids == pool.ids
    assert loaded.internal_ids == pool.internal_ids
    assert [p.name for p in loaded_paths] == ["tiny-s0.utlb", "tiny-s1.utlb"]


def test_pool_manifest_rejects_unknown_role(tmp_path):
    manifest = tmp_path / "pool.csv"
    manifest.write_text("id,path,role\nm,m.utlb,spare\n")
    with pytest.raises(FormatError):
        CheckpointRepository().load_pool_manifest(manifest)


def test_zoo_service_builds_and_saves_pool(tmp_path, tiny_config, tiny_data):
    train, _ = tiny_data
    zoo = ModelZooService(CheckpointRepository(), epochs=1, lr=1e-3, batch_size=18)
    specs = [MemberSpec("default", 5, tiny_config), MemberSpec("default", 6, tiny_config)]
    pool = zoo.build_pool(specs, train, tmp_path)
    assert pool.ids == ["default-s5", "default-s6"]
    assert (tmp_path / "default-s5.utlb").exists()
    assert 0.0 <= zoo_service.head_accuracy(pool.members[0], train) <= 1.0
