#!/usr/bin/env python3
"""
Tests for evaluation: accuracy drops, transfer matrix, heatmaps, PCA, histograms and tables
"""

import numpy as np
import pytest

from src.core.exceptions import ConfigError, PoolError, ShapeError
from src.core.models import EvalReport, Heatmap, ModelPool, Perturbation, PerturbationKind, Role, TransferReport
from src.infrastructure import image_io, tables
from src.services import evaluation_service as ev
from src.services.probe_service import FeatureCache, fit_probe


def _delta(shape, value, epsilon=10.0, source=()):
    return Perturbation(np.full(shape, value, dtype=np.float32), epsilon, PerturbationKind.UTAP, source)


@pytest.fixture(scope="module")
def second_probe(second_model, tiny_data):
    return fit_probe(second_model, tiny_data[0], epochs=50, lr=1e-2, seed=0)


def test_evaluate_without_perturbation(tiny_model, tiny_probe, tiny_data):
    report = ev.evaluate(tiny_model, tiny_probe, tiny_data[1])
    assert report.attacked_acc == report.clean_acc
    assert report.drop == 0.0
    assert report.mean_cls_cosine == pytest.approx(1.0, abs=1e-6)
    assert report.per_class_clean.shape == (3,)


def test_evaluate_with_perturbation(tiny_model, tiny_probe, tiny_data):
    _, test = tiny_data
    report = ev.evaluate(tiny_model, tiny_probe, test, _delta(test.image_shape, 10.0, source=("tiny-s0",)))
    assert report.source_ids == ("tiny-s0",)
    assert 0.0 <= report.attacked_acc <= 1.0
    assert report.mean_cls_cosine < 1.0


def test_per_class_accuracy():
    preds = np.array([0, 0, 1, 2, 2, 2])
    labels = np.array([0, 1, 1, 2, 2, 0])
    np.testing.assert_allclose(ev.per_class_accuracy(preds, labels, 4), [0.5, 0.5, 1.0, 0.0])


def test_transfer_matrix_roles(tiny_model, second_model, tiny_probe, second_probe, tiny_data):
    _, test = tiny_data
    pool = ModelPool([tiny_model, second_model])
    probes = {"tiny-s0": tiny_probe, "tiny-s1": second_probe}
    deltas = {m: _delta(test.image_shape, 5.0 if m == "tiny-s0" else -5.0, source=(m,)) for m in pool.ids}
    report = ev.transfer_matrix(pool, probes, test, deltas, FeatureCache())
    assert report.shape == (2, 2)
    assert report.roles[("tiny-s0", "tiny-s0")] is Role.INTERNAL
    assert report.roles[("tiny-s0", "tiny-s1")] is Role.EXTERNAL
    assert report.entry("tiny-s1", "tiny-s0").model_id == "tiny-s0"

    frame = tables.transfer_table(report)
    assert list(frame.columns) == tables.TRANSFER_COLUMNS
    assert len(frame) == 4


def test_transfer_matrix_needs_every_probe(tiny_model, second_model, tiny_probe, tiny_data):
    pool = ModelPool([tiny_model, second_model])
    deltas = {m: _delta(tiny_data[1].image_shape, 1.0, source=(m,)) for m in pool.ids}
    with pytest.raises(PoolError):
        ev.transfer_matrix(pool, {"tiny-s0": tiny_probe}, tiny_data[1], deltas)


def test_heatmap_grid_and_range(tiny_model, tiny_data):
    heatmap = ev.cls_patch_heatmap(tiny_model, tiny_data[1].images[0])
    assert heatmap.values.shape == (tiny_model.config.grid, tiny_model.config.grid)
    assert np.all(np.abs(heatmap.values) <= 1.0)


def test_pca_separates_clusters():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 0.1, (20, 5)) + np.array([5, 0, 0, 0, 0])
    b = rng.normal(0, 0.1, (20, 5)) - np.array([5, 0, 0, 0, 0])
    result = ev.pca_project(np.concatenate([a, b]), k=2, seed=1)
    assert result.points.shape == (40, 2)
    first_side = np.sign(result.points[:20, 0])
    second_side = np.sign(result.points[20:, 0])
    assert len(set(first_side)) == 1 and len(set(second_side)) == 1
    assert first_side[0] != second_side[0]
    assert result.explained[0] > 0.9
    assert not result.rank_deficient


def test_pca_sign_convention_and_determinism():
    x = np.random.default_rng(3).normal(size=(30, 4)) * np.array([4.0, 2.0, 1.0, 0.5])
    first = ev.pca_project(x, k=2, seed=7)
    second = ev.pca_project(x, k=2, seed=7)
    np.testing.assert_array_equal(first.points, second.points)
    for component in first.components:
        assert component[np.argmax(np.abs(component))] > 0
    assert first.explained[0] >= first.explained[1]


def test_pca_matches_dense_eigendecomposition():
    x = np.random.default_rng(11).normal(size=(60, 10)) * np.array([5.0, 3.0, 1.5, 1, 1, 1, 1, 1, 1, 1])
    result = ev.pca_project(x, k=2, seed=2)
    cov = np.cov(x, rowvar=False)
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1][:2]
    for component, expected in zip(result.components, eigenvectors[:, order].T):
        assert min(np.abs(component - expected).max(), np.abs(component + expected).max()) < 1e-4
    np.testing.assert_allclose(result.explained, eigenvalues[order] / eigenvalues.sum(), atol=1e-4)


def test_pca_ignores_translation():
    x = np.random.default_rng(4).normal(size=(25, 6)) * np.array([3.0, 2.0, 1.0, 1.0, 0.5, 0.5])
    base = ev.pca_project(x, k=2, seed=9)
    shifted = ev.pca_project(x + np.linspace(-50.0, 100.0, 6), k=2, seed=9)
    np.testing.assert_allclose(shifted.points, base.points, atol=1e-6)
    np.testing.assert_allclose(shifted.explained, base.explained, atol=1e-9)


def test_pca_rank_deficient_input():
    t = np.linspace(-1, 1, 10)[:, None]
    result = ev.pca_project(t * np.array([[1.0, 2.0, 0.0]]), k=2)
    assert result.rank_deficient
    assert result.components.shape == (1, 3)
    frame = tables.pca_table(result, np.zeros(10, dtype=int), ["clean"] * 10)
    assert (frame["y"] == 0).all()


def test_pca_needs_enough_rows():
    with pytest.raises(ShapeError):
        ev.pca_project(np.zeros((2, 3)), k=2)


def test_histogram_of_saturated_perturbation():
    counts, edges = ev.perturbation_histogram(_delta((4, 4, 3), 10.0), bins=5)
    assert counts.tolist() == [0, 0, 0, 0, 16]
    assert edges[0] == -10.0 and edges[-1] == 10.0
    assert ev.outer_bin_mass(counts) == 1.0
    centered, _ = ev.perturbation_histogram(_delta((4, 4, 3), 0.0), bins=5)
    assert ev.outer_bin_mass(centered) == 0.0
    with pytest.raises(ConfigError):
        ev.perturbation_histogram(_delta((4, 4, 3), 0.0), bins=1)


def test_render_gray(tmp_path):
    ppm = ev.render_gray(_delta((2, 2, 3), -10.0), tmp_path / "d.ppm")
    assert np.all(image_io.read_ppm(ppm) == 118.0)
    pgm = ev.render_gray(np.array([[-1.0, 0.0], [1.0, 0.5]]), tmp_path / "h.pgm")
    np.testing.assert_array_equal(image_io.read_pgm(pgm), [[0, 128], [255, 191]])


def test_per_class_table_header(tiny_model, tiny_probe, tiny_data):
    report = ev.evaluate(tiny_model, tiny_probe, tiny_data[1])
    frame = tables.per_class_table([report], list(tiny_data[1].class_names))
    assert list(frame.columns) == ["model_id", "class", "clean_acc", "attacked_acc"]
    assert len(frame) == 3


def test_universality_rows(tiny_model, tiny_probe, tiny_data):
    train, test = tiny_data
    utap = _delta(test.image_shape, 3.0, source=("tiny-s0",))
    csap = Perturbation(np.zeros(test.image_shape), 3.0, PerturbationKind.CSAP, ("tiny-s0",), target_label=1)
    psaps = [_delta(test.image_shape, 0.0) for _ in range(2)]
    summary = ev.psap_summary(tiny_model, tiny_probe, train.images, train.labels, psaps, test)
    assert summary.unchanged_fraction == 1.0
    rows = ev.universality_rows(tiny_model, tiny_probe, train, test, utap, csap, summary)
    assert [(r["kind"], r["scope"]) for r in rows] == [
        ("UTAP", "seen"), ("UTAP", "unseen"),
        ("CSAP", "seen_target_class"), ("CSAP", "unseen_target_class"), ("CSAP", "unseen_other_classes"),
        ("PSAP", "own_image"), ("PSAP", "unseen"),
    ]
    assert all(r["drop"] == pytest.approx(r["clean_acc"] - r["attacked_acc"]) for r in rows)


def _report(model_id, clean, attacked):
    return EvalReport(model_id, model_id, clean, attacked, np.zeros(2), np.zeros(2), 1.0)


def test_transfer_margin_over_random_noise():
    ids = ["a", "b"]
    accs = {("a", "a"): 0.2, ("a", "b"): 0.5, ("b", "a"): 0.85, ("b", "b"): 0.1}
    entries = {key: _report(key[1], 0.9, acc) for key, acc in accs.items()}
    roles = {key: Role.INTERNAL if key[0] == key[1] else Role.EXTERNAL for key in accs}
    report = TransferReport(ids, ids, entries, roles)
    random_drops = {"a": 0.02, "b": 0.03}

    failures = ev.transfer_margin_failures(report, random_drops)
    assert [(s, t) for s, t, _, _ in failures] == [("b", "a")]
    assert failures[0][2] == pytest.approx(0.05)

    frame = tables.transfer_table(report, random_drops)
    assert list(frame.columns) == tables.TRANSFER_COLUMNS + ["random_drop"]
    assert frame.loc[frame["target_id"] == "b", "random_drop"].tolist() == [0.03, 0.03]
    with pytest.raises(PoolError):
        ev.transfer_margin_failures(report, {"a": 0.0})


def test_heatmap_change():
    flat = Heatmap(np.zeros((2, 2)))
    assert ev.heatmap_change(flat, Heatmap(np.array([[1.0, -1.0], [0.5, 0.5]]))) == pytest.approx(0.75)
    assert ev.heatmap_change(flat, flat) == 0.0
    with pytest.raises(ShapeError):
        ev.heatmap_change(flat, Heatmap(np.zeros((3, 3))))


def test_histogram_frame_columns():
    counts, edges = ev.perturbation_histogram(_delta((4, 4, 3), 10.0), bins=5)
    frame = tables.histogram_frame(counts, edges)
    assert list(frame.columns) == tables.HISTOGRAM_COLUMNS
    assert frame["count"].tolist() == [0, 0, 0, 0, 16]
    assert frame["bin_high"].iloc[-1] == 10.0
