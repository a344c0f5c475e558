#!/usr/bin/env python3
"""
Desk-scale acceptance runs on the default configuration

Every test reads the artifacts of one `all` run. They are marked slow and
only run with UTAP_RUN_SLOW=1.
"""

import numpy as np
import pandas as pd
import pytest

import app

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    assert app.run(["all", "--output-dir", str(root)]) == 0
    return root


def _table(root, relative):
    return pd.read_csv(root / relative)


def test_clean_baseline(desk_run):
    probes = _table(desk_run, "fit-probes/probe_accuracy.csv")
    assert len(probes) == 4
    assert probes["admitted"].all()
    assert (probes["clean_acc"] >= 0.90).all()


def test_crafting_never_leaves_the_bound(desk_run):
    summary = _table(desk_run, "craft-utap/utap_summary.csv")
    assert (summary["iterations"] == 1200).all()
    assert (summary["bound_violations"] == 0).all()
    assert (summary["max_abs_delta"] <= 20.0).all()


def test_internal_attack_collapses_features(desk_run):
    frame = _table(desk_run, "eval/eval.csv")
    internal = frame[frame["role"] == "internal"]
    assert len(internal) == 1
    assert internal["drop"].iloc[0] >= 0.30
    assert internal["mean_cls_cosine"].iloc[0] < 0.5


def test_uniform_noise_is_harmless(desk_run):
    noise = _table(desk_run, "baseline-noise/baseline_noise.csv")
    assert (noise["drop"] <= 0.05).all()
    assert (noise["mean_cls_cosine"] >= 0.9).all()


def test_external_drops_beat_noise(desk_run):
    frame = _table(desk_run, "transfer-matrix/transfer.csv")
    external = frame[frame["role"] == "external"]
    assert len(external) == 12
    margin = external["drop"] - external["random_drop"]
    assert (margin >= 0.10 - 1e-4).all(), external[margin < 0.10][["source_id", "target_id", "drop", "random_drop"]]


def test_universality_ordering(desk_run):
    frame = _table(desk_run, "universality/universality.csv").set_index(["kind", "scope"])
    utap = frame.loc[("UTAP", "unseen"), "drop"]
    csap = frame.loc[("CSAP", "unseen_target_class"), "drop"]
    psap = frame.loc[("PSAP", "unseen"), "drop"]
    assert utap > csap > psap
    assert psap <= 0.05
    assert frame.loc[("PSAP", "own_image"), "attacked_acc"] <= 0.01


def test_attacked_accuracy_falls_with_epsilon(desk_run):
    frame = _table(desk_run, "sweep-epsilon/sweep_epsilon.csv")
    internal = frame[frame["role"] == "internal"].sort_values("epsilon")
    assert internal["epsilon"].tolist() == [5.0, 10.0, 20.0, 40.0]
    rises = np.diff(internal["attacked_acc"].to_numpy())
    inversions = rises[rises > 0]
    assert len(inversions) <= 1
    assert np.all(inversions <= 0.02)


def test_large_theta_pushes_mass_to_the_bound(desk_run):
    masses = _table(desk_run, "sweep-theta/theta_histograms.csv").sort_values("theta")
    assert masses["outer_bin_mass"].iloc[-1] > masses["outer_bin_mass"].iloc[0]


def test_utap_disturbs_heatmaps_more_than_noise(desk_run):
    summary = _table(desk_run, "heatmaps/heatmap_summary.csv").set_index("condition")["mean_abs_change"]
    assert summary["attacked"] > summary["random"]
