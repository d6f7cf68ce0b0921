"""
test_experiment.py
"""

import os

import pytest
import numpy as np
import pandas as pd
import torch

import cityssl.modules.common_base as base
import cityssl.modules.filetree as filetree
import cityssl.modules.tile_ingest as tile_ingest
import cityssl.modules.tensor_nn as tensor_nn
import cityssl.modules.contrastive as contrastive
import cityssl.modules.probe as probe
import cityssl.modules.common_report as common_report
import cityssl.experiment as experiment
from cityssl.tests.conftest import make_tiny_config

def test_select_pretrain_cities():
    names = ["city_{:03d}".format(i) for i in range(20)]
    chosen = experiment.select_pretrain_cities(names, 10, 0)
    assert len(chosen) == 10
    assert chosen == [name for name in names if name in chosen]
    assert chosen == experiment.select_pretrain_cities(names, 10, 0)
    assert chosen != experiment.select_pretrain_cities(names, 10, 1)
    assert experiment.select_pretrain_cities(names, 20, 0) == names
    with pytest.raises(base.Config_error):
        experiment.select_pretrain_cities(names, 0, 0)
    with pytest.raises(base.Config_error):
        experiment.select_pretrain_cities(names, 21, 0)
    return

def test_prepare_data(tiny_config, tiny_manifest):
    data = experiment.prepare_data(tiny_config)
    assert data.manifest.city_names() == tiny_manifest.city_names()
    assert data.test_cities == tiny_manifest.city_names()
    assert len(data.pretrain_cities) == 2
    assert set(data.pretrain_cities) <= set(data.test_cities)

    indices, labels = data.split("satellite", "train", data.pretrain_cities)
    assert len(indices) == 16
    assert sorted(set(labels.tolist())) == [0, 1]
    records = data.records("satellite")
    for index, label in zip(indices, labels):
        assert records[index].split == "train"
        assert records[index].city_name == data.pretrain_cities[label]

    images = data.load_images("satellite", indices[:3])
    assert all(image.shape == (48, 48, 3) for image in images)
    assert all(image.dtype == np.uint8 for image in images)
    assert len(data.images) == 3
    again = data.load_images("satellite", indices[:3])
    assert all(first is second for first, second in zip(images, again))

    tiny_config.num_cities = 5
    tiny_config.pretrain_cities = 2
    with pytest.raises(base.Config_error):
        experiment.prepare_data(tiny_config, tiny_manifest)
    return

def test_prepare_manifest_from_files(tiny_config, cities_filename,
                                     water_mask_filename):
    tiny_config.cities_file = cities_filename
    tiny_config.water_mask_file = water_mask_filename
    tiny_config.excluded_countries = "Caldera"
    with pytest.warns(UserWarning):
        manifest = experiment.prepare_manifest(tiny_config)
    assert "Dunmore" not in manifest.city_names()
    assert "Lakeview" in manifest.city_names()
    manifest.validate()
    return

def test_probe_mode(tiny_config):
    assert experiment.probe_mode(experiment.random_representation(
        tiny_config)) == "final_embedding"
    tiny_config.architecture = "tiny_transformer"
    assert experiment.probe_mode(experiment.random_representation(
        tiny_config)) == "concat_last_4_blocks"
    return

def test_random_representation(tiny_config):
    first = experiment.random_representation(tiny_config)
    second = experiment.random_representation(tiny_config)
    assert tensor_nn.encoder_checksum(first) \
        == tensor_nn.encoder_checksum(second)
    return

def test_pretrain_representation_errors(tiny_config):
    data = experiment.prepare_data(tiny_config)
    with pytest.raises(base.Config_error):
        experiment.pretrain_representation(tiny_config, data, "supervised",
                                           "satellite")
    return

def test_run_generalizability(tiny_config):
    tiny_config.random_baseline = True
    tiny_config.determinism = False
    rows = experiment.run_generalizability(tiny_config)
    assert [(row["workflow"], row["test_cities"]) for row in rows] == [
        ("v1", 2), ("v1", 4), ("v2", 2), ("v2", 4),
        ("random_init", 2), ("random_init", 4)]
    for row in rows:
        assert list(row.keys()) == common_report.REPORT_COLUMNS
        assert row["pretrain_cities"] == 2
        assert 0.0 <= row["top1"] <= 1.0
    assert rows[1]["unseen_cities"] == 2
    assert rows[0]["unseen_cities"] == 0
    assert rows[1]["steps"] == 3
    assert rows[-1]["steps"] == 0
    assert rows[-1]["representation"] == "random_init"

    results_dir = tiny_config.results_dir
    run_paths = filetree.Run_paths(results_dir, "generalizability", "v2",
                                   "satellite")
    for filename in [run_paths.checkpoint, run_paths.loss_csv,
                     run_paths.loss_png, run_paths.probe,
                     run_paths.probe_pretrain_cities, run_paths.per_class,
                     run_paths.report]:
        assert os.path.exists(filename)
    assert len(pd.read_csv(run_paths.loss_csv)) == 3
    manifest = tile_ingest.load_manifest(filetree.manifest_filename(
        results_dir, "generalizability"))
    manifest.validate()
    result = probe.load_probe_result(run_paths.probe)
    assert result.class_names == manifest.city_names()
    directory = filetree.experiment_directory(results_dir,
                                              "generalizability")
    saved = common_report.read_report_csv(os.path.join(directory,
                                                       "report.csv"))
    assert [row["workflow"] for row in saved] \
        == [row["workflow"] for row in rows]
    for saved_row, row in zip(saved, rows):
        assert saved_row["top1"] == pytest.approx(row["top1"], abs=1e-6)
    assert os.path.exists(os.path.join(directory, "report.md"))
    assert not os.path.exists(os.path.join(directory, "domain_gap.csv"))
    settings = base.load_settings(filetree.snapshot_filename(
        results_dir, "generalizability"))
    assert settings.pretrain_steps == 3
    assert settings.random_baseline == True
    return

def test_run_generalizability_holdout(tiny_config):
    tiny_config.pretrain_cities = 4
    with pytest.raises(base.Config_error):
        experiment.run_generalizability(tiny_config)
    tiny_config.holdout = False
    tiny_config.determinism = False
    tiny_config.workflows = "v1"
    rows = experiment.run_generalizability(tiny_config)
    assert len(rows) == 1
    assert rows[0]["unseen_cities"] == 0
    return

def test_run_generalizability_reproducible(tmp_path):
    rows = []
    for name in ["first", "second"]:
        config = make_tiny_config(tmp_path / name)
        config.workflows = "v2"
        rows.append(experiment.run_generalizability(config))
    torch.use_deterministic_algorithms(False)
    assert [row["top1"] for row in rows[0]] \
        == [row["top1"] for row in rows[1]]
    reports = []
    for name in ["first", "second"]:
        report_filename = os.path.join(str(tmp_path), name,
                                       "generalizability", "report.csv")
        with open(report_filename, "rb") as report_file:
            reports.append(report_file.read())
    assert reports[0] == reports[1]
    first = tensor_nn.load_checkpoint(os.path.join(
        str(tmp_path), "first", "generalizability", "v2", "satellite",
        "checkpoint.bin"))[0]
    second = tensor_nn.load_checkpoint(os.path.join(
        str(tmp_path), "second", "generalizability", "v2", "satellite",
        "checkpoint.bin"))[0]
    assert first["encoder_checksum"] == second["encoder_checksum"]
    return

def test_holdout_tiles_never_pretrained(tiny_config, monkeypatch):
    pools = []
    drawn_cities = []
    original_pool = contrastive.Training_pool

    class Recording_pool(original_pool):
        def check(self, indices):
            drawn_cities.extend(self.records[i].city_name for i in indices)
            return super(Recording_pool, self).check(indices)

    def make_pool(*args):
        pool = Recording_pool(*args)
        pools.append(pool)
        return pool

    monkeypatch.setattr(contrastive, "Training_pool", make_pool)
    tiny_config.workflows = "v2"
    tiny_config.determinism = False
    data = experiment.prepare_data(tiny_config)
    experiment.run_generalizability(tiny_config, data=data)
    holdout = set(data.test_cities) - set(data.pretrain_cities)
    assert len(holdout) == 2
    assert len(pools) == 1
    assert all(record.split == "train" and record.city_name \
               in data.pretrain_cities for record in pools[0].records)
    # two queue warmup draws plus three steps, four tiles each
    assert pools[0].checked == 20
    assert len(drawn_cities) == 20
    assert sum(1 for name in drawn_cities if name in holdout) == 0
    return

def test_run_abstraction(tiny_config):
    tiny_config.experiment = "abstraction"
    with pytest.raises(base.Config_error):
        experiment.run_abstraction(tiny_config)
    tiny_config.domain = "map"
    tiny_config.workflows = "v1"
    tiny_config.determinism = False
    rows = experiment.run_abstraction(tiny_config)
    assert len(rows) == 1
    assert rows[0]["domain"] == "map"
    assert rows[0]["test_cities"] == 4
    assert rows[0]["unseen_cities"] == 2
    run_paths = filetree.Run_paths(tiny_config.results_dir, "abstraction",
                                   "v1", "map")
    assert os.path.exists(run_paths.probe)
    assert not os.path.exists(run_paths.probe_pretrain_cities)
    return

def test_run_domain_gap(tiny_config):
    tiny_config.experiment = "domain_gap"
    tiny_config.workflows = "supervised"
    with pytest.raises(base.Config_error):
        experiment.run_domain_gap(tiny_config)
    tiny_config.workflows = "v1,supervised"
    tiny_config.determinism = False
    rows, gap_rows = experiment.run_domain_gap(tiny_config)
    assert [(row["workflow"], row["domain"]) for row in rows] == [
        ("v1", "satellite"), ("supervised", "satellite"), ("v1", "map"),
        ("supervised", "map")]
    assert rows[1]["representation"] == "supervised"
    assert rows[1]["pretrain_cities"] == 4
    # 32 training tiles in batches of 4 for 2 epochs
    assert rows[1]["steps"] == 16
    assert [row["method"] for row in gap_rows] == ["supervised",
                                                   "self-supervised"]
    for row in gap_rows:
        assert row["difference"] == pytest.approx(row["satellite"] \
                                                  - row["map"])
    assert gap_rows[1]["satellite"] == rows[0]["top1"]
    assert gap_rows[0]["map"] == rows[3]["top1"]

    directory = filetree.experiment_directory(tiny_config.results_dir,
                                              "domain_gap")
    frame = pd.read_csv(os.path.join(directory, "domain_gap.csv"))
    assert list(frame.columns) == common_report.GAP_COLUMNS
    with open(os.path.join(directory, "report.md"), "r") as md_file:
        assert "Domain gap" in md_file.read()
    supervised_paths = filetree.Run_paths(tiny_config.results_dir,
                                          "domain_gap", "supervised", "map")
    header, tensors = tensor_nn.load_checkpoint(supervised_paths.checkpoint)
    assert header["workflow"] == "supervised"
    assert header["step"] == 16
    assert any(name.startswith("classifier.") for name in tensors)
    return

def test_run_experiment_dispatch(tiny_config):
    tiny_config.experiment = "abstraction"
    tiny_config.domain = "map"
    tiny_config.workflows = "v1"
    tiny_config.determinism = False
    rows = experiment.run_experiment(tiny_config)
    assert rows[0]["experiment"] == "abstraction"
    return

def test_train_supervised(tiny_config):
    data = experiment.prepare_data(tiny_config)
    encoder, result = experiment.train_supervised(tiny_config, data,
                                                  "satellite")
    assert sum(result.class_counts) == 8
    assert result.class_names == data.test_cities
    assert result.train_config["shuffle_labels"] == False
    assert experiment.supervised_steps(tiny_config, data, "satellite") == 16
    return

@pytest.mark.slow
def test_supervised_shuffled_labels_at_chance(tiny_config):
    tiny_config.samples_per_city = 50
    tiny_config.supervised_epochs = 5
    data = experiment.prepare_data(tiny_config)
    encoder, result = experiment.train_supervised(
        tiny_config, data, "satellite", shuffle_labels=True)
    assert result.train_config["shuffle_labels"] == True
    low, high = probe.chance_band(4, sum(result.class_counts))
    assert low <= result.top1_accuracy <= high
    return

def test_stages(tiny_config):
    tiny_config.determinism = False
    manifest, manifest_filename = experiment.stage_manifest(tiny_config)
    assert manifest_filename == filetree.manifest_filename(
        tiny_config.results_dir, "generalizability")
    assert tile_ingest.load_manifest(manifest_filename).city_names() \
        == manifest.city_names()

    with pytest.raises(base.Incomplete_results_error):
        experiment.stage_probe(tiny_config, "v2",
                               manifest_filename=manifest_filename)

    run_paths = experiment.stage_pretrain(
        tiny_config, "v2", manifest_filename=manifest_filename)
    assert os.path.exists(run_paths.checkpoint)
    assert os.path.exists(filetree.snapshot_filename(
        tiny_config.results_dir, "generalizability"))

    rows = experiment.stage_probe(tiny_config, "v2",
                                  manifest_filename=manifest_filename)
    assert [row["test_cities"] for row in rows] == [2, 4]
    assert all(row["steps"] == 3 for row in rows)
    random_rows = experiment.stage_probe(tiny_config, "random_init")
    assert all(row["representation"] == "random_init" \
               for row in random_rows)

    report_rows = experiment.stage_report(tiny_config.results_dir)
    assert [row["workflow"] for row in report_rows] == [
        "random_init", "random_init", "v2", "v2"]
    assert os.path.exists(os.path.join(tiny_config.results_dir,
                                       "report.csv"))
    assert os.path.exists(os.path.join(tiny_config.results_dir,
                                       "report.md"))
    return

def test_stage_report_empty(tmp_path):
    with pytest.raises(base.Incomplete_results_error):
        experiment.stage_report(str(tmp_path / "results"))
    return

@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_desk_scale_generalizability(tmp_path, seed):
    config = make_tiny_config(tmp_path / "results")
    config.num_cities = 20
    config.pretrain_cities = 10
    config.samples_per_city = 200
    config.size_px = 256
    config.working_size = 96
    config.input_size = 64
    config.embedding_dim = 128
    config.batch_size = 32
    config.queue_size = 1024
    config.pretrain_steps = 2000
    config.probe_epochs = 100
    config.probe_batch_size = 256
    config.workflows = "v2"
    config.random_baseline = True
    config.determinism = False
    config.seed = seed
    rows = experiment.run_generalizability(config)
    by_workflow = {row["workflow"]: row["top1"] for row in rows \
                   if row["test_cities"] == 20}
    assert by_workflow["v2"] >= 0.25
    assert by_workflow["v2"] - by_workflow["random_init"] >= 0.10
    return
