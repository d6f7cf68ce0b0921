"""
conftest.py

configurations for cityssl tests
"""

import os
import copy

import pytest
import numpy as np
import torch

import cityssl.modules.common_base as base
import cityssl.modules.geo_sampler as geo_sampler
import cityssl.modules.tile_ingest as tile_ingest
import cityssl.modules.tensor_nn as tensor_nn
import cityssl.modules.contrastive as contrastive

TEST_DIRECTORY = os.path.dirname(__file__)
TEST_DATA_DIRECTORY = os.path.join(TEST_DIRECTORY, "data")

def make_tiny_config(results_dir="results"):
    """
    An Experiment_config small enough to run whole experiments in a few
    seconds.
    """
    config = base.Experiment_config()
    config.num_cities = 4
    config.pretrain_cities = 2
    config.samples_per_city = 10
    config.size_px = 64
    config.working_size = 48
    config.input_size = 32
    config.embedding_dim = 16
    config.batch_size = 4
    config.queue_size = 8
    config.pretrain_steps = 3
    config.probe_epochs = 3
    config.probe_batch_size = 16
    config.supervised_epochs = 2
    config.pseudo_classes = 16
    config.local_crops = 2
    config.log_interval = 0
    config.results_dir = str(results_dir)
    config.validate()
    return config

def make_tiny_encoder_config(architecture="small_conv"):
    encoder_config = tensor_nn.Encoder_config()
    encoder_config.input_size = 32
    encoder_config.embedding_dim = 16
    encoder_config.conv_filters = "8,16"
    encoder_config.conv_kernels = "3,3"
    encoder_config.conv_strides = "2,2"
    encoder_config.architecture = architecture
    encoder_config.width = 32
    encoder_config.heads = 2
    return encoder_config

def make_training_pool(tiny_tiles, num_cities=2, split="train"):
    """
    A Training_pool of the given split of the first num_cities cities
    (by name) of the tiny tiles.
    """
    images, records = tiny_tiles
    allowed = sorted(set(record.city_name for record in records))[:num_cities]
    keep = [i for i, record in enumerate(records) \
            if record.city_name in allowed and record.split == split]
    return contrastive.Training_pool(np.stack([images[i] for i in keep]),
                                     [records[i] for i in keep], allowed)

@pytest.fixture(scope="session")
def tiny_config_persistent():
    """
    Create a tiny experiment config that is persistent across the tests.
    """
    return make_tiny_config()

@pytest.fixture()
def tiny_config(tiny_config_persistent, tmp_path):
    """
    Create a copy of the tiny config whose results go to a fresh
    temporary directory.
    """
    tiny_config_obj = copy.deepcopy(tiny_config_persistent)
    tiny_config_obj.results_dir = str(tmp_path / "results")
    return tiny_config_obj

@pytest.fixture(scope="session")
def tiny_manifest_persistent():
    """
    Create a four-city synthetic manifest that is persistent across the
    tests.
    """
    cities = geo_sampler.synthetic_cities(4, 0)
    return tile_ingest.build_manifest(cities, 10, 0.8, 0, size_px=64)

@pytest.fixture()
def tiny_manifest(tiny_manifest_persistent):
    """
    Create a copy of the manifest that is not persistent. But this at
    least doesn't require us to sample an entirely new manifest.
    """
    return copy.deepcopy(tiny_manifest_persistent)

@pytest.fixture(scope="session")
def tiny_tiles_persistent(tiny_manifest_persistent):
    """
    Render every satellite tile of the tiny manifest once, as
    (images, records).
    """
    records = tiny_manifest_persistent.domain_records("satellite")
    images = tile_ingest.load_batch(tiny_manifest_persistent,
                                    list(range(len(records))), "satellite")
    images = [tile_ingest.downsample(image, 48) for image in images]
    return images, records

@pytest.fixture(scope="session")
def eight_city_tiles_persistent():
    """
    Render the satellite tiles of an eight-city synthetic manifest once,
    as (images, records).
    """
    cities = geo_sampler.synthetic_cities(8, 0)
    manifest = tile_ingest.build_manifest(cities, 10, 0.8, 0, size_px=64)
    records = manifest.domain_records("satellite")
    images = tile_ingest.load_batch(manifest, list(range(len(records))),
                                    "satellite")
    images = [tile_ingest.downsample(image, 48) for image in images]
    return images, records

@pytest.fixture()
def tiny_encoder_config():
    return make_tiny_encoder_config()

@pytest.fixture()
def cities_filename():
    return os.path.join(TEST_DATA_DIRECTORY, "cities.csv")

@pytest.fixture()
def water_mask_filename():
    return os.path.join(TEST_DATA_DIRECTORY, "water_mask.txt")

@pytest.fixture()
def experiment_config_filename():
    return os.path.join(TEST_DATA_DIRECTORY, "experiment.cfg")

@pytest.fixture()
def rng():
    return np.random.Generator(np.random.Philox(key=1234))

@pytest.fixture(autouse=True)
def seed_torch():
    torch.manual_seed(0)
    return
