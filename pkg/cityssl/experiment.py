"""
experiment.py

Run the cityssl experiments: build the dataset, pretrain representations
with the configured workflows, probe them, train the supervised baseline,
and write the generalizability, abstraction and domain-gap reports.
"""

import os
import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

import cityssl.modules.common_base as base
import cityssl.modules.filetree as filetree
import cityssl.modules.geo_sampler as geo_sampler
import cityssl.modules.tile_ingest as tile_ingest
import cityssl.modules.tensor_nn as tensor_nn
import cityssl.modules.contrastive as contrastive
import cityssl.modules.dino as dino
import cityssl.modules.probe as probe
import cityssl.modules.common_report as common_report

logger = logging.getLogger(__name__)

SELF_SUPERVISED = ("v1", "v2", "dino")
RANDOM_INIT = "random_init"

class Experiment_data():
    """
    The manifest of an experiment, its city selections, and the tiles
    loaded so far (downsampled once to the working size and kept in
    memory).

    Attributes:
    -----------
    config : Experiment_config

    manifest : Dataset_manifest

    test_cities : list
        Names of the cities every probe classifies, in manifest order.

    pretrain_cities : list
        The subset of test_cities representations are pretrained on.
    """

    def __init__(self, config, manifest, source):
        self.config = config
        self.manifest = manifest
        self.source = source
        city_names = manifest.city_names()
        if len(city_names) < config.num_cities:
            raise base.Config_error("Only {} cities are available but "\
                "num_cities is {}.".format(len(city_names), config.num_cities))
        self.test_cities = city_names[:config.num_cities]
        self.pretrain_cities = select_pretrain_cities(
            self.test_cities, config.pretrain_cities,
            config.pretrain_city_seed)
        self.images = {}
        return

    def records(self, domain):
        return self.manifest.domain_records(domain)

    def load_images(self, domain, indices):
        """
        Return working-size uint8 images for record indices of a domain.
        """
        missing = [i for i in indices if (domain, i) not in self.images]
        if len(missing) > 0:
            tiles = tile_ingest.load_batch(self.manifest, missing, domain,
                                           self.source)
            for index, tile in zip(missing, tiles):
                self.images[(domain, index)] = tile_ingest.downsample(
                    tile, self.config.working_size)
        return [self.images[(domain, i)] for i in indices]

    def split(self, domain, split, city_names):
        """
        Return (indices, labels) of one split restricted to city_names;
        labels index into city_names.
        """
        indices = self.manifest.select(domain, split, city_names)
        class_index = {name: i for i, name in enumerate(city_names)}
        records = self.records(domain)
        labels = np.array([class_index[records[i].city_name] \
                           for i in indices], dtype=np.int64)
        return indices, labels

def select_pretrain_cities(city_names, count, seed):
    """
    Choose `count` of the cities with a seeded shuffle, keeping their
    original order.
    """
    if not 1 <= count <= len(city_names):
        raise base.Config_error("Cannot pretrain on {} of {} cities.".format(
            count, len(city_names)))
    rng = np.random.Generator(np.random.Philox(
        key=base.derive_seed(seed, "pretrain_cities")))
    chosen = set(int(i) for i in rng.permutation(len(city_names))[:count])
    return [name for i, name in enumerate(city_names) if i in chosen]

def prepare_manifest(config):
    """
    Build the manifest an Experiment_config describes: cities from
    cities_file (or synthetic cities), sampled and split.
    """
    if config.cities_file != "":
        cities = geo_sampler.read_cities_csv(config.cities_file)
    else:
        cities = geo_sampler.synthetic_cities(config.num_cities, config.seed)
    mask = None
    if config.water_mask_file != "":
        mask = geo_sampler.read_water_mask(config.water_mask_file)
    return tile_ingest.build_manifest(
        cities, config.samples_per_city, config.split_ratio, config.seed,
        mask=mask, k=config.radius_k, zoom=config.zoom,
        size_px=config.size_px,
        excluded_countries=base.split_list(config.excluded_countries),
        excluded_cities=base.split_list(config.excluded_cities))

def prepare_data(config, manifest=None, session=None):
    if manifest is None:
        manifest = prepare_manifest(config)
    source = tile_ingest.make_tile_source(config, manifest, session)
    return Experiment_data(config, manifest, source)

def probe_mode(encoder):
    if isinstance(encoder, tensor_nn.Tiny_transformer) \
            and encoder.config.depth >= probe.NUM_CONCAT_BLOCKS:
        return "concat_last_4_blocks"
    return "final_embedding"

def pretrain_representation(config, data, workflow, domain, run_paths=None,
                            recipe_overrides=None):
    """
    Pretrain one self-supervised workflow on the training tiles of the
    pretrain cities.

    Returns:
    --------
    encoder : torch.nn.Module
    log : Loss_log
    """
    if workflow not in SELF_SUPERVISED:
        raise base.Config_error("{} is not a self-supervised workflow."\
                                .format(workflow))
    indices, labels = data.split(domain, "train", data.pretrain_cities)
    records = data.records(domain)
    pool = contrastive.Training_pool(
        data.load_images(domain, indices), [records[i] for i in indices],
        data.pretrain_cities)
    encoder_config = tensor_nn.encoder_config_from_experiment(config)
    loss_filename = None
    checkpoint_filename = None
    if run_paths is not None:
        loss_filename = run_paths.loss_csv
        checkpoint_filename = run_paths.checkpoint
    seed = base.derive_seed(config.seed, workflow, domain)
    if workflow == "dino":
        state, log = dino.distill(
            dino.dino_config(config), encoder_config, pool, seed,
            recipe_overrides, config.log_interval, config.num_workers,
            loss_filename, checkpoint_filename)
    else:
        state, log = contrastive.pretrain(
            contrastive.contrastive_config(workflow, config), encoder_config,
            pool, seed, recipe_overrides, config.log_interval,
            config.num_workers, loss_filename, checkpoint_filename)
    if run_paths is not None:
        common_report.save_loss_plot(
            log.rows, "{} pretraining ({})".format(workflow, domain),
            run_paths.loss_png)
    return state.encoder(), log

def random_representation(config):
    encoder_config = tensor_nn.encoder_config_from_experiment(config)
    return tensor_nn.build_encoder(
        encoder_config, base.derive_seed(config.seed, RANDOM_INIT))

def probe_representation(config, data, encoder, domain, city_names):
    """
    Freeze an encoder, train a linear probe on the training split of
    city_names and evaluate it on their test split.
    """
    rep = probe.Frozen_representation(encoder, probe_mode(encoder))
    train_indices, train_labels = data.split(domain, "train", city_names)
    test_indices, test_labels = data.split(domain, "test", city_names)
    result = probe.run_probe(
        rep, data.load_images(domain, train_indices), train_labels,
        data.load_images(domain, test_indices), test_labels,
        list(city_names), probe.probe_schedule(config))
    rep.verify()
    return result

def evaluate_workflow(config, data, encoder, experiment, workflow, domain,
                      run_paths, steps, representation="pretrained",
                      probe_subset=True):
    """
    Probe a representation on the pretrain cities (when they are fewer
    than the test cities) and on all test cities, save the probe results,
    and return the report rows.
    """
    rows = []
    num_pretrain = len(data.pretrain_cities)
    num_test = len(data.test_cities)
    if probe_subset and num_pretrain < num_test:
        subset_result = probe_representation(config, data, encoder, domain,
                                             data.pretrain_cities)
        subset_result.save_json(run_paths.probe_pretrain_cities)
        rows.append(common_report.make_report_row(
            experiment, domain, workflow, num_pretrain, steps, num_pretrain,
            subset_result.top1_accuracy, representation))
    result = probe_representation(config, data, encoder, domain,
                                  data.test_cities)
    result.save_json(run_paths.probe)
    result.save_per_class_csv(run_paths.per_class)
    rows.append(common_report.make_report_row(
        experiment, domain, workflow, num_pretrain, steps, num_test,
        result.top1_accuracy, representation))
    common_report.write_report_csv(rows, run_paths.report)
    return rows

def preprocess_batch(images, input_size, flips=None):
    if flips is None:
        flips = [False] * len(images)
    return torch.stack([probe.preprocess(image, input_size, flip) \
                        for image, flip in zip(images, flips)])

def train_supervised(config, data, domain, shuffle_labels=False,
                     run_paths=None):
    """
    Train the same encoder family end-to-end with a linear classifier and
    categorical cross-entropy on the training split of all test cities,
    then evaluate on their test split.

    Parameters:
    -----------
    shuffle_labels : bool, default False
        Permute the training labels, which must give chance accuracy.

    Returns:
    --------
    encoder : torch.nn.Module
    result : Probe_result
    """
    class_names = list(data.test_cities)
    train_indices, train_labels = data.split(domain, "train", class_names)
    test_indices, test_labels = data.split(domain, "test", class_names)
    seed = base.derive_seed(config.seed, "supervised", domain)
    rng = np.random.Generator(np.random.Philox(key=seed))
    if shuffle_labels:
        train_labels = rng.permutation(train_labels)
    encoder_config = tensor_nn.encoder_config_from_experiment(config)
    encoder = tensor_nn.build_encoder(encoder_config, seed)
    classifier = tensor_nn.init_weights(
        nn.Linear(encoder_config.embedding_dim, len(class_names)),
        base.derive_seed(seed, "classifier"))
    model = nn.Sequential(encoder, classifier)
    sgd_config = tensor_nn.SGD_config()
    sgd_config.base_lr = config.supervised_lr
    sgd_config.batch_size = config.batch_size
    optimizer = tensor_nn.make_sgd(model.parameters(), sgd_config)
    train_images = data.load_images(domain, train_indices)
    targets = torch.from_numpy(np.asarray(train_labels, dtype=np.int64))
    batches_per_epoch = -(-len(train_images) // config.batch_size)
    total_steps = config.supervised_epochs * batches_per_epoch
    log = contrastive.Loss_log()
    step = 0
    for epoch in range(config.supervised_epochs):
        order = rng.permutation(len(train_images))
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start+config.batch_size]
            flips = rng.uniform(size=len(batch)) < 0.5
            inputs = preprocess_batch([train_images[i] for i in batch],
                                      encoder_config.input_size, flips)
            logits = classifier(tensor_nn.forward(encoder, inputs))
            loss = F.cross_entropy(logits, targets[torch.from_numpy(batch)])
            tensor_nn.backward(loss)
            tensor_nn.clip_gradients(model.parameters(), sgd_config.clip_norm)
            lr = tensor_nn.cosine_lr(step, total_steps, config.supervised_lr)
            tensor_nn.sgd_step(optimizer, lr)
            step += 1
            log.append(step, float(loss.detach()), lr)
        logger.info("supervised %s epoch %d/%d loss %.4f", domain, epoch+1,
                    config.supervised_epochs, log.rows[-1]["loss"])

    predictions = []
    test_images = data.load_images(domain, test_indices)
    with torch.no_grad():
        for start in range(0, len(test_images), probe.EXTRACT_BATCH_SIZE):
            inputs = preprocess_batch(
                test_images[start:start+probe.EXTRACT_BATCH_SIZE],
                encoder_config.input_size)
            logits = classifier(tensor_nn.forward(encoder, inputs))
            predictions.append(np.argmax(logits.numpy(), axis=1))
    predictions = np.concatenate(predictions) if len(predictions) > 0 \
        else np.zeros(0, dtype=np.int64)
    train_config = {"epochs": config.supervised_epochs,
                    "base_lr": config.supervised_lr,
                    "batch_size": config.batch_size,
                    "shuffle_labels": shuffle_labels}
    result = probe.result_from_predictions(predictions, test_labels,
                                           class_names, train_config)
    if run_paths is not None:
        log.save(run_paths.loss_csv)
        common_report.save_loss_plot(log.rows, "supervised ({})".format(
            domain), run_paths.loss_png)
        header = {"workflow": "supervised", "step": step,
                  "encoder_config": tensor_nn.encoder_config_to_dict(
                      encoder_config),
                  "encoder_checksum": tensor_nn.encoder_checksum(encoder)}
        tensors = tensor_nn.module_tensors(encoder, "encoder.")
        tensors.update(tensor_nn.module_tensors(classifier, "classifier."))
        tensor_nn.save_checkpoint(run_paths.checkpoint, tensors, header)
        result.save_json(run_paths.probe)
        result.save_per_class_csv(run_paths.per_class)
    logger.info("supervised %s top-1 accuracy %.4f", domain,
                result.top1_accuracy)
    return encoder, result

def supervised_steps(config, data, domain):
    indices, labels = data.split(domain, "train", data.test_cities)
    return config.supervised_epochs * (-(-len(indices) // config.batch_size))

def run_supervised_workflow(config, data, experiment, domain):
    run_paths = filetree.generate_run_filetree(
        config.results_dir, experiment, "supervised", domain)
    encoder, result = train_supervised(config, data, domain,
                                       run_paths=run_paths)
    rows = [common_report.make_report_row(
        experiment, domain, "supervised", len(data.test_cities),
        supervised_steps(config, data, domain), len(data.test_cities),
        result.top1_accuracy, "supervised")]
    common_report.write_report_csv(rows, run_paths.report)
    return rows, result

def finish_experiment(config, data, experiment, rows, gap_rows=None):
    """
    Write the experiment-level report, markdown table, manifest and
    settings snapshot.
    """
    directory = filetree.experiment_directory(config.results_dir, experiment)
    common_report.write_report_csv(rows, os.path.join(directory,
                                                      "report.csv"))
    if gap_rows is not None:
        common_report.write_gap_csv(gap_rows, os.path.join(
            directory, "domain_gap.csv"))
    common_report.write_markdown_report(
        common_report.render_markdown_report(rows, gap_rows),
        os.path.join(directory, "report.md"))
    tile_ingest.save_manifest(data.manifest, filetree.manifest_filename(
        config.results_dir, experiment))
    base.save_settings(config, filetree.snapshot_filename(
        config.results_dir, experiment))
    return

def run_generalizability(config, recipe_overrides=None, data=None):
    """
    Pretrain every configured workflow on the pretrain cities, then probe
    on the pretrain cities alone and on all test cities.

    Returns:
    --------
    rows : list
        Report rows, two per workflow when pretrain cities are a strict
        subset, plus random-initialization rows when
        config.random_baseline is set.
    """
    experiment = "generalizability"
    config.validate()
    if config.holdout and config.pretrain_cities >= config.num_cities:
        raise base.Config_error("A holdout run needs fewer pretrain cities "\
            "({}) than test cities ({}).".format(config.pretrain_cities,
                                                 config.num_cities))
    base.set_determinism(config.determinism, config.seed)
    if data is None:
        data = prepare_data(config)
    domain = config.domain
    rows = []
    for workflow in config.workflow_list():
        if workflow == "supervised":
            workflow_rows, result = run_supervised_workflow(
                config, data, experiment, domain)
            rows.extend(workflow_rows)
            continue
        run_paths = filetree.generate_run_filetree(
            config.results_dir, experiment, workflow, domain)
        encoder, log = pretrain_representation(
            config, data, workflow, domain, run_paths,
            (recipe_overrides or {}))
        rows.extend(evaluate_workflow(
            config, data, encoder, experiment, workflow, domain, run_paths,
            config.pretrain_steps))
    if config.random_baseline:
        run_paths = filetree.generate_run_filetree(
            config.results_dir, experiment, RANDOM_INIT, domain)
        rows.extend(evaluate_workflow(
            config, data, random_representation(config), experiment,
            RANDOM_INIT, domain, run_paths, 0, RANDOM_INIT))
    finish_experiment(config, data, experiment, rows)
    return rows

def run_abstraction(config, recipe_overrides=None, data=None):
    """
    The same pipeline on map tiles: one row per configured workflow,
    probed on all test cities.
    """
    experiment = "abstraction"
    config.validate()
    if config.domain != "map":
        raise base.Config_error("The abstraction experiment runs on the map"\
                                " domain; set domain = map.")
    base.set_determinism(config.determinism, config.seed)
    if data is None:
        data = prepare_data(config)
    rows = []
    for workflow in config.workflow_list():
        if workflow == "supervised":
            workflow_rows, result = run_supervised_workflow(
                config, data, experiment, "map")
            rows.extend(workflow_rows)
            continue
        run_paths = filetree.generate_run_filetree(
            config.results_dir, experiment, workflow, "map")
        encoder, log = pretrain_representation(
            config, data, workflow, "map", run_paths,
            (recipe_overrides or {}))
        rows.extend(evaluate_workflow(
            config, data, encoder, experiment, workflow, "map", run_paths,
            config.pretrain_steps, probe_subset=False))
    if config.random_baseline:
        run_paths = filetree.generate_run_filetree(
            config.results_dir, experiment, RANDOM_INIT, "map")
        rows.extend(evaluate_workflow(
            config, data, random_representation(config), experiment,
            RANDOM_INIT, "map", run_paths, 0, RANDOM_INIT,
            probe_subset=False))
    finish_experiment(config, data, experiment, rows)
    return rows

def run_domain_gap(config, recipe_overrides=None, data=None):
    """
    Run the first configured self-supervised workflow and the supervised
    baseline on both domains and tabulate satellite - map per method.

    Returns:
    --------
    rows : list
        Report rows.
    gap_rows : list
        Domain-gap rows for "supervised" and "self-supervised".
    """
    experiment = "domain_gap"
    config.validate()
    self_supervised = [workflow for workflow in config.workflow_list() \
                       if workflow in SELF_SUPERVISED]
    if len(self_supervised) == 0:
        raise base.Config_error("The domain-gap experiment needs a "\
                                "self-supervised workflow.")
    workflow = self_supervised[0]
    base.set_determinism(config.determinism, config.seed)
    if data is None:
        data = prepare_data(config)
    rows = []
    accuracies = {"supervised": {}, "self-supervised": {}}
    for domain in base.DOMAINS:
        run_paths = filetree.generate_run_filetree(
            config.results_dir, experiment, workflow, domain)
        encoder, log = pretrain_representation(
            config, data, workflow, domain, run_paths,
            (recipe_overrides or {}))
        workflow_rows = evaluate_workflow(
            config, data, encoder, experiment, workflow, domain, run_paths,
            config.pretrain_steps, probe_subset=False)
        rows.extend(workflow_rows)
        accuracies["self-supervised"][domain] = workflow_rows[-1]["top1"]
        supervised_rows, result = run_supervised_workflow(
            config, data, experiment, domain)
        rows.extend(supervised_rows)
        accuracies["supervised"][domain] = result.top1_accuracy
    gap_rows = common_report.domain_gap_table(accuracies)
    finish_experiment(config, data, experiment, rows, gap_rows)
    return rows, gap_rows

def run_experiment(config, recipe_overrides=None):
    """
    Dispatch on config.experiment and return the report rows.
    """
    if config.experiment == "generalizability":
        return run_generalizability(config, recipe_overrides)
    elif config.experiment == "abstraction":
        return run_abstraction(config, recipe_overrides)
    elif config.experiment == "domain_gap":
        rows, gap_rows = run_domain_gap(config, recipe_overrides)
        return rows
    raise base.Config_error("Unknown experiment: {}".format(
        config.experiment))

def stage_manifest(config, manifest_filename=None):
    """
    Build and save the manifest of an experiment config.
    """
    manifest = prepare_manifest(config)
    if manifest_filename is None:
        manifest_filename = filetree.manifest_filename(
            config.results_dir, config.experiment)
    tile_ingest.save_manifest(manifest, manifest_filename)
    return manifest, manifest_filename

def _stage_data(config, manifest_filename=None):
    manifest = None
    if manifest_filename is not None:
        manifest = tile_ingest.load_manifest(manifest_filename)
    return prepare_data(config, manifest)

def stage_pretrain(config, workflow, recipe_overrides=None,
                   manifest_filename=None):
    """
    Pretrain one workflow and write its checkpoint, loss.csv and
    loss.png into the run directory.
    """
    config.validate()
    base.set_determinism(config.determinism, config.seed)
    data = _stage_data(config, manifest_filename)
    run_paths = filetree.generate_run_filetree(
        config.results_dir, config.experiment, workflow, config.domain)
    pretrain_representation(config, data, workflow, config.domain,
                            run_paths, recipe_overrides)
    base.save_settings(config, filetree.snapshot_filename(
        config.results_dir, config.experiment))
    return run_paths

def stage_probe(config, workflow, checkpoint_filename=None,
                manifest_filename=None):
    """
    Probe a saved checkpoint (or a random-initialization encoder for the
    workflow "random_init") and write its probe and report files.
    """
    config.validate()
    base.set_determinism(config.determinism, config.seed)
    data = _stage_data(config, manifest_filename)
    run_paths = filetree.generate_run_filetree(
        config.results_dir, config.experiment, workflow, config.domain)
    if workflow == RANDOM_INIT:
        encoder = random_representation(config)
        steps = 0
        representation = RANDOM_INIT
    else:
        if checkpoint_filename is None:
            checkpoint_filename = run_paths.checkpoint
        if not os.path.exists(checkpoint_filename):
            raise base.Incomplete_results_error("No checkpoint at {}; run "\
                "the pretrain stage first.".format(checkpoint_filename))
        header = tensor_nn.load_checkpoint(checkpoint_filename)[0]
        encoder = probe.load_representation(checkpoint_filename).encoder
        steps = header["step"]
        representation = "pretrained"
    rows = evaluate_workflow(
        config, data, encoder, config.experiment, workflow, config.domain,
        run_paths, steps, representation,
        probe_subset=config.experiment == "generalizability")
    return rows

def stage_report(results_dir):
    """
    Collect every run report under results_dir into results_dir/report.csv
    and results_dir/report.md.
    """
    rows = common_report.collect_reports(results_dir)
    for name in base.EXPERIMENTS:
        snapshot = filetree.snapshot_filename(results_dir, name)
        if os.path.exists(snapshot):
            settings = base.load_settings(snapshot)
            logger.info("%s results: seed %d, %d cities, %d pretrain steps",
                        name, settings.seed, settings.num_cities,
                        settings.pretrain_steps)
    common_report.write_report_csv(rows, os.path.join(results_dir,
                                                      "report.csv"))
    common_report.write_markdown_report(
        common_report.render_markdown_report(rows),
        os.path.join(results_dir, "report.md"))
    return rows
