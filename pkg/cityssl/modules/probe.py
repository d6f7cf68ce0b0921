"""
probe.py

Linear-probe evaluation of a frozen representation: extract features
once, train a single linear layer with cross-entropy, and report top-1
and per-class accuracy on the test split.
"""

import os
import copy
import json
import logging

import numpy as np
import pandas as pd
import scipy.stats
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode
from abserdes import Serializer

import cityssl.modules.common_base as base
import cityssl.modules.tensor_nn as tensor_nn
import cityssl.modules.augment as augment

logger = logging.getLogger(__name__)

MODES = ("final_embedding", "concat_last_4_blocks")
NUM_CONCAT_BLOCKS = 4
# images are resized so the center crop keeps this fraction of each side
CENTER_CROP_FRACTION = 0.875
EXTRACT_BATCH_SIZE = 256
MIN_FEATURE_STD = 1e-6

class Probe_schedule(Serializer):
    """
    Settings of linear-probe training.

    Attributes:
    -----------
    epochs : int, Default 100
    base_lr : float, Default 30.0
        Applied to per-dimension standardized features.
    batch_size : int, Default 256
    momentum : float, Default 0.9
    weight_decay : float, Default 0.0
    milestones : str, Default "0.6,0.8"
        Fractions of the epochs at which the learning rate drops.
    factor : float, Default 0.1
    train_flips : bool, Default False
        Add horizontally flipped copies of the training images.
    seed : int, Default 0
        Seed of the minibatch shuffle.
    """

    def __init__(self):
        self.epochs = 100
        self.base_lr = 30.0
        self.batch_size = 256
        self.momentum = 0.9
        self.weight_decay = 0.0
        self.milestones = "0.6,0.8"
        self.factor = 0.1
        self.train_flips = False
        self.seed = 0
        return

    def milestone_list(self):
        return [float(x) for x in base.split_list(self.milestones)]

    def lr_at(self, epoch):
        return tensor_nn.step_lr(epoch, self.epochs, self.base_lr,
                                 self.milestone_list(), self.factor)

    def to_dict(self):
        return dict(self.__dict__)

def probe_schedule(config=None):
    schedule = Probe_schedule()
    if config is not None:
        schedule.epochs = config.probe_epochs
        schedule.base_lr = config.probe_base_lr
        schedule.batch_size = config.probe_batch_size
        schedule.seed = config.seed
    return schedule

class Frozen_representation():
    """
    A private, gradient-free copy of an encoder and the way features are
    read from it.

    Attributes:
    -----------
    encoder : torch.nn.Module
    mode : str
        "final_embedding" or "concat_last_4_blocks" (transformers only).
    feature_dim : int
    checksum : str
        sha256 of the weights when the representation was frozen.
    """

    def __init__(self, encoder, mode="final_embedding"):
        if mode not in MODES:
            raise base.Config_error("Unknown extraction mode: {}".format(mode))
        if mode == "concat_last_4_blocks":
            if not isinstance(encoder, tensor_nn.Tiny_transformer):
                raise base.Config_error("concat_last_4_blocks needs a "\
                                        "tiny_transformer encoder.")
            if encoder.config.depth < NUM_CONCAT_BLOCKS:
                raise base.Config_error("concat_last_4_blocks needs at least"\
                                        " {} blocks.".format(NUM_CONCAT_BLOCKS))
        self.encoder = copy.deepcopy(encoder)
        self.encoder.eval()
        for param in self.encoder.parameters():
            param.requires_grad_(False)
        self.mode = mode
        if mode == "final_embedding":
            self.feature_dim = encoder.config.embedding_dim
        else:
            self.feature_dim = NUM_CONCAT_BLOCKS * encoder.config.width
        self.checksum = tensor_nn.encoder_checksum(self.encoder)
        return

    def verify(self):
        if tensor_nn.encoder_checksum(self.encoder) != self.checksum:
            raise base.Contract_error("Frozen encoder weights changed.")
        return

def load_representation(checkpoint_filename, mode="final_embedding"):
    """
    Rebuild the encoder stored in a pretraining checkpoint and freeze
    it. The weights must match the checksum recorded at save time.
    """
    header, tensors = tensor_nn.load_checkpoint(checkpoint_filename)
    encoder_config = tensor_nn.encoder_config_from_dict(
        header["encoder_config"])
    encoder = tensor_nn.build_encoder(encoder_config)
    tensor_nn.load_module(encoder, tensors, "encoder.")
    representation = Frozen_representation(encoder, mode)
    if representation.checksum != header["encoder_checksum"]:
        raise base.Contract_error("Checkpoint weights do not match their "\
                                  "checksum: {}".format(checkpoint_filename))
    return representation

def preprocess(image, input_size, flip=False):
    """
    Resize so that a centered input_size crop keeps CENTER_CROP_FRACTION
    of each side, then crop. Returns an HxWx3 float image.
    """
    img = augment.to_image(image).permute(2, 0, 1)
    resized = int(round(input_size / CENTER_CROP_FRACTION))
    if img.shape[1] != resized or img.shape[2] != resized:
        img = TF.resize(img, [resized, resized],
                        interpolation=InterpolationMode.BILINEAR,
                        antialias=False)
    img = TF.center_crop(img, [input_size, input_size])
    if flip:
        img = img.flip(2)
    return img.permute(1, 2, 0).clamp(0.0, 1.0).contiguous()

def extract_features(rep, images, flip=False,
                     batch_size=EXTRACT_BATCH_SIZE):
    """
    Return the N x feature_dim float32 feature matrix of a list of uint8
    images. The encoder is verified unchanged afterwards.
    """
    input_size = rep.encoder.config.input_size
    if len(images) == 0:
        return torch.zeros(0, rep.feature_dim)
    chunks = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            batch = torch.stack([
                preprocess(image, input_size, flip) \
                for image in images[start:start+batch_size]])
            if rep.mode == "final_embedding":
                chunks.append(tensor_nn.forward(rep.encoder, batch))
            else:
                x = batch.permute(0, 3, 1, 2).contiguous()
                blocks = rep.encoder.forward_blocks(x)
                chunks.append(torch.cat(blocks[-NUM_CONCAT_BLOCKS:], dim=1))
    rep.verify()
    return torch.cat(chunks).float()

class Linear_head():
    """
    The only trainable part of a probe: a C x feature_dim linear layer
    applied to standardized features.
    """

    def __init__(self, feature_dim, num_classes, feature_mean=None,
                 feature_std=None):
        self.layer = nn.Linear(feature_dim, num_classes)
        with torch.no_grad():
            self.layer.weight.zero_()
            self.layer.bias.zero_()
        if feature_mean is None:
            feature_mean = torch.zeros(feature_dim)
        if feature_std is None:
            feature_std = torch.ones(feature_dim)
        self.feature_mean = feature_mean
        self.feature_std = feature_std
        self.num_classes = num_classes
        return

    def standardize(self, features):
        return (features - self.feature_mean) / self.feature_std

    def logits(self, features):
        with torch.no_grad():
            return self.layer(self.standardize(features))

    def predict(self, features):
        """
        Argmax class of every row; ties go to the lowest class index.
        """
        return np.argmax(self.logits(features).numpy(), axis=1)

def _check_labels(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise base.Shape_error("labels must be one-dimensional.")
    if len(labels) > 0 and (labels.min() < 0 or labels.max() >= num_classes):
        raise base.Config_error("Labels do not fit {} classes.".format(
            num_classes))
    return labels

def train_linear_head(features, labels, num_classes, schedule):
    """
    Train a Linear_head on fixed features with SGD and the step schedule.
    """
    labels = _check_labels(labels, num_classes)
    if features.shape[0] != len(labels):
        raise base.Shape_error("features and labels differ in length.")
    if features.shape[0] == 0:
        raise base.Validation_error("Cannot train a probe without training "\
                                    "examples.")
    features = features.float()
    mean = features.mean(dim=0)
    std = features.std(dim=0, unbiased=False).clamp_min(MIN_FEATURE_STD)
    head = Linear_head(features.shape[1], num_classes, mean, std)
    inputs = head.standardize(features)
    targets = torch.from_numpy(labels)
    optimizer = torch.optim.SGD(head.layer.parameters(), lr=schedule.base_lr,
                                momentum=schedule.momentum,
                                weight_decay=schedule.weight_decay)
    rng = np.random.Generator(np.random.Philox(
        key=base.derive_seed(schedule.seed, "probe")))
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        order = torch.from_numpy(rng.permutation(len(labels)))
        for start in range(0, len(labels), schedule.batch_size):
            batch = order[start:start+schedule.batch_size]
            loss = F.cross_entropy(head.layer(inputs[batch]), targets[batch])
            tensor_nn.backward(loss)
            tensor_nn.sgd_step(optimizer, lr)
    return head

def train_probe(rep, train_set, labels, schedule, num_classes):
    """
    Extract the features of the training images once (plus flipped
    copies when schedule.train_flips) and train the linear head.
    """
    labels = _check_labels(labels, num_classes)
    if len(train_set) != len(labels):
        raise base.Shape_error("train_set and labels differ in length.")
    features = extract_features(rep, train_set)
    if schedule.train_flips:
        features = torch.cat([features, extract_features(rep, train_set,
                                                         flip=True)])
        labels = np.concatenate([labels, labels])
    head = train_linear_head(features, labels, num_classes, schedule)
    rep.verify()
    return head

class Probe_result():
    """
    Test-split accuracy of a probe.

    Attributes:
    -----------
    top1_accuracy : float
        Fraction of test examples whose argmax prediction is correct.

    per_class_accuracy : list
        Accuracy of each class; NaN for a class without test examples.

    class_counts, correct_counts : list
        Test examples and correct predictions per class.

    predictions, labels : list
        Per test example.

    class_names : list

    train_config : dict
        Snapshot of the probe schedule and representation.
    """

    def __init__(self, top1_accuracy, per_class_accuracy, class_counts,
                 correct_counts, predictions, labels, class_names,
                 train_config):
        self.top1_accuracy = top1_accuracy
        self.per_class_accuracy = per_class_accuracy
        self.class_counts = class_counts
        self.correct_counts = correct_counts
        self.predictions = predictions
        self.labels = labels
        self.class_names = class_names
        self.train_config = train_config
        return

    def to_dict(self):
        per_class = [None if np.isnan(x) else x \
                     for x in self.per_class_accuracy]
        return {"top1_accuracy": self.top1_accuracy,
                "per_class_accuracy": per_class,
                "class_counts": self.class_counts,
                "correct_counts": self.correct_counts,
                "predictions": self.predictions, "labels": self.labels,
                "class_names": self.class_names,
                "train_config": self.train_config}

    @classmethod
    def from_dict(cls, result_dict):
        per_class = [float("nan") if x is None else x \
                     for x in result_dict["per_class_accuracy"]]
        return cls(result_dict["top1_accuracy"], per_class,
                   result_dict["class_counts"], result_dict["correct_counts"],
                   result_dict["predictions"], result_dict["labels"],
                   result_dict["class_names"], result_dict["train_config"])

    def save_json(self, json_filename):
        base.write_bytes_atomic(json_filename, json.dumps(
            self.to_dict(), indent=1, sort_keys=True).encode("utf-8"))
        return

    def save_per_class_csv(self, csv_filename):
        directory = os.path.dirname(os.path.abspath(csv_filename))
        os.makedirs(directory, exist_ok=True)
        frame = pd.DataFrame({"class_name": self.class_names,
                              "test_count": self.class_counts,
                              "correct": self.correct_counts,
                              "accuracy": self.per_class_accuracy})
        frame.to_csv(csv_filename, index=False, float_format="%.6f")
        return

def load_probe_result(json_filename):
    if not os.path.exists(json_filename):
        raise base.Incomplete_results_error("Missing probe result: {}"\
                                            .format(json_filename))
    with open(json_filename, "r", encoding="utf-8") as json_file:
        return Probe_result.from_dict(json.load(json_file))

def evaluate_features(head, features, labels, class_names=None,
                      train_config=None):
    """
    Score a trained head on precomputed test features.
    """
    labels = _check_labels(labels, head.num_classes)
    if len(labels) == 0:
        raise base.Validation_error("Cannot evaluate on an empty test set.")
    if features.shape[0] != len(labels):
        raise base.Shape_error("features and labels differ in length.")
    if class_names is None:
        class_names = [str(i) for i in range(head.num_classes)]
    if len(class_names) != head.num_classes:
        raise base.Config_error("The head has {} classes but {} class "\
            "names were given.".format(head.num_classes, len(class_names)))
    predictions = head.predict(features.float())
    return result_from_predictions(predictions, labels, class_names,
                                   train_config)

def result_from_predictions(predictions, labels, class_names,
                            train_config=None):
    """
    Tally per-example predictions into a Probe_result.
    """
    num_classes = len(class_names)
    labels = _check_labels(labels, num_classes)
    predictions = _check_labels(predictions, num_classes)
    if len(labels) == 0:
        raise base.Validation_error("Cannot evaluate on an empty test set.")
    correct = predictions == labels
    class_counts = np.bincount(labels, minlength=num_classes)
    correct_counts = np.bincount(labels[correct], minlength=num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = correct_counts / class_counts.astype(np.float64)
    return Probe_result(
        float(correct.mean()), [float(x) for x in per_class],
        [int(x) for x in class_counts], [int(x) for x in correct_counts],
        [int(x) for x in predictions], [int(x) for x in labels],
        list(class_names), dict(train_config or {}))

def evaluate(head, rep, test_set, labels, class_names=None,
             train_config=None):
    """
    Extract test features and score the head on them.
    """
    if len(test_set) == 0:
        raise base.Validation_error("Cannot evaluate on an empty test set.")
    features = extract_features(rep, test_set)
    return evaluate_features(head, features, labels, class_names,
                             train_config)

def run_probe(rep, train_set, train_labels, test_set, test_labels,
              class_names, schedule):
    """
    Train a probe on the training split and evaluate it on the test
    split.
    """
    head = train_probe(rep, train_set, train_labels, schedule,
                       len(class_names))
    train_config = schedule.to_dict()
    train_config["mode"] = rep.mode
    train_config["feature_dim"] = rep.feature_dim
    train_config["encoder_checksum"] = rep.checksum
    result = evaluate(head, rep, test_set, test_labels, class_names,
                      train_config)
    rep.verify()
    logger.info("probe top-1 accuracy %.4f over %d classes",
                result.top1_accuracy, len(class_names))
    return result

def chance_band(num_classes, num_examples, sigmas=3.0):
    """
    Return the (low, high) accuracy band of a uniform random guesser:
    1/C plus or minus sigmas binomial standard deviations.
    """
    p = 1.0 / num_classes
    std = scipy.stats.binom(num_examples, p).std() / num_examples
    return p - sigmas * std, p + sigmas * std

def similarity_statistics(embeddings, labels):
    """
    Mean cosine similarity of embedding pairs from the same class and
    from different classes (each unordered pair once, self-pairs
    excluded).

    Returns:
    --------
    within : float
    between : float
    """
    embeddings = tensor_nn.l2_normalize(embeddings.detach().float())
    labels = torch.as_tensor(np.asarray(labels))
    similarity = embeddings @ embeddings.t()
    rows, cols = torch.triu_indices(len(labels), len(labels), offset=1)
    pair_similarity = similarity[rows, cols]
    same = labels[rows] == labels[cols]
    within = pair_similarity[same]
    between = pair_similarity[~same]
    if within.numel() == 0 or between.numel() == 0:
        raise base.Validation_error("Need pairs within and between classes.")
    return float(within.mean()), float(between.mean())
