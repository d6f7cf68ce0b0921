"""
common_base.py

Contain the exception hierarchy, the experiment settings object, the
experiment config-file reader, and other objects shared by every stage of a
cityssl calculation.
"""

import os
import logging
import tempfile

import numpy as np
import torch
import pyparsing as pp
from abserdes import Serializer

logger = logging.getLogger(__name__)

API_KEY_ENV = "CITYSSL_API_KEY"
DOMAINS = ("satellite", "map")
SPLITS = ("train", "test")
WORKFLOWS = ("v1", "v2", "dino", "supervised")
EXPERIMENTS = ("generalizability", "abstraction", "domain_gap")

class Cityssl_error(Exception):
    """
    Base class of every error raised on purpose by cityssl.
    """
    pass

class Domain_error(Cityssl_error, ValueError):
    """A numerical argument lies outside the domain of a function."""
    pass

class Validation_error(Cityssl_error, ValueError):
    """An input object violates its own invariants."""
    pass

class Config_error(Cityssl_error, ValueError):
    """A setting, or a combination of settings, is not allowed."""
    pass

class Shape_error(Cityssl_error, ValueError):
    """A tensor has the wrong shape."""
    pass

class State_error(Cityssl_error, RuntimeError):
    """An operation was called in the wrong order."""
    pass

class Contract_error(Cityssl_error, ValueError):
    """A debug-mode precondition check failed."""
    pass

class Masked_disc_error(Cityssl_error):
    """The sampling disc has no admissible (land) area left."""
    pass

class Fetch_error(Cityssl_error):
    """
    A tile request failed after all retries. The last HTTP status (or
    None for a connection failure) is kept in `status`.
    """
    def __init__(self, message, status=None):
        super(Fetch_error, self).__init__(message)
        self.status = status
        return

class Corrupt_tile_error(Cityssl_error):
    """A tile could not be decoded as an image."""
    pass

class Missing_tile_error(Cityssl_error):
    """A tile is not in the cache and may not be produced."""
    pass

class Incomplete_results_error(Cityssl_error):
    """A report needs a result that was never produced."""
    pass

def strBool(bool_str):
    """
    Take the string "true" or "false" of any case and return a
    boolean object.
    """
    if bool_str.lower() in ["true", "yes", "1"]:
        return True
    elif bool_str.lower() in ["false", "no", "0"]:
        return False
    else:
        raise Config_error(
            "argument for strBool must be string either 'True' or 'False', "\
            "not {}.".format(bool_str))

def split_list(list_str):
    """
    Split a comma-separated settings string into a list of stripped,
    nonempty items.
    """
    if list_str is None:
        return []
    return [item.strip() for item in str(list_str).split(",") \
            if item.strip() != ""]

class Experiment_config(Serializer):
    """
    All the settings needed to run one desk-scale experiment, from
    manifest construction through pretraining, probing and reporting.

    Attributes:
    -----------
    experiment : str, Default "generalizability"
        One of "generalizability", "abstraction" or "domain_gap".

    domain : str, Default "satellite"
        The imagery domain, "satellite" or "map".

    workflows : str, Default "v1,v2"
        Comma-separated list of workflows to run: any of "v1", "v2",
        "dino" and "supervised".

    num_cities : int, Default 20
        The number of test cities (classes) in the benchmark.

    pretrain_cities : int, Default 10
        The number of cities whose training tiles the representation
        is learned from. They are chosen from the test cities with
        pretrain_city_seed.

    holdout : bool, Default True
        Whether the run is a holdout run, in which case pretrain_cities
        must be strictly smaller than num_cities.

    samples_per_city : int, Default 200
        Sample locations per city (each yields a tile in both domains).

    split_ratio : float, Default 0.8
        Fraction of every city's samples assigned to the train split.

    radius_k : float, Default 0.05
        Proportionality constant (meters per person^0.85) of the
        sampling disc radius.

    pretrain_steps : int, Default 2000
        Gradient steps for every self-supervised run.

    probe_epochs : int, Default 100
        Epochs of linear-probe training.

    offline : bool, Default True
        Render synthetic tiles instead of calling the static-maps API.
    """

    def __init__(self):
        self.experiment = "generalizability"
        self.domain = "satellite"
        self.workflows = "v1,v2"
        self.num_cities = 20
        self.pretrain_cities = 10
        self.pretrain_city_seed = 0
        self.holdout = True
        self.samples_per_city = 200
        self.split_ratio = 0.8
        self.size_px = 256
        self.zoom = 16
        self.working_size = 96
        self.radius_k = 0.05
        self.cities_file = ""
        self.water_mask_file = ""
        self.excluded_countries = ""
        self.excluded_cities = ""
        self.pretrain_steps = 2000
        self.probe_epochs = 100
        self.probe_base_lr = 30.0
        self.probe_batch_size = 256
        self.supervised_epochs = 30
        self.supervised_lr = 0.05
        self.batch_size = 32
        self.queue_size = 1024
        self.embedding_dim = 128
        self.input_size = 64
        self.architecture = "small_conv"
        self.local_crops = 4
        self.pseudo_classes = 1024
        self.seed = 0
        self.offline = True
        self.cache_dir = "tile_cache"
        self.results_dir = "results"
        self.rate_limit = 10.0
        self.determinism = True
        self.debug = False
        self.random_baseline = False
        self.log_interval = 100
        self.num_workers = 0
        return

    def workflow_list(self):
        """
        Return the configured workflows as a list of strings.
        """
        return split_list(self.workflows)

    def validate(self):
        """
        Check the settings against each other and raise a Config_error
        on the first problem found.
        """
        if self.experiment not in EXPERIMENTS:
            raise Config_error("Unknown experiment: {}. Available "\
                "experiments are: {}.".format(self.experiment, EXPERIMENTS))
        if self.domain not in DOMAINS:
            raise Config_error("Unknown domain: {}. Must be 'satellite' or "\
                               "'map'.".format(self.domain))
        workflow_list = self.workflow_list()
        if len(workflow_list) == 0:
            raise Config_error("At least one workflow must be configured.")
        for workflow in workflow_list:
            if workflow not in WORKFLOWS:
                raise Config_error("Unknown workflow: {}. Available "\
                    "workflows are: {}.".format(workflow, WORKFLOWS))
        if self.num_cities < 1:
            raise Config_error("num_cities must be positive.")
        if not 1 <= self.pretrain_cities <= self.num_cities:
            raise Config_error("pretrain_cities must lie in "\
                "[1, num_cities]: the pretrain cities are always part of "\
                "the evaluation.")
        if self.samples_per_city < 2:
            raise Config_error("samples_per_city must be at least 2.")
        if not 0.0 < self.split_ratio < 1.0:
            raise Config_error("split_ratio must lie strictly between 0 "\
                               "and 1.")
        if self.queue_size % self.batch_size != 0:
            raise Config_error("queue_size ({}) must be divisible by "\
                "batch_size ({}).".format(self.queue_size, self.batch_size))
        if self.working_size < self.input_size:
            raise Config_error("working_size must be at least input_size.")
        return

def coerce_value(value_str, default):
    """
    Convert a config-file string into the type of a default value.
    """
    if isinstance(default, bool):
        return strBool(value_str)
    elif isinstance(default, int):
        try:
            return int(value_str)
        except ValueError:
            raise Config_error("Expected an integer, got: {}".format(
                value_str))
    elif isinstance(default, float):
        try:
            return float(value_str)
        except ValueError:
            raise Config_error("Expected a number, got: {}".format(value_str))
    else:
        return str(value_str)

def apply_settings(settings, entries, strict=True):
    """
    Assign string-valued entries onto the attributes of a settings
    object, coercing each to the type of the existing default.

    Parameters:
    -----------
    settings : Serializer
        Any cityssl settings object.

    entries : dict
        Keys are attribute names, values are strings (or already-typed
        values, which are passed through str() first).

    strict : bool, default True
        If True, an unknown key raises a Config_error. Otherwise it is
        skipped with a debug log line.

    Returns:
    --------
    settings : Serializer
        The same object, modified in place.
    """
    for key, value in entries.items():
        if not hasattr(settings, key):
            if strict:
                raise Config_error("Unknown setting for {}: {}".format(
                    type(settings).__name__, key))
            logger.debug("skipping unknown setting %s", key)
            continue
        default = getattr(settings, key)
        if isinstance(value, str):
            setattr(settings, key, coerce_value(value, default))
        else:
            setattr(settings, key, coerce_value(str(value), default))
    return settings

def _config_grammar():
    name = pp.Word(pp.alphanums + "_.-")
    assignment = pp.Group(name + pp.Suppress("=") + pp.rest_of_line)
    header = pp.Suppress("[") + name + pp.Suppress("]")
    section = pp.Group(header("name") \
        + pp.Group(pp.ZeroOrMore(assignment))("entries"))
    grammar = pp.Group(pp.ZeroOrMore(assignment))("globals") \
        + pp.Group(pp.ZeroOrMore(section))("sections")
    grammar.ignore(pp.python_style_comment)
    return grammar

def parse_config_text(text):
    """
    Parse the text of an experiment config file.

    The format is line oriented: "key = value" lines, optionally grouped
    under "[section]" headers. A '#' starts a comment. Entries that
    appear before the first header belong to the section "".

    Returns:
    --------
    sections : dict
        A dictionary whose keys are section names and whose values are
        dicts of key -> value string.
    """
    try:
        result = _config_grammar().parse_string(text, parse_all=True)
    except pp.ParseException as err:
        raise Config_error("Malformed config file at line {}: {}".format(
            err.lineno, err.line))
    sections = {"": {}}
    for key, value in result["globals"]:
        sections[""][key] = value.split("#")[0].strip()
    for section in result["sections"]:
        entries = sections.setdefault(section["name"], {})
        for key, value in section["entries"]:
            entries[key] = value.split("#")[0].strip()
    return sections

def read_config_file(config_filename):
    """
    Read and parse an experiment config file from disk.
    """
    if not os.path.exists(config_filename):
        raise Config_error("No such config file: {}".format(config_filename))
    with open(config_filename, "r", encoding="utf-8") as config_file:
        text = config_file.read()
    return parse_config_text(text)

def load_experiment_config(config_filename=None, section=None,
                           overrides=None):
    """
    Build an Experiment_config from the defaults, then the global
    entries of a config file, then a named section, then any overrides
    (typically from command-line flags), in that order of precedence.

    Sections whose name starts with "augment." are not experiment
    sections; they are returned separately as recipe overrides.

    Returns:
    --------
    config : Experiment_config

    recipe_overrides : dict
        Keys are recipe names ("v1", "v2", "dino_global", "dino_local"),
        values are dicts of parameter -> value string.
    """
    config = Experiment_config()
    recipe_overrides = {}
    if config_filename is not None:
        sections = read_config_file(config_filename)
        apply_settings(config, sections[""])
        if section is not None:
            if section not in sections:
                raise Config_error("Config section not found: {}".format(
                    section))
            apply_settings(config, sections[section])
        for name, entries in sections.items():
            if name.startswith("augment."):
                recipe_overrides[name[len("augment."):]] = entries
    if overrides is not None:
        apply_settings(config, {key: value for key, value \
                                in overrides.items() if value is not None})
    config.validate()
    return config, recipe_overrides

def save_settings(settings, xml_filename):
    """
    Write a settings snapshot to XML next to the results it produced.
    """
    dont_modify_warning = "WARNING: this file is automatically generated "\
        "and records the settings a result was produced with. Modify the "\
        "experiment config file instead."
    settings.serialize(xml_filename, xml_header=dont_modify_warning)
    return

def load_settings(xml_filename, settings_class=Experiment_config):
    """
    Read a settings snapshot written by save_settings(). Every attribute
    is coerced back to the type of its default.
    """
    if not os.path.exists(xml_filename):
        raise Config_error("No such file or directory: {}.".format(
            xml_filename))
    settings = settings_class()
    defaults = settings_class()
    settings.deserialize(xml_filename)
    for key, default in defaults.__dict__.items():
        value = getattr(settings, key, default)
        if value is None:
            value = default
        setattr(settings, key, coerce_value(str(value), default))
    return settings

def set_determinism(enabled, seed=0):
    """
    Seed torch and, when enabled, force single-threaded deterministic
    kernels so that repeated runs are bitwise identical.
    """
    torch.manual_seed(seed)
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    return

def configure_logging(verbose=False):
    """
    Configure the root logger for command-line use.
    """
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return

def derive_seed(*parts):
    """
    Combine a base seed with any number of integers or strings into a
    new 63-bit seed, stable across processes and platforms.
    """
    entropy = []
    for part in parts:
        if isinstance(part, str):
            encoded = part.encode("utf-8")
            entropy.append(len(encoded))
            entropy.extend(encoded)
        else:
            entropy.append(int(part) & 0xFFFFFFFF)
            entropy.append((int(part) >> 32) & 0xFFFFFFFF)
    seed_sequence = np.random.SeedSequence(entropy)
    return int(seed_sequence.generate_state(1, dtype=np.uint64)[0]) >> 1

def write_bytes_atomic(filename, data):
    """
    Write bytes through a temporary file in the same directory and an
    atomic rename, so readers never see a partial file.
    """
    directory = os.path.dirname(os.path.abspath(filename))
    os.makedirs(directory, exist_ok=True)
    temp_file = tempfile.NamedTemporaryFile(
        dir=directory, suffix=".tmp", delete=False)
    try:
        temp_file.write(data)
        temp_file.close()
        os.replace(temp_file.name, filename)
    except BaseException:
        temp_file.close()
        if os.path.exists(temp_file.name):
            os.remove(temp_file.name)
        raise
    return
