"""
bench.py

The cityssl command line. Each subcommand runs one stage of the
pipeline:

    manifest    sample city locations, split them and save the manifest
    pretrain    pretrain one self-supervised workflow
    probe       linear-probe a pretrained (or random) representation
    experiment  run a whole experiment and write its reports
    report      collect every run report under a results directory
"""

import os
import sys
import argparse
import logging

import cityssl.modules.common_base as base
import cityssl.experiment as experiment

logger = logging.getLogger(__name__)

def add_config_arguments(argparser, workflow_help):
    argparser.add_argument(
        "-c", "--config", dest="config", default=None, type=str,
        metavar="CONFIG_FILE",
        help="An experiment config file of 'key = value' lines grouped "\
        "in [section]s. Command-line flags override its values.")
    argparser.add_argument(
        "--section", dest="section", default=None, type=str,
        help="The config section to apply on top of the global entries.")
    argparser.add_argument(
        "-s", "--seed", dest="seed", default=None, type=int,
        help="The master seed of every random stream of the run.")
    argparser.add_argument(
        "-w", "--workflow", dest="workflow", default=None, type=str,
        help=workflow_help)
    argparser.add_argument(
        "--steps", dest="steps", default=None, type=int,
        help="Gradient steps of every self-supervised pretraining.")
    argparser.add_argument(
        "-d", "--domain", dest="domain", default=None, type=str,
        choices=base.DOMAINS, help="The imagery domain.")
    argparser.add_argument(
        "-e", "--experiment", dest="experiment", default=None, type=str,
        choices=base.EXPERIMENTS, help="The experiment to run.")
    argparser.add_argument(
        "-r", "--results_dir", dest="results_dir", default=None, type=str,
        help="The results root directory.")
    argparser.add_argument(
        "--offline", dest="offline", default=None, action="store_true",
        help="Render synthetic tiles instead of calling the static-maps "\
        "API. Overrides the offline entry of the config file, which "\
        "defaults to true.")
    argparser.add_argument(
        "--online", dest="offline", default=None, action="store_false",
        help="Fetch tiles from the static-maps API (the key is read from "\
        "the {} environment variable) through the tile cache.".format(
            base.API_KEY_ENV))
    argparser.add_argument(
        "-v", "--verbose", dest="verbose", default=False,
        action="store_true", help="Log at DEBUG level.")
    return

def make_argparser():
    argparser = argparse.ArgumentParser(
        prog="cityssl", description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    subparsers = argparser.add_subparsers(dest="command", metavar="COMMAND")
    subparsers.required = True

    manifest_parser = subparsers.add_parser(
        "manifest", help="Build and save the dataset manifest.")
    add_config_arguments(manifest_parser, "Unused by this stage.")
    manifest_parser.add_argument(
        "-o", "--output", dest="output", default=None, type=str,
        help="Where to write the manifest JSON. Defaults to "\
        "results/<experiment>/manifest.json.")

    pretrain_parser = subparsers.add_parser(
        "pretrain", help="Pretrain one self-supervised workflow.")
    add_config_arguments(pretrain_parser,
                         "The workflow to pretrain: v1, v2 or dino.")
    pretrain_parser.add_argument(
        "-m", "--manifest", dest="manifest", default=None, type=str,
        help="A saved manifest JSON. Rebuilt from the config if omitted.")

    probe_parser = subparsers.add_parser(
        "probe", help="Train and evaluate a linear probe.")
    add_config_arguments(probe_parser,
                         "The workflow whose checkpoint to probe, or "\
                         "'random_init'.")
    probe_parser.add_argument(
        "-m", "--manifest", dest="manifest", default=None, type=str,
        help="A saved manifest JSON. Rebuilt from the config if omitted.")
    probe_parser.add_argument(
        "--checkpoint", dest="checkpoint", default=None, type=str,
        help="The checkpoint to probe. Defaults to the run directory's "\
        "checkpoint.bin.")

    experiment_parser = subparsers.add_parser(
        "experiment", help="Run a complete experiment.")
    add_config_arguments(experiment_parser,
                         "Comma-separated workflows to run, e.g. 'v1,v2'.")

    report_parser = subparsers.add_parser(
        "report", help="Collect the run reports of a results directory.")
    report_parser.add_argument(
        "-r", "--results_dir", dest="results_dir", default="results",
        type=str, help="The results root directory.")
    report_parser.add_argument(
        "-v", "--verbose", dest="verbose", default=False,
        action="store_true", help="Log at DEBUG level.")
    return argparser

def config_from_args(args):
    """
    Load the experiment config named on the command line and apply the
    flag overrides.
    """
    overrides = {"seed": args["seed"], "pretrain_steps": args["steps"],
                 "domain": args["domain"], "experiment": args["experiment"],
                 "results_dir": args["results_dir"],
                 "offline": args["offline"]}
    if args["command"] == "experiment":
        overrides["workflows"] = args["workflow"]
    return base.load_experiment_config(args["config"], args["section"],
                                       overrides)

def require_workflow(args, allowed):
    workflow = args["workflow"]
    if workflow is None or workflow not in allowed:
        raise base.Config_error("The {} stage needs --workflow, one of: {}"\
                                .format(args["command"], ", ".join(allowed)))
    return workflow

def run_command(args):
    command = args["command"]
    if command == "report":
        rows = experiment.stage_report(args["results_dir"])
        print("Collected {} report rows into {}".format(
            len(rows), os.path.join(args["results_dir"], "report.csv")))
        return

    config, recipe_overrides = config_from_args(args)
    if command == "manifest":
        manifest, manifest_filename = experiment.stage_manifest(
            config, args["output"])
        print("Saved a manifest of {} cities and {} records to {}".format(
            len(manifest.city_names()), len(manifest.records),
            manifest_filename))
    elif command == "pretrain":
        workflow = require_workflow(args, experiment.SELF_SUPERVISED)
        run_paths = experiment.stage_pretrain(
            config, workflow, recipe_overrides, args["manifest"])
        print("Saved checkpoint:", run_paths.checkpoint)
    elif command == "probe":
        workflow = require_workflow(
            args, experiment.SELF_SUPERVISED + (experiment.RANDOM_INIT,))
        rows = experiment.stage_probe(config, workflow, args["checkpoint"],
                                      args["manifest"])
        for row in rows:
            print("{} cities: top-1 accuracy {:.4f}".format(
                row["test_cities"], row["top1"]))
    elif command == "experiment":
        rows = experiment.run_experiment(config, recipe_overrides)
        print("Experiment {} finished with {} report rows in {}".format(
            config.experiment, len(rows), os.path.join(
                config.results_dir, config.experiment)))
    return

def cli(argv=None):
    """
    Run the command line and return the process exit code: 0 on success,
    1 on any cityssl error, 2 on a usage error.
    """
    argparser = make_argparser()
    try:
        args = argparser.parse_args(argv)
    except SystemExit as err:
        return err.code if isinstance(err.code, int) else 2
    args = vars(args)
    base.configure_logging(args["verbose"])
    try:
        run_command(args)
    except base.Cityssl_error as err:
        print("cityssl {}: error: {}".format(args["command"], err),
              file=sys.stderr)
        return 1
    return 0

def main():
    sys.exit(cli())

if __name__ == "__main__":
    main()
