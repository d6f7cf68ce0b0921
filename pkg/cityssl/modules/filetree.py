"""
filetree.py

Generate the results directories of cityssl experiments and name the
files every stage reads and writes.
"""

import os
import shutil

EXPERIMENT_SNAPSHOT = "experiment.xml"
MANIFEST_FILENAME = "manifest.json"

class Filetree():
    """
    Define a file tree: a framework of directories to be populated with
    files.

    Attributes:
    -----------
    tree : dict
        a nested dictionary object defining the directories to create.
        example: {'v2':{'satellite':{}, 'map':{}}}
    """

    def __init__(self, tree):
        self.tree = tree
        return

    def make_tree(self, rootdir, branch=None):
        """
        Construct the directory tree below a root directory.

        Parameters:
        -----------
        rootdir : str
            an existing directory in which to place the root of the
            tree

        branch: optional nested dictionary
            subtree to create; the whole tree when omitted.
        """
        assert os.path.isdir(rootdir), "rootdir argument must be a "\
            "real directory"
        if not branch:
            branch = self.tree
        for subbranch in list(branch.keys()):
            subbranchpath = os.path.join(rootdir, subbranch)
            if not os.path.exists(subbranchpath):
                os.mkdir(subbranchpath)
            if not branch[subbranch]:
                continue
            self.make_tree(subbranchpath, branch=branch[subbranch])
        return

class Run_paths():
    """
    The files of one (experiment, workflow, domain) run directory.
    """

    def __init__(self, results_dir, experiment, workflow, domain):
        self.directory = os.path.join(results_dir, experiment, workflow,
                                      domain)
        self.report = os.path.join(self.directory, "report.csv")
        self.loss_csv = os.path.join(self.directory, "loss.csv")
        self.loss_png = os.path.join(self.directory, "loss.png")
        self.checkpoint = os.path.join(self.directory, "checkpoint.bin")
        self.probe = os.path.join(self.directory, "probe.json")
        self.probe_pretrain_cities = os.path.join(
            self.directory, "probe_pretrain_cities.json")
        self.per_class = os.path.join(self.directory, "per_class.csv")
        return

def generate_filetree_root(rootdir, empty_rootdir=False):
    """
    Create (or recreate) the results root directory.

    Parameters:
    -----------
    rootdir : str
        Path to the results root directory.

    empty_rootdir : bool, default False
        Whether to delete an existing results directory first.
    """
    if empty_rootdir and os.path.isdir(rootdir):
        print("Deleting all subdirectories/files in results directory:",
              rootdir)
        shutil.rmtree(rootdir)
    os.makedirs(rootdir, exist_ok=True)
    return

def generate_run_filetree(results_dir, experiment, workflow, domain):
    """
    Create the directory of one run and return its Run_paths.
    """
    generate_filetree_root(results_dir)
    run_filetree = Filetree({experiment: {workflow: {domain: {}}}})
    run_filetree.make_tree(results_dir)
    return Run_paths(results_dir, experiment, workflow, domain)

def experiment_directory(results_dir, experiment):
    return os.path.join(results_dir, experiment)

def snapshot_filename(results_dir, experiment):
    return os.path.join(results_dir, experiment, EXPERIMENT_SNAPSHOT)

def manifest_filename(results_dir, experiment):
    return os.path.join(results_dir, experiment, MANIFEST_FILENAME)
