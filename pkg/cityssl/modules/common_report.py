"""
common_report.py

Assemble experiment results into report tables: per-run report rows, the
domain-gap difference table, the published reference values, and the
CSV, markdown and loss-curve outputs written next to them.
"""

import os
import glob

import numpy as np
import pandas as pd
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

import cityssl.modules.common_base as base

REPORT_COLUMNS = ["experiment", "domain", "workflow", "representation",
                  "pretrain_cities", "steps", "test_cities", "unseen_cities",
                  "top1"]
GAP_COLUMNS = ["method", "satellite", "map", "difference"]
FLOAT_FORMAT = "%.6f"
REPORT_FILENAME = "report.csv"

# Published top-1 accuracies (percent) of the full-scale study, kept as
# reference metadata next to desk results. Not reproducible at desk scale.
PUBLISHED_RESULTS = [
    {"experiment": "generalizability", "domain": "satellite",
     "workflow": "v1", "pretrain_cities": 200, "pretrain_epochs": 200,
     "test_cities": 200, "top1": 95},
    {"experiment": "generalizability", "domain": "satellite",
     "workflow": "v2", "pretrain_cities": 200, "pretrain_epochs": 200,
     "test_cities": 200, "top1": 99},
    {"experiment": "generalizability", "domain": "satellite",
     "workflow": "v1", "pretrain_cities": 200, "pretrain_epochs": 200,
     "test_cities": 1690, "top1": 81},
    {"experiment": "generalizability", "domain": "satellite",
     "workflow": "v2", "pretrain_cities": 200, "pretrain_epochs": 200,
     "test_cities": 1690, "top1": 95},
    {"experiment": "generalizability", "domain": "satellite",
     "workflow": "v2", "pretrain_cities": 1690, "pretrain_epochs": 145,
     "test_cities": 1690, "top1": 98},
    {"experiment": "abstraction", "domain": "map", "workflow": "v1",
     "pretrain_cities": 1665, "pretrain_epochs": 200, "test_cities": 1665,
     "top1": 67},
    {"experiment": "abstraction", "domain": "map", "workflow": "v2",
     "pretrain_cities": 1665, "pretrain_epochs": 200, "test_cities": 1665,
     "top1": 61},
    {"experiment": "abstraction", "domain": "map", "workflow": "dino",
     "pretrain_cities": 1665, "pretrain_epochs": 180, "test_cities": 1665,
     "top1": 36},
]

PUBLISHED_DOMAIN_GAP = {
    "supervised": {"satellite": 99, "map": 86},
    "self-supervised": {"satellite": 98, "map": 67},
}

def make_report_row(experiment, domain, workflow, pretrain_cities, steps,
                    test_cities, top1, representation="pretrained"):
    """
    Build one report row. unseen_cities is the number of test cities the
    representation never saw.
    """
    return {"experiment": experiment, "domain": domain, "workflow": workflow,
            "representation": representation,
            "pretrain_cities": int(pretrain_cities), "steps": int(steps),
            "test_cities": int(test_cities),
            "unseen_cities": max(0, int(test_cities) - int(pretrain_cities)),
            "top1": float(top1)}

def write_report_csv(rows, csv_filename):
    directory = os.path.dirname(os.path.abspath(csv_filename))
    os.makedirs(directory, exist_ok=True)
    frame = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    frame.to_csv(csv_filename, index=False, float_format=FLOAT_FORMAT)
    return

def read_report_csv(csv_filename):
    if not os.path.exists(csv_filename):
        raise base.Incomplete_results_error("Missing report: {}".format(
            csv_filename))
    frame = pd.read_csv(csv_filename)
    return frame.to_dict(orient="records")

def collect_reports(results_dir):
    """
    Read every per-run report.csv under
    results_dir/<experiment>/<workflow>/<domain>/, in sorted path order.
    """
    pattern = os.path.join(results_dir, "*", "*", "*", REPORT_FILENAME)
    report_filenames = sorted(glob.glob(pattern))
    if len(report_filenames) == 0:
        raise base.Incomplete_results_error("No results found under {}"\
                                            .format(results_dir))
    rows = []
    for report_filename in report_filenames:
        rows.extend(read_report_csv(report_filename))
    return rows

def domain_gap_table(results):
    """
    Compute the domain-gap rows (method, satellite, map, satellite - map).

    Parameters:
    -----------
    results : dict
        Keys are method names, values are dicts with "satellite" and
        "map" accuracies. Integer percentages give exact differences.

    Returns:
    --------
    rows : list
        One dict per method with keys GAP_COLUMNS, in input order.
    """
    rows = []
    for method, accuracies in results.items():
        for domain in base.DOMAINS:
            if accuracies.get(domain) is None:
                raise base.Incomplete_results_error(
                    "No {} accuracy for method {}".format(domain, method))
        satellite = accuracies["satellite"]
        map_accuracy = accuracies["map"]
        rows.append({"method": method, "satellite": satellite,
                     "map": map_accuracy,
                     "difference": satellite - map_accuracy})
    return rows

def write_gap_csv(gap_rows, csv_filename):
    directory = os.path.dirname(os.path.abspath(csv_filename))
    os.makedirs(directory, exist_ok=True)
    frame = pd.DataFrame(gap_rows, columns=GAP_COLUMNS)
    frame.to_csv(csv_filename, index=False, float_format=FLOAT_FORMAT)
    return

def _format_cell(value):
    if isinstance(value, (float, np.floating)):
        return "{:.4f}".format(value)
    return str(value)

def markdown_table(rows, columns):
    lines = ["| " + " | ".join(columns) + " |",
             "|" + "|".join(["---"] * len(columns)) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(
            _format_cell(row[column]) for column in columns) + " |")
    return "\n".join(lines)

def render_markdown_report(rows, gap_rows=None, include_reference=True):
    """
    Render desk results (and optionally the published reference values)
    as markdown tables, in the column order of the published results.
    """
    sections = ["# cityssl report", "", "## Desk results", "",
                markdown_table(rows, REPORT_COLUMNS)]
    if gap_rows is not None:
        sections += ["", "## Domain gap (satellite - map)", "",
                     markdown_table(gap_rows, GAP_COLUMNS)]
    if include_reference:
        reference_columns = ["experiment", "domain", "workflow",
                             "pretrain_cities", "pretrain_epochs",
                             "test_cities", "top1"]
        sections += ["", "## Published reference values (percent, "\
                     "full scale)", "",
                     markdown_table(PUBLISHED_RESULTS, reference_columns),
                     "", markdown_table(
                         domain_gap_table(PUBLISHED_DOMAIN_GAP),
                         GAP_COLUMNS)]
    return "\n".join(sections) + "\n"

def write_markdown_report(text, md_filename):
    base.write_bytes_atomic(md_filename, text.encode("utf-8"))
    return

def plot_loss_curve(loss_rows, title):
    """
    Plot a training curve.

    Parameters:
    -----------
    loss_rows : list
        Dicts with "step" and "loss" keys, as in a Loss_log.

    title : str

    Returns:
    --------
    fig : matplotlib figure
    ax : matplotlib Axes
    """
    steps = [row["step"] for row in loss_rows]
    losses = [row["loss"] for row in loss_rows]
    fig, ax = plt.subplots()
    ax.plot(steps, losses, linestyle="-", marker="o", markersize=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    return fig, ax

def save_loss_plot(loss_rows, title, png_filename):
    fig, ax = plot_loss_curve(loss_rows, title)
    fig.savefig(png_filename)
    plt.close(fig)
    return
