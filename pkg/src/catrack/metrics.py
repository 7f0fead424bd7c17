"""One-pass evaluation metrics: precision/success curves and their min-over-modality forms.

Center error is measured between box centres in pixels; success at a
threshold t counts frames whose IoU is strictly greater than t.
"""

from __future__ import annotations

import csv
from collections import namedtuple
from pathlib import Path

import numpy as np

from .challenge import BRANCH_ORDER
from .geometry import center_error, iou, iou_many

PR_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
SR_THRESHOLDS = np.round(np.arange(21) * 0.05, 10)

MinModality = namedtuple("MinModality", "mpr_curve msr_curve mpr20 msr")

REPORT_FIELDS = ["variant", "attribute", "frames", "pr5", "pr20", "sr", "mpr20", "msr"]


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predicted boxes for {len(gt)} ground-truth boxes")
    return pred, gt


def precision_curve(pred, gt, thresholds=PR_THRESHOLDS):
    """Fraction of frames with center error <= tau, for each tau."""
    pred, gt = _pair(pred, gt)
    if len(pred) == 0:
        return np.zeros(len(thresholds))
    err = center_error(pred, gt)
    return (err[None, :] <= np.asarray(thresholds)[:, None]).mean(axis=1)


def pr_at(curve, tau, thresholds=PR_THRESHOLDS):
    idx = np.flatnonzero(np.isclose(thresholds, tau))
    if len(idx) == 0:
        raise ValueError(f"threshold {tau} not on the grid")
    return float(curve[idx[0]])


def success_curve(pred, gt, thresholds=SR_THRESHOLDS):
    """Fraction of frames with IoU > t, for each t."""
    pred, gt = _pair(pred, gt)
    if len(pred) == 0:
        return np.zeros(len(thresholds))
    ov = iou_many(pred, gt)
    return (ov[None, :] > np.asarray(thresholds)[:, None]).mean(axis=1)


def sr_auc(curve):
    return float(np.mean(curve))


def mpr_msr(pred, gt_rgb, gt_t):
    """Pointwise minimum of the two modalities' PR and SR curves."""
    if gt_rgb is None or gt_t is None:
        raise ValueError("both RGB and thermal ground truth are required")
    mpr = np.minimum(precision_curve(pred, gt_rgb), precision_curve(pred, gt_t))
    msr = np.minimum(success_curve(pred, gt_rgb), success_curve(pred, gt_t))
    return MinModality(mpr, msr, pr_at(mpr, 20), sr_auc(msr))


def summarize(pred, gt_rgb, gt_t):
    pr = precision_curve(pred, gt_rgb)
    sr = success_curve(pred, gt_rgb)
    mm = mpr_msr(pred, gt_rgb, gt_t)
    return {"frames": len(pred), "pr5": pr_at(pr, 5), "pr20": pr_at(pr, 20), "sr": sr_auc(sr),
            "mpr20": mm.mpr20, "msr": mm.msr, "pr_curve": pr, "sr_curve": sr}


# ------------------------------------------------------------------ report

def attribute_masks(tags):
    """``{attribute: frame mask}`` for pooled per-frame tag sets.

    An untagged dataset yields only "ALL". Otherwise "NONE" selects
    untagged frames and one row per present challenge follows.
    """
    tags = list(tags)
    masks = {"ALL": np.ones(len(tags), dtype=bool)}
    if not any(tags):
        return masks
    masks["NONE"] = np.array([not t for t in tags])
    for label in BRANCH_ORDER:
        m = np.array([label in t for t in tags])
        if m.any():
            masks[label.value] = m
    return masks


def evaluate_runs(runs, dataset):
    """Rows and curves for ``runs = {variant: {sequence_name: boxes [N,4]}}``.

    Frames of all sequences are pooled before computing each row.
    """
    by_name = {s.name: s for s in dataset}
    rows, curves = [], {}
    for variant, results in runs.items():
        pred, g_rgb, g_t, tags = [], [], [], []
        for name, boxes in results.items():
            if name not in by_name:
                raise KeyError(f"no ground truth for sequence {name!r}")
            seq = by_name[name]
            p, g = _pair(boxes, seq.gt("rgb"))
            pred.append(p)
            g_rgb.append(g)
            g_t.append(seq.gt("t"))
            tags.extend(seq.tags())
        pred, g_rgb, g_t = np.concatenate(pred), np.concatenate(g_rgb), np.concatenate(g_t)
        for attr, m in attribute_masks(tags).items():
            s = summarize(pred[m], g_rgb[m], g_t[m])
            rows.append({"variant": variant, "attribute": attr, **{k: s[k] for k in REPORT_FIELDS[2:]}})
            if attr == "ALL":
                curves[variant] = (s["pr_curve"], s["sr_curve"])
    return rows, curves


def write_report_csv(path, rows):
    try:
        fh = open(path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc
    with fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if isinstance(r[k], (float, np.floating)) else r[k])
                        for k in REPORT_FIELDS})


def read_report_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["frames"] = int(r["frames"])
        for k in REPORT_FIELDS[3:]:
            r[k] = float(r[k])
    return rows


def write_curves_csv(path, curves):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "kind", "threshold", "value"])
        for variant, (pr, sr) in curves.items():
            for t, v in zip(PR_THRESHOLDS, pr):
                w.writerow([variant, "precision", repr(float(t)), repr(float(v))])
            for t, v in zip(SR_THRESHOLDS, sr):
                w.writerow([variant, "success", repr(float(t)), repr(float(v))])


def read_curves_csv(path):
    acc = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            acc.setdefault(r["variant"], {"precision": [], "success": []})[r["kind"]].append(float(r["value"]))
    return {v: (np.array(d["precision"]), np.array(d["success"])) for v, d in acc.items()}


def report(runs, dataset, out_dir, fmt="svg"):
    """Write report.csv, curves.csv and precision/success plots; returns the rows."""
    from .plots import plot_curves

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    rows, curves = evaluate_runs(runs, dataset)
    write_report_csv(out / "report.csv", rows)
    write_curves_csv(out / "curves.csv", curves)
    plot_curves(curves, out, fmt)
    return rows


__all__ = ["PR_THRESHOLDS", "SR_THRESHOLDS", "evaluate_runs", "iou", "mpr_msr", "precision_curve",
           "pr_at", "read_report_csv", "report", "sr_auc", "success_curve", "write_report_csv"]
