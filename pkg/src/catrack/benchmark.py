"""Synthetic benchmark: train baseline and challenge-aware models, track held-out clips.

The training set has one schedule per challenge, cycled over the sequences.
The held-out set has one sequence per challenge. The easy subset is the
untagged frames of the held-out set, and the challenge subset is the tagged ones.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import synth
from .challenge import BRANCH_ORDER, Mode, VariantFlags
from .config import Config
from .metrics import pr_at, precision_curve, sr_auc, success_curve
from .tracker import run_sequence
from .training import train_all

log = logging.getLogger(__name__)

CYCLE = [[c.value] for c in BRANCH_ORDER]


def make_data(root, n_train=20, n_test=5, length=100, seed=0):
    root = Path(root)
    if not (root / "train").exists():
        synth.generate_dataset(root / "train", n_train, length, seed=seed, challenge_cycle=CYCLE)
    if not (root / "test").exists():
        synth.generate_dataset(root / "test", n_test, length, seed=seed + 500, challenge_cycle=CYCLE)
    return synth.load_dataset(root / "train"), synth.load_dataset(root / "test")


def subset_scores(results, test):
    """Pooled metrics of one model's boxes over the easy and challenge subsets."""
    pred = np.concatenate([results[s.name] for s in test])
    gt = np.concatenate([s.gt("rgb") for s in test])
    tagged = np.array([bool(t) for s in test for t in s.tags()])
    out = {}
    for name, m in (("easy", ~tagged), ("challenge", tagged)):
        out[name] = {
            "miou": float(geo.iou_many(pred[m], gt[m]).mean()),
            "pr20": pr_at(precision_curve(pred[m], gt[m]), 20),
            "sr": sr_auc(success_curve(pred[m], gt[m])),
        }
    return out


def run_seed(train, test, cfg: Config):
    """Train all stages with ``cfg.seed``; track the held-out set with both models."""
    t0 = time.perf_counter()
    model, baseline, _ = train_all(train, cfg)
    t1 = time.perf_counter()
    results = {}
    for tag, m, flags in (("cat", model, VariantFlags(Mode.FULL)),
                          ("baseline", baseline, VariantFlags(Mode.BASELINE))):
        results[tag] = {s.name: run_sequence(m, s, cfg, flags, seed=cfg.seed).boxes for s in test}
    t2 = time.perf_counter()
    scores = {tag: subset_scores(r, test) for tag, r in results.items()}
    log.info("seed %d: train %.0fs track %.0fs %s", cfg.seed, t1 - t0, t2 - t1, scores)
    return {"seed": cfg.seed, "train_s": t1 - t0, "track_s": t2 - t1, "scores": scores}


def median_scores(per_seed):
    out = {}
    for tag in ("cat", "baseline"):
        out[tag] = {}
        for subset in ("easy", "challenge"):
            out[tag][subset] = {k: float(np.median([r["scores"][tag][subset][k] for r in per_seed]))
                                for k in ("miou", "pr20", "sr")}
    return out


def _seed_job(job):
    root, cfg = job
    train, test = synth.load_dataset(Path(root) / "train"), synth.load_dataset(Path(root) / "test")
    return run_seed(train, test, cfg)


def run_benchmark(root, seeds=(0, 1, 2), cfg=None, data_seed=0):
    """Returns ``{"per_seed": [...], "median": {...}, "seconds": total}``.

    Seeds are independent, so they run in ``cfg.workers`` processes
    (0 = one per core); results do not depend on the worker count.
    """
    cfg = cfg or Config(epoch_scale=0.05)
    t0 = time.perf_counter()
    train, test = make_data(root, seed=data_seed)
    cfgs = [cfg.update({"seed": s}) for s in seeds]
    n = min(len(cfgs), cfg.workers if cfg.workers > 0 else (os.cpu_count() or 1))
    if n > 1:
        with ProcessPoolExecutor(n) as pool:
            per_seed = list(pool.map(_seed_job, [(str(root), c) for c in cfgs]))
    else:
        per_seed = [run_seed(train, test, c) for c in cfgs]
    return {"per_seed": per_seed, "median": median_scores(per_seed), "seconds": time.perf_counter() - t0,
            "workers": n}


def check(summary):
    """Pass/fail of the benchmark's three conditions."""
    med = summary["median"]
    easy = med["cat"]["easy"]
    cat_c, base_c = med["cat"]["challenge"], med["baseline"]["challenge"]
    return {
        "easy": easy["miou"] >= 0.5 and easy["pr20"] >= 0.7,
        "cat_vs_baseline": cat_c["pr20"] >= base_c["pr20"] and cat_c["sr"] >= base_c["sr"],
        "runtime": summary["seconds"] <= 30 * 60,
    }
