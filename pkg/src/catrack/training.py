"""Offline training: desk pretraining and the three staged passes.

Every stage runs multi-domain minibatch SGD. One epoch visits each training
sequence (domain) once and takes one minibatch of ``frames_per_batch``
frames from that domain's selected frames. Each frame contributes a search
crop whose shared feature map is pooled at mined positive/negative boxes.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import challenge as ch
from .challenge import ChallengeLabel, Mode, Routing, VariantFlags
from .config import Config
from .geometry import crop_resample, mine_samples, search_region, to_patch
from .model import CatModel, preprocess
from .nn import ops
from .nn.optim import SGD
from .nn.tensor import no_grad

log = logging.getLogger(__name__)

STAGE_IDS = {"pretrain": 0, "I": 1, "II": 2, "III": 3}
BASELINE = VariantFlags(Mode.BASELINE)


class StageError(RuntimeError):
    pass


@dataclass
class StagePlan:
    """What one stage trains, at which learning rate, for how many epochs."""

    stage: str
    lrs: dict                      # group -> learning rate
    epochs: int
    frozen: tuple = ()
    challenges: tuple = ()         # visited one by one (stages I and II)
    extra: dict = field(default_factory=dict)

    @classmethod
    def for_stage(cls, stage, cfg: Config):
        if stage == "pretrain":
            return cls(stage, {"backbone": cfg.lr_pretrain, "fc": cfg.lr_pretrain}, cfg.epochs("pretrain"),
                       frozen=("branch", "guide", "agg"))
        if stage == "I":
            return cls(stage, {"branch": cfg.lr_branch, "fc": cfg.lr_fc}, cfg.epochs("stage1"),
                       frozen=("backbone", "guide", "agg"), challenges=ch.BRANCH_ORDER)
        if stage == "II":
            return cls(stage, {"guide": cfg.lr_guide}, cfg.epochs("stage2"),
                       frozen=("backbone", "branch", "agg", "fc"), challenges=ch.SPECIFIC)
        if stage == "III":
            return cls(stage, {"agg": cfg.lr_agg, "fc": cfg.lr_fc, "backbone": cfg.lr_backbone},
                       cfg.epochs("stage3"), frozen=("branch", "guide"))
        raise ValueError(f"unknown stage {stage!r}")


# ------------------------------------------------------------------ batches

@dataclass
class Batch:
    rgb: np.ndarray        # [F,3,S,S] preprocessed
    t: np.ndarray
    boxes: np.ndarray      # [B,4] patch coordinates
    batch_idx: np.ndarray  # [B]
    labels: np.ndarray     # [B] 1 = target


def frame_batch(frames, cfg: Config, size, rng, jitter=0.25):
    """Crop each frame around its (jittered) box and mine labelled boxes in it."""
    n = len(frames)
    pos_split = np.array_split(np.arange(cfg.batch_pos), n)
    neg_split = np.array_split(np.arange(cfg.batch_neg), n)
    rgbs, ts, boxes, idx, labels = [], [], [], [], []
    mining = cfg.mining()
    for i, fr in enumerate(frames):
        gt = np.asarray(fr.gt_rgb, dtype=np.float64)
        shift = rng.standard_normal(2) * jitter * gt[2:]
        region = search_region((gt[0] + shift[0], gt[1] + shift[1], gt[2], gt[3]), cfg.context)
        pos, neg = mine_samples(fr.size, gt, len(pos_split[i]), len(neg_split[i]), rng, mining, region)
        rgbs.append(crop_resample(fr.rgb, region, size))
        ts.append(crop_resample(fr.thermal, region, size))
        b = np.concatenate([pos, neg])
        boxes.append(to_patch(b, region, size))
        idx.append(np.full(len(b), i))
        labels.append(np.r_[np.ones(len(pos), np.int64), np.zeros(len(neg), np.int64)])
    return Batch(preprocess(np.stack(rgbs)), preprocess(np.stack(ts)), np.concatenate(boxes),
                 np.concatenate(idx), np.concatenate(labels))


def batch_loss(model, batch, domain, cfg: Config, flags, routing, rng, training=True):
    """Classification + weighted instance-embedding loss; returns (loss, accuracy)."""
    feats = model.features(batch.rgb, batch.t, flags, routing)
    vec = model.pool(feats, batch.boxes, batch.batch_idx)
    h = model.trunk(vec, training=training, rng=rng)
    scores = model.head(h, domain)
    loss = ops.mul(ops.softmax_ce_loss(scores, batch.labels), cfg.loss_scale(len(batch.labels)))
    domains = model.domains
    if cfg.ie_weight > 0 and len(domains) > 1:
        pos = np.flatnonzero(batch.labels == 1)
        hp = ops.take(h, pos, axis=0)
        cols = [ops.take(model.head(hp, d), [1], axis=1) for d in domains]
        ie = ops.instance_embedding_loss(ops.concat(cols, axis=1), domains.index(str(domain)))
        loss = ops.add(loss, ops.mul(ie, cfg.ie_weight * cfg.loss_scale(len(pos))))
    acc = float(np.mean(scores.data.argmax(axis=1) == batch.labels))
    return loss, acc


# ------------------------------------------------------------------ loop

def group_names(model, groups):
    return [k for g in groups for k in model.names(g)]


def challenge_names(model, group, label):
    """Parameter names of ``group`` ('branch' or 'guide') belonging to ``label``."""
    tag = f".{ChallengeLabel(label).value}."
    return [k for k in model.names(group) if tag in k]


def select_frames(dataset, label=None):
    """Per-domain frame indices: all frames, or those tagged ``label``."""
    if label is None:
        return [list(range(len(seq))) for seq in dataset]
    label = ChallengeLabel(label)
    return [[i for i, f in enumerate(seq.frames) if label in f.challenges] for seq in dataset]


def run_epochs(model, dataset, selection, groups, epochs, cfg, flags, routing, rng, stage, log_rows, tag=""):
    """SGD over ``groups`` = [(names, lr)]; one minibatch per non-empty domain per epoch."""
    names = [k for ns, _ in groups for k in ns]
    model.set_trainable(names)
    opt = SGD([(model.tensors(ns), lr) for ns, lr in groups], cfg.sgd())
    size = model.cfg.input_size
    domains = [d for d, sel in enumerate(selection) if sel]
    history = []
    for epoch in range(epochs):
        losses, accs = [], []
        for d in domains:
            sel = selection[d]
            pick = rng.choice(sel, size=cfg.frames_per_batch, replace=len(sel) < cfg.frames_per_batch)
            batch = frame_batch([dataset[d].frames[i] for i in sorted(pick)], cfg, size, rng)
            opt.zero_grad()
            loss, acc = batch_loss(model, batch, d, cfg, flags, routing, rng)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            accs.append(acc)
        row = {"epoch": epoch, "stage": stage + (f":{tag}" if tag else ""),
               "loss": float(np.mean(losses)), "accuracy": float(np.mean(accs))}
        log_rows.append(row)
        history.append(row["loss"])
        log.debug("%s epoch %d loss %.4f acc %.3f", row["stage"], epoch, row["loss"], row["accuracy"])
    model.set_trainable([])
    return history


def _rng(cfg, stage, k=0):
    return np.random.default_rng([cfg.seed, 101, STAGE_IDS[stage], k])


def pretrain(dataset, model, cfg: Config, log_rows=None):
    """Plain two-stream classification with branches bypassed (baseline variant)."""
    log_rows = [] if log_rows is None else log_rows
    plan = StagePlan.for_stage("pretrain", cfg)
    groups = [(group_names(model, [g]), lr) for g, lr in plan.lrs.items()]
    run_epochs(model, dataset, select_frames(dataset), groups, plan.epochs, cfg, BASELINE,
               ch.FULL_ROUTING, _rng(cfg, "pretrain"), "pretrain", log_rows)
    return model


def _check_subsets(dataset, labels, stage):
    for label in labels:
        if not any(select_frames(dataset, label)):
            raise StageError(f"stage {stage}: no training frames tagged {ChallengeLabel(label).value}")


def train_stage1(dataset, model, cfg: Config, log_rows=None, challenges=None):
    """Each branch alone, on its own challenge frames; residual sum, no guidance or aggregation."""
    log_rows = [] if log_rows is None else log_rows
    plan = StagePlan.for_stage("I", cfg)
    labels = tuple(challenges or plan.challenges)
    _check_subsets(dataset, labels, "I")
    flags = VariantFlags(Mode.FULL, model.flags.active_layers)
    for k, label in enumerate(labels):
        groups = [(challenge_names(model, "branch", label), plan.lrs["branch"]),
                  (group_names(model, ["fc"]), plan.lrs["fc"])]
        routing = Routing(branches=(ChallengeLabel(label),), guidance=False, aggregate=False)
        run_epochs(model, dataset, select_frames(dataset, label), groups, plan.epochs, cfg, flags,
                   routing, _rng(cfg, "I", k), "I", log_rows, ChallengeLabel(label).value)
    return model


def train_stage2(dataset, model, cfg: Config, log_rows=None, challenges=None):
    """Guidance modules only, on modality-specific challenge frames."""
    log_rows = [] if log_rows is None else log_rows
    plan = StagePlan.for_stage("II", cfg)
    labels = tuple(challenges or plan.challenges)
    _check_subsets(dataset, labels, "II")
    flags = VariantFlags(Mode.FULL, model.flags.active_layers)
    for k, label in enumerate(labels):
        label = ChallengeLabel(label)
        if not label.specific:
            raise StageError(f"stage II trains guidance of IV/TC only, got {label.value}")
        groups = [(challenge_names(model, "guide", label), plan.lrs["guide"])]
        routing = Routing(branches=(label,), guidance=True, aggregate=False)
        run_epochs(model, dataset, select_frames(dataset, label), groups, plan.epochs, cfg, flags,
                   routing, _rng(cfg, "II", k), "II", log_rows, label.value)
    return model


def train_stage3(dataset, model, cfg: Config, log_rows=None):
    """Aggregation + fc, backbone fine-tuned, on all frames with the full forward."""
    log_rows = [] if log_rows is None else log_rows
    plan = StagePlan.for_stage("III", cfg)
    flags = VariantFlags(Mode.FULL, model.flags.active_layers)
    groups = [(group_names(model, [g]), lr) for g, lr in plan.lrs.items()]
    run_epochs(model, dataset, select_frames(dataset), groups, plan.epochs, cfg, flags,
               ch.FULL_ROUTING, _rng(cfg, "III"), "III", log_rows)
    return model


def strip_challenge_params(model):
    """Copy of ``model`` with only backbone and fc parameters (a baseline checkpoint)."""
    keep = {k: t.data.copy() for k, t in model.params.items() if k.split(".")[0] in ("backbone", "fc4", "fc5", "fc6")}
    return CatModel(model.cfg, keep, BASELINE)


def train_all(dataset, cfg: Config, stages=("pretrain", "I", "II", "III"), model=None, log_rows=None):
    """Run the requested stages in order; returns (model, baseline_or_None, log rows)."""
    log_rows = [] if log_rows is None else log_rows
    if model is None:
        model = CatModel.create(cfg.backbone(), n_domains=len(dataset), seed=cfg.seed,
                                flags=VariantFlags.parse(cfg.variant, cfg.layers))
    if len(model.domains) != len(dataset):
        raise StageError(f"model has {len(model.domains)} domain heads but dataset has {len(dataset)} sequences")
    baseline = None
    for stage in stages:
        t0 = time.perf_counter()
        if stage == "pretrain":
            pretrain(dataset, model, cfg, log_rows)
            baseline = strip_challenge_params(model)
        elif stage == "I":
            train_stage1(dataset, model, cfg, log_rows)
        elif stage == "II":
            train_stage2(dataset, model, cfg, log_rows)
        elif stage == "III":
            train_stage3(dataset, model, cfg, log_rows)
        else:
            raise ValueError(f"unknown stage {stage!r}")
        log.info("stage %s done in %.1fs", stage, time.perf_counter() - t0)
    return model, baseline, log_rows


def evaluate(model, dataset, cfg: Config, selection=None, flags=None, routing=ch.FULL_ROUTING,
             frames_per_domain=4, seed=0):
    """Mean loss and accuracy (no dropout) on freshly mined batches."""
    rng = np.random.default_rng([seed, 303])
    selection = selection or select_frames(dataset)
    flags = flags or model.flags
    losses, accs = [], []
    with no_grad():
        for d, sel in enumerate(selection):
            if not sel:
                continue
            pick = rng.choice(sel, size=min(frames_per_domain, len(sel)), replace=False)
            batch = frame_batch([dataset[d].frames[i] for i in sorted(pick)], cfg, model.cfg.input_size, rng)
            loss, acc = batch_loss(model, batch, d, cfg, flags, routing, rng, training=False)
            losses.append(loss.item())
            accs.append(acc)
    if not losses:
        raise StageError("evaluate: empty frame selection")
    return float(np.mean(losses)), float(np.mean(accs))


def write_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "stage", "loss", "accuracy"])
        w.writeheader()
        for r in rows:
            w.writerow({"epoch": r["epoch"], "stage": r["stage"], "loss": f"{r['loss']:.6f}",
                        "accuracy": f"{r['accuracy']:.4f}"})


__all__ = ["Batch", "StageError", "StagePlan", "batch_loss", "evaluate", "frame_batch",
           "pretrain", "train_all", "train_stage1", "train_stage2", "train_stage3", "write_log"]
